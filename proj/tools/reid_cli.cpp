// Command-line front end: synthetic data, tiling, training, experiments,
// latent analysis, risk questionnaire and stain augmentation demo.

#include <Eigen/Core>
#include <chrono>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <opencv2/core/version.hpp>
#include <spdlog/spdlog.h>

#include "reid/config.hpp"
#include "reid/dataset.hpp"
#include "reid/experiments.hpp"
#include "reid/latent.hpp"
#include "reid/models.hpp"
#include "reid/risk.hpp"
#include "reid/stain.hpp"
#include "reid/synthetic.hpp"
#include "reid/tiling.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace reid;

namespace {

constexpr const char* kToolVersion = "0.1.0";

struct GlobalOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string out;
  std::string log_level = "info";
};

config::RunConfig load(const GlobalOptions& g) {
  if (g.config_path.empty()) fail(ErrorKind::config, "--config is required for this command");
  std::vector<config::Override> ov;
  for (const auto& o : g.overrides) ov.push_back(config::parse_override(o));
  if (g.seed) ov.push_back({"experiment", "seed", std::to_string(*g.seed)});
  if (g.workers) ov.push_back({"experiment", "workers", std::to_string(*g.workers)});
  if (!g.out.empty()) ov.push_back({"output", "dir", g.out});
  return config::load_config(g.config_path, ov);
}

json versions() {
  return {{"tool", kToolVersion},
          {"checkpoint_format", models::kCheckpointFormat},
          {"encoder_weights_format", models::kEncoderWeightsFormat},
          {"manifest_header", kManifestHeader},
          {"fmt", FMT_VERSION},
          {"spdlog", fmt::format("{}.{}.{}", SPDLOG_VER_MAJOR, SPDLOG_VER_MINOR, SPDLOG_VER_PATCH)},
          {"opencv", CV_VERSION},
          {"eigen", fmt::format("{}.{}.{}", EIGEN_WORLD_VERSION, EIGEN_MAJOR_VERSION, EIGEN_MINOR_VERSION)}};
}

/// run.json plus the effective config, next to the command's outputs.
void write_run_manifest(const fs::path& dir, const std::string& command, const config::RunConfig& cfg,
                        json seeds, json extra = json::object()) {
  fs::create_directories(dir);
  seeds["root"] = cfg.root_seed();
  if (!cfg.dataset.manifest) seeds["cohort"] = cfg.cohort_seed();
  json j{{"command", command},
         {"config_fingerprint", config::config_fingerprint(cfg)},
         {"config", config::to_json(cfg)},
         {"seeds", seeds},
         {"versions", versions()},
         {"outputs", extra}};
  eval::write_text(dir / "run.json", j.dump(2) + "\n");
  eval::write_text(dir / "config.ini", config::to_ini(cfg));
}

json fold_seeds(const eval::ExperimentResult& r) {
  json folds = json::array();
  for (const auto& f : r.folds)
    folds.push_back({{"fold", f.fold},
                     {"split_seed", f.split_seed},
                     {"train_seed", f.train_seed},
                     {"mil_seed", derive_seed(f.train_seed, "mil")},
                     {"inference_seed", derive_seed(f.train_seed, "inference")}});
  return folds;
}

/// The manifest from the config, or a freshly generated synthetic cohort.
Manifest load_dataset(const config::RunConfig& cfg) {
  if (cfg.dataset.manifest) {
    ManifestOptions opt;
    opt.min_slides_per_patient = cfg.dataset.min_slides_per_patient;
    auto m = load_manifest(*cfg.dataset.manifest, opt);
    logger()->info("manifest {}: {} slides", cfg.dataset.manifest->string(), m.size());
    return m;
  }
  const auto cohort = cfg.synthetic_cohort();
  logger()->info("generating synthetic cohort: {} patients x {} slides, drift {}", cohort.n_patients,
                 cohort.slides_per_patient, cohort.drift);
  return synthetic::generate_synthetic_cohort(cohort, cfg.output_dir / "cohort");
}

json dataset_json(const config::RunConfig& cfg) {
  auto j = config::to_json(cfg)["dataset"];
  if (cfg.dataset.manifest) j["manifest_sha256"] = file_sha256(*cfg.dataset.manifest);
  j["cohort_seed"] = cfg.cohort_seed();
  j.erase("manifest");
  return j;
}

eval::ExperimentSetup make_setup(const config::RunConfig& cfg, const Manifest& manifest,
                                 const models::PatchSource& source) {
  eval::ExperimentSetup s;
  s.manifest = &manifest;
  s.source = &source;
  s.encoder = cfg.encoder;
  s.training = cfg.training;
  s.experiment = cfg.experiment;
  s.extra = {{"tiling", cfg.tiling.to_json()}, {"dataset", dataset_json(cfg)}};
  return s;
}

int cmd_synth(const config::RunConfig& cfg) {
  if (cfg.dataset.manifest) fail(ErrorKind::config, "synth needs a synthetic [dataset] section, not a manifest");
  const auto m = load_dataset(cfg);
  write_run_manifest(cfg.output_dir, "synth", cfg, json::object(), {{"manifest", "cohort/manifest.csv"}});
  fmt::print("wrote {} slides to {}\n", m.size(), (cfg.output_dir / "cohort").string());
  return 0;
}

int cmd_tile(const config::RunConfig& cfg) {
  const auto manifest = load_dataset(cfg);
  const fs::path dir = cfg.output_dir / "tiles";
  fs::create_directories(dir);
  std::string summary = "slide_id,otsu_threshold,tissue_cells,patches\n";
  std::size_t total = 0;
  for (const auto& e : manifest) {
    const Image img = read_image(e.image_path);
    const auto mask = tiling::build_tissue_mask(img, cfg.tiling.downscale);
    const tiling::SlideGeometry geo{e.slide_id, img.width, img.height, e.native_mpp};
    const auto specs = tiling::enumerate_patches(geo, mask, cfg.tiling.size_px, cfg.tiling.target_mpp,
                                                 cfg.tiling.stride_px, cfg.tiling.min_coverage);
    if (specs.empty()) logger()->warn("slide {} yields no tissue patches", e.slide_id);
    tiling::write_mask_png(dir / (e.slide_id + "_mask.png"), mask);
    tiling::write_patch_list(dir / (e.slide_id + "_patches.csv"), specs);
    summary += fmt::format("{},{},{},{}\n", e.slide_id, mask.threshold_used, mask.tissue_count(), specs.size());
    total += specs.size();
  }
  eval::write_text(dir / "summary.csv", summary);
  write_run_manifest(cfg.output_dir, "tile", cfg, json::object(), {{"summary", "tiles/summary.csv"}});
  fmt::print("{} slides, {} patches\n", manifest.size(), total);
  return 0;
}

/// One Monte Carlo split seeded by the root seed; saves checkpoints.
int cmd_train(const config::RunConfig& base, eval::ModelKind kind) {
  config::RunConfig cfg = base;
  cfg.experiment.kind = kind;
  cfg.experiment.n_folds = 1;
  cfg.experiment.keep_models = true;
  const auto manifest = load_dataset(cfg);
  const auto source = models::PatchSource::build(manifest, cfg.tiling);
  const auto result = eval::run_experiment1(make_setup(cfg, manifest, source));
  const auto& fold = result.folds.front();
  const fs::path dir = cfg.output_dir;
  eval::write_experiment_outputs(dir, result);

  models::CheckpointMeta meta{"patch", cfg.encoder, cfg.training.to_json(), result.patients,
                              fold.split.fingerprint(), cfg.training.attention_hidden};
  json outputs{{"report", "report.txt"}, {"split", "fold00/split.json"}};
  if (fold.patch_model) {
    auto model = *fold.patch_model;
    models::save_checkpoint(dir / "checkpoint_patch.json", model, meta);
    outputs["checkpoint_patch"] = "checkpoint_patch.json";
  }
  if (fold.mil_model) {
    auto model = *fold.mil_model;
    meta.kind = "mil";
    models::save_checkpoint(dir / "checkpoint_mil.json", model, meta);
    outputs["checkpoint_mil"] = "checkpoint_mil.json";
  }
  write_run_manifest(dir, kind == eval::ModelKind::patch ? "train-patch" : "train-mil", cfg,
                     {{"folds", fold_seeds(result)}}, outputs);
  fmt::print("{}", eval::format_report(result));
  return 0;
}

int cmd_experiment(const config::RunConfig& cfg, bool temporal) {
  const auto manifest = load_dataset(cfg);
  const auto source = models::PatchSource::build(manifest, cfg.tiling);
  logger()->info("{} tissue patches", source.total());
  const auto setup = make_setup(cfg, manifest, source);
  const auto result = temporal ? eval::run_experiment2(setup) : eval::run_experiment1(setup);
  eval::write_experiment_outputs(cfg.output_dir, result);
  write_run_manifest(cfg.output_dir, temporal ? "exp2" : "exp1", cfg, {{"folds", fold_seeds(result)}},
                     {{"report", "report.txt"}, {"metrics", "metrics.csv"}, {"result", "result.json"}});
  fmt::print("{}", eval::format_report(result));
  return 0;
}

int cmd_sweep(const config::RunConfig& cfg) {
  const auto manifest = load_dataset(cfg);
  // The sweep tiles the manifest once per resolution.
  const models::PatchSource unused;
  const auto setup = make_setup(cfg, manifest, unused);
  const auto rows = eval::resolution_sweep(setup, cfg.tiling, cfg.sweep_mpps);
  json seeds = json::object();
  for (const auto& row : rows) {
    const auto sub = cfg.output_dir / fmt::format("mpp_{:.2f}", row.mpp);
    eval::write_experiment_outputs(sub, row.result);
    seeds[fmt::format("{:.2f}", row.mpp)] = fold_seeds(row.result);
  }
  const auto report = eval::format_sweep_report(rows);
  eval::write_text(cfg.output_dir / "sweep_report.txt", report);
  write_run_manifest(cfg.output_dir, "sweep", cfg, {{"folds", seeds}}, {{"report", "sweep_report.txt"}});
  fmt::print("{}", report);
  return 0;
}

int cmd_latent(const config::RunConfig& base, int patches_per_slide) {
  config::RunConfig cfg = base;
  cfg.experiment.kind = eval::ModelKind::patch;
  cfg.experiment.keep_models = true;
  const auto manifest = load_dataset(cfg);
  const auto source = models::PatchSource::build(manifest, cfg.tiling);
  const auto result = eval::run_experiment1(make_setup(cfg, manifest, source));
  eval::write_experiment_outputs(cfg.output_dir, result);
  const std::uint64_t seed = derive_seed(cfg.root_seed(), "latent");
  const auto records = latent::experiment_distances(result, source, patches_per_slide, seed);
  latent::write_records_csv(cfg.output_dir / "distances.csv", records);
  const auto text = latent::format_summary(latent::distance_report(records));
  eval::write_text(cfg.output_dir / "latent_report.txt", text);
  write_run_manifest(cfg.output_dir, "latent", cfg, {{"folds", fold_seeds(result)}, {"latent_sample", seed}},
                     {{"distances", "distances.csv"}, {"report", "latent_report.txt"}});
  fmt::print("{}", text);
  return 0;
}

int cmd_risk(const std::string& answers, const std::string& out_dir, bool as_json) {
  risk::RiskVerdict v;
  if (!answers.empty()) {
    v = risk::assess(risk::read_questionnaire(answers));
    fmt::print("{}", as_json ? v.to_json().dump(2) + "\n" : risk::format_verdict(v));
  } else {
    v = risk::interactive_assess(std::cin, std::cout);
    if (as_json) fmt::print("{}\n", v.to_json().dump(2));
  }
  if (!out_dir.empty()) {
    eval::write_text(fs::path(out_dir) / "verdict.txt", risk::format_verdict(v));
    eval::write_text(fs::path(out_dir) / "verdict.json", v.to_json().dump(2) + "\n");
  }
  return 0;
}

/// Original patch followed by augmented copies, laid out in a grid.
int cmd_augment_demo(const config::RunConfig& cfg, const std::string& image, int count, int columns) {
  require(count >= 1 && columns >= 1, ErrorKind::invalid_input, "--count and --columns must be positive");
  RGBPatch patch;
  std::string origin;
  if (!image.empty()) {
    const Image img = read_image(image);
    const int edge = std::min(img.width, img.height);
    Image crop(edge, edge);
    for (int y = 0; y < edge; ++y)
      for (int x = 0; x < edge; ++x) std::copy_n(img.at(x, y), 3, crop.at(x, y));
    patch = to_patch(crop);
    origin = image;
  } else {
    const auto manifest = load_dataset(cfg);
    const auto source = models::PatchSource::build(manifest, cfg.tiling);
    for (const auto& e : manifest)
      if (!source.patches(e.slide_id).empty()) {
        patch = source.patches(e.slide_id).front();
        origin = e.slide_id;
        break;
      }
    if (patch.size == 0) fail(ErrorKind::data, "no tissue patch found in the dataset");
  }

  const auto od = stain::rgb_to_od(patch, cfg.training.stain_epsilon);
  const auto model = stain::estimate_stain_model(od, cfg.training.macenko);
  Rng rng(derive_seed(cfg.root_seed(), "augment-demo"));
  const int cells = count + 1;
  const int rows = (cells + columns - 1) / columns;
  const int gap = 2;
  Image grid(columns * (patch.size + gap) - gap, rows * (patch.size + gap) - gap);
  json params = json::array();
  for (int i = 0; i < cells; ++i) {
    RGBPatch tile = patch;
    if (i > 0) {
      const auto p = stain::draw_augment_params(cfg.training.stain_lambda, rng);
      tile = stain::apply_stain_augmentation(od, model, p);
      params.push_back({{"alpha", p.alpha}, {"beta", p.beta}});
    }
    const Image img = to_image(tile);
    const int ox = (i % columns) * (patch.size + gap), oy = (i / columns) * (patch.size + gap);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) std::copy_n(img.at(x, y), 3, grid.at(ox + x, oy + y));
  }
  fs::create_directories(cfg.output_dir);
  write_png(cfg.output_dir / "augment_grid.png", grid);
  json info{{"source", origin}, {"lambda", cfg.training.stain_lambda}, {"augmentations", params}};
  for (int s = 0; s < 2; ++s)
    info["stain_matrix"].push_back({model.stain_matrix(s, 0), model.stain_matrix(s, 1), model.stain_matrix(s, 2)});
  eval::write_text(cfg.output_dir / "augment_params.json", info.dump(2) + "\n");
  write_run_manifest(cfg.output_dir, "augment-demo", cfg, {{"augment", derive_seed(cfg.root_seed(), "augment-demo")}},
                     {{"grid", "augment_grid.png"}, {"params", "augment_params.json"}});
  fmt::print("wrote {}\n", (cfg.output_dir / "augment_grid.png").string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Patient re-identification from histopathology slides"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("-c,--config", g.config_path, "run configuration file");
  app.add_option("--set", g.overrides, "override a config value, section.key=value (repeatable)");
  app.add_option("--seed", g.seed, "root seed ([experiment] seed)");
  app.add_option("--workers", g.workers, "parallel folds ([experiment] workers, default 1)");
  app.add_option("-o,--out", g.out, "output directory ([output] dir)");
  app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error or off");

  auto* synth = app.add_subcommand("synth", "generate a synthetic cohort and its manifest");
  auto* tile = app.add_subcommand("tile", "tissue masks and patch lists for every slide");
  auto* train_patch = app.add_subcommand("train-patch", "train the patch classifier on one split");
  auto* train_mil = app.add_subcommand("train-mil", "train the attention MIL model on one split");
  auto* exp1 = app.add_subcommand("exp1", "Monte Carlo cross-validation");
  auto* exp2 = app.add_subcommand("exp2", "temporal split: earliest resection for training, later ones for testing");
  auto* sweep = app.add_subcommand("sweep", "Monte Carlo cross-validation at several resolutions");
  auto* lat = app.add_subcommand("latent", "distances of test slides to their patient anchors");
  int latent_pps = 64;
  lat->add_option("--patches-per-slide", latent_pps, "patches averaged per slide embedding");
  auto* risk_cmd = app.add_subcommand("risk", "publication risk questionnaire");
  std::string answers;
  bool as_json = false;
  risk_cmd->add_option("--answers", answers, "questionnaire file (key = yes|no); interactive when absent");
  risk_cmd->add_flag("--json", as_json, "print the verdict as JSON");
  auto* aug = app.add_subcommand("augment-demo", "grid of stain augmentations of one patch");
  std::string image;
  int count = 15, columns = 4;
  aug->add_option("--image", image, "image to augment instead of a dataset patch");
  aug->add_option("--count", count, "number of augmented copies");
  aug->add_option("--columns", columns, "grid columns");
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    spdlog::set_level(spdlog::level::from_str(g.log_level));
    logger()->set_level(spdlog::level::from_str(g.log_level));
    const auto start = std::chrono::steady_clock::now();
    int rc = 0;
    if (*risk_cmd) {
      rc = cmd_risk(answers, g.out, as_json);
    } else {
      const auto cfg = load(g);
      if (*synth) rc = cmd_synth(cfg);
      else if (*tile) rc = cmd_tile(cfg);
      else if (*train_patch) rc = cmd_train(cfg, eval::ModelKind::patch);
      else if (*train_mil) rc = cmd_train(cfg, eval::ModelKind::mil);
      else if (*exp1) rc = cmd_experiment(cfg, false);
      else if (*exp2) rc = cmd_experiment(cfg, true);
      else if (*sweep) rc = cmd_sweep(cfg);
      else if (*lat) rc = cmd_latent(cfg, latent_pps);
      else if (*aug) rc = cmd_augment_demo(cfg, image, count, columns);
    }
    logger()->info("done in {:.1f} s",
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    return rc;
  } catch (const Error& e) {
    fmt::print(stderr, "{} error: {}\n", to_string(e.kind()), e.what());
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    fmt::print(stderr, "unexpected error: {}\n", e.what());
    return 1;
  }
}
