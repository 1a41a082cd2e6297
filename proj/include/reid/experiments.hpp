#pragma once

#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "reid/core/error.hpp"
#include "reid/core/hash.hpp"
#include "reid/core/log.hpp"
#include "reid/core/rng.hpp"
#include "reid/core/stats.hpp"
#include "reid/dataset.hpp"
#include "reid/metrics.hpp"
#include "reid/models.hpp"

namespace reid::eval {

namespace fs = std::filesystem;
using nlohmann::json;

enum class ModelKind { patch, mil };

inline const char* to_string(ModelKind k) { return k == ModelKind::patch ? "patch" : "mil"; }

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "patch") return ModelKind::patch;
  if (s == "mil") return ModelKind::mil;
  fail(ErrorKind::config, "unknown model kind '" + s + "' (expected patch or mil)");
}

struct ExperimentConfig {
  ModelKind kind = ModelKind::patch;
  int n_folds = 10;  // folds for Experiment 1, repeats for Experiment 2
  std::uint64_t seed = 0;
  SplitRatios ratios;
  double val_fraction = 0.1;  // temporal split
  std::vector<int> ks{1, 5};
  int workers = 1;
  bool permute_labels = false;
  models::Aggregation aggregation = models::Aggregation::mean_probability;
  std::size_t mil_cap = 500;
  bool keep_models = false;
  int baseline_sims = 10000;

  json to_json() const {
    return {{"kind", to_string(kind)},
            {"n_folds", n_folds},
            {"seed", seed},
            {"ratios", {ratios.train, ratios.val, ratios.test}},
            {"val_fraction", val_fraction},
            {"ks", ks},
            {"permute_labels", permute_labels},
            {"aggregation", aggregation == models::Aggregation::mean_probability ? "mean" : "vote"},
            {"mil_cap", mil_cap},
            {"baseline_sims", baseline_sims}};
  }
};

struct ExperimentResult;

/// Everything a run needs. `extra` joins the configuration fingerprint.
struct ExperimentSetup {
  const Manifest* manifest = nullptr;
  const models::PatchSource* source = nullptr;
  models::EncoderConfig encoder;
  models::TrainingConfig training;
  ExperimentConfig experiment;
  json extra = json::object();
  // MIL runs take each fold's encoder from this earlier patch run (same splits,
  // models kept) instead of training the patch classifier again.
  const ExperimentResult* patch_models = nullptr;
};

struct FoldResult {
  int fold = 0;
  std::uint64_t split_seed = 0;
  std::uint64_t train_seed = 0;
  SplitAssignment split;
  std::vector<models::SlidePrediction> predictions;
  MetricsReport metrics;
  models::TrainingHistory patch_history;
  std::optional<models::TrainingHistory> mil_history;
  std::shared_ptr<models::PatchClassifier> patch_model;
  std::shared_ptr<models::MilModel> mil_model;
};

struct MetricSummary {
  double mean = 0;
  double std = 0;
};

struct ExperimentResult {
  std::string name;
  ModelKind kind = ModelKind::patch;
  PatientIndex patients;
  models::SlideLabels truth;
  std::vector<FoldResult> folds;
  std::map<std::string, MetricSummary> summary;
  std::map<int, RandomBaseline> baselines;
  json config;
  std::string config_fingerprint;

  int n_classes() const { return static_cast<int>(patients.size()); }
  const MetricSummary& metric(const std::string& name) const { return summary.at(name); }
};

inline std::vector<std::string> metric_names(const std::vector<int>& ks) {
  std::vector<std::string> names;
  for (int k : ks) names.push_back(fmt::format("recall@{}", k));
  names.emplace_back("precision");
  names.emplace_back("f1");
  return names;
}

inline double metric_value(const MetricsReport& r, const std::string& name) {
  if (name == "precision") return r.macro_precision;
  if (name == "f1") return r.macro_f1;
  return r.macro_recall.at(std::stoi(name.substr(std::string("recall@").size())));
}

namespace detail {

inline json setup_json(const ExperimentSetup& s, const std::string& name) {
  json slides = json::array();
  for (const auto& e : *s.manifest)
    slides.push_back({e.slide_id, e.patient_id, e.resection_ordinal, e.native_mpp});
  return {{"experiment", name},
          {"settings", s.experiment.to_json()},
          {"encoder", s.encoder.to_json()},
          {"training", s.training.to_json()},
          {"extra", s.extra},
          {"slides", slides}};
}

/// Shuffles labels across training and validation slides; test labels stay true.
inline models::SlideLabels permuted_labels(const models::SlideLabels& truth, const SplitAssignment& split,
                                           std::uint64_t seed) {
  std::vector<std::string> slides;
  for (const auto* set : {&split.train, &split.val})
    for (const auto& s : *set) slides.push_back(s);
  std::vector<int> values;
  for (const auto& s : slides) values.push_back(truth.at(s));
  Rng rng(seed);
  rng.shuffle(values);
  models::SlideLabels out = truth;
  for (std::size_t i = 0; i < slides.size(); ++i) out[slides[i]] = values[i];
  return out;
}

inline FoldResult run_fold(const ExperimentSetup& setup, const models::SlideLabels& truth, int n_classes,
                           SplitAssignment split, int fold) {
  const auto& xc = setup.experiment;
  FoldResult r;
  r.fold = fold;
  r.split_seed = split.seed;
  r.train_seed = derive_seed(split.seed, "train");
  r.split = std::move(split);

  const models::SlideLabels labels =
      xc.permute_labels ? permuted_labels(truth, r.split, derive_seed(r.split_seed, "permute")) : truth;
  models::TrainingConfig tc = setup.training;
  tc.seed = r.train_seed;
  const auto& source = *setup.source;

  // The MIL encoder is the task-trained patch encoder unless weights are supplied.
  std::shared_ptr<models::PatchClassifier> patch_model;
  if (xc.kind == ModelKind::mil && setup.patch_models) {
    const auto& folds = setup.patch_models->folds;
    require(static_cast<std::size_t>(fold) < folds.size() && folds[static_cast<std::size_t>(fold)].patch_model,
            ErrorKind::invalid_input, fmt::format("no kept patch model for fold {}", fold));
    const auto& prior = folds[static_cast<std::size_t>(fold)];
    require(prior.split == r.split, ErrorKind::invalid_input,
            fmt::format("fold {}: reused patch model was trained on a different split", fold));
    patch_model = prior.patch_model;
    r.patch_history = prior.patch_history;
  } else if (xc.kind == ModelKind::patch || !setup.encoder.weights_path) {
    auto trained = models::train_patch_classifier(source, r.split, labels, n_classes, setup.encoder, tc);
    r.patch_history = std::move(trained.history);
    patch_model = std::make_shared<models::PatchClassifier>(std::move(trained.model));
  }

  std::vector<std::string> test_slides;
  for (const auto& s : r.split.test) {
    if (source.patches(s).empty())
      logger()->warn("test slide {} has no tissue patches and is not evaluated", s);
    else
      test_slides.push_back(s);
  }
  require(!test_slides.empty(), ErrorKind::data, fmt::format("fold {} has no evaluable test slides", fold));

  if (xc.kind == ModelKind::patch) {
    for (const auto& s : test_slides)
      r.predictions.push_back(models::predict_slide_patchwise(*patch_model, s, source.patches(s), xc.aggregation));
  } else {
    models::TrainingConfig mc = tc;
    mc.seed = derive_seed(r.train_seed, "mil");
    const nn::ResidualEncoder encoder =
        patch_model ? patch_model->encoder : models::build_encoder(setup.encoder, r.train_seed);
    auto trained = models::train_mil(source, r.split, labels, n_classes, setup.encoder, encoder, mc);
    r.mil_history = std::move(trained.history);
    auto mil = std::make_shared<models::MilModel>(std::move(trained.model));
    for (const auto& s : test_slides)
      r.predictions.push_back(
          models::predict_slide_mil(*mil, s, source.patches(s), xc.mil_cap, derive_seed(r.train_seed, "inference")));
    if (xc.keep_models) r.mil_model = std::move(mil);
  }
  if (xc.keep_models) r.patch_model = std::move(patch_model);
  r.metrics = compute_metrics(r.predictions, truth, n_classes, xc.ks);
  logger()->info("fold {} ({} test slides): recall@1 {:.4f}", fold, r.predictions.size(), r.metrics.macro_recall.at(xc.ks.front()));
  return r;
}

/// Runs jobs 0..n-1 on up to `workers` threads; results land in their own slot.
template <typename Job>
void run_parallel(int n, int workers, Job job) {
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  for (int w = 0; w < workers; ++w)
    threads.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

inline ExperimentResult finish(ExperimentResult result, const ExperimentSetup& setup) {
  const auto& xc = setup.experiment;
  for (const auto& name : metric_names(xc.ks)) {
    std::vector<double> v;
    for (const auto& f : result.folds) v.push_back(metric_value(f.metrics, name));
    result.summary[name] = {mean(v), stddev(v)};
  }
  std::vector<int> composition;
  for (const auto& p : result.folds.front().predictions) composition.push_back(result.truth.at(p.slide_id));
  Rng rng(derive_seed(xc.seed, "random-baseline"));
  for (int k : xc.ks)
    if (k <= result.n_classes())
      result.baselines[k] = random_baseline(result.n_classes(), composition, k, std::max(1000, xc.baseline_sims), rng);
  return result;
}

template <typename SplitFn>
ExperimentResult run_folds(const ExperimentSetup& setup, const std::string& name, SplitFn make_split) {
  require(setup.manifest && setup.source, ErrorKind::invalid_input, "experiment needs a manifest and patch source");
  require(setup.experiment.n_folds >= 1, ErrorKind::config, "need at least one fold");
  validate_manifest(*setup.manifest);
  ExperimentResult result;
  result.name = name;
  result.kind = setup.experiment.kind;
  result.patients = build_patient_index(*setup.manifest);
  result.truth = models::labels_from_manifest(*setup.manifest, result.patients);
  result.config = setup_json(setup, name);
  result.config_fingerprint = fingerprint(result.config.dump());

  // Splits are drawn up front so that every fold is fixed before dispatch.
  std::vector<SplitAssignment> splits;
  for (int i = 0; i < setup.experiment.n_folds; ++i)
    splits.push_back(make_split(setup.experiment.seed + static_cast<std::uint64_t>(i)));
  result.folds.resize(splits.size());
  run_parallel(static_cast<int>(splits.size()), setup.experiment.workers, [&](int i) {
    result.folds[static_cast<std::size_t>(i)] =
        run_fold(setup, result.truth, result.n_classes(), splits[static_cast<std::size_t>(i)], i);
  });
  return finish(std::move(result), setup);
}

}  // namespace detail

/// Monte Carlo cross-validation: fold i uses split seed base + i.
inline ExperimentResult run_experiment1(const ExperimentSetup& setup) {
  return detail::run_folds(setup, "experiment1", [&](std::uint64_t seed) {
    return monte_carlo_split(*setup.manifest, setup.experiment.ratios, seed);
  });
}

/// Train on the earliest resection, test on later ones; repeats vary only train/val.
inline ExperimentResult run_experiment2(const ExperimentSetup& setup) {
  return detail::run_folds(setup, "experiment2", [&](std::uint64_t seed) {
    return temporal_split(*setup.manifest, setup.experiment.val_fraction, seed);
  });
}

inline const std::vector<double>& default_sweep_mpps() {
  static const std::vector<double> v{0.22, 0.44, 0.88, 1.76, 3.52, 7.04};
  return v;
}

struct SweepRow {
  double mpp = 0;
  ExperimentResult result;
};

/// Experiment 1 repeated at each resolution; `tiling.target_mpp` is replaced per row.
inline std::vector<SweepRow> resolution_sweep(const ExperimentSetup& base, const models::TilingConfig& tiling,
                                              const std::vector<double>& mpps = default_sweep_mpps()) {
  require(!mpps.empty(), ErrorKind::config, "resolution sweep needs at least one mpp value");
  for (double mpp : mpps)
    for (const auto& e : *base.manifest)
      if (mpp < e.native_mpp - 1e-9)
        fail(ErrorKind::invalid_input, fmt::format("sweep resolution {} mpp is finer than native {} mpp of slide {}: "
                                                   "upsampling not supported",
                                                   mpp, e.native_mpp, e.slide_id));
  std::vector<SweepRow> rows;
  for (double mpp : mpps) {
    models::TilingConfig t = tiling;
    t.target_mpp = mpp;
    const auto source = models::PatchSource::build(*base.manifest, t);
    ExperimentSetup s = base;
    s.source = &source;
    s.extra["tiling"] = t.to_json();
    logger()->info("sweep: {} mpp, {} patches", mpp, source.total());
    rows.push_back({mpp, run_experiment1(s)});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string pct(double v) { return fmt::format("{:.2f}%", 100.0 * v); }

inline std::string format_report(const ExperimentResult& r) {
  const auto& ks = r.config.at("settings").at("ks").get<std::vector<int>>();
  std::string out;
  out += fmt::format("{}: model {}, {} {}\n", r.name, to_string(r.kind), r.folds.size(),
                     r.name == "experiment2" ? "repeats (temporal split)" : "folds (Monte Carlo cross-validation)");
  out += fmt::format("config fingerprint: {}\n", r.config_fingerprint);
  out += fmt::format("classes: {}\n", r.n_classes());
  std::string seeds;
  for (const auto& f : r.folds) seeds += fmt::format("{}{}", seeds.empty() ? "" : " ", f.split_seed);
  out += "split seeds: " + seeds + "\n\n";

  out += fmt::format("{:<10} {:>9} {:>9} {:>12} {:>20}\n", "metric", "mean", "std", "random k/N", "random simulated");
  for (const auto& name : metric_names(ks)) {
    const auto& m = r.summary.at(name);
    std::string analytic = "-", simulated = "-";
    if (name.rfind("recall@", 0) == 0) {
      const int k = std::stoi(name.substr(7));
      if (auto it = r.baselines.find(k); it != r.baselines.end()) {
        analytic = pct(it->second.analytic);
        simulated = pct(it->second.simulated_mean) + " ± " + pct(it->second.simulated_std);
      }
    }
    out += fmt::format("{:<10} {:>9} {:>9} {:>12} {:>20}\n", name, pct(m.mean), pct(m.std), analytic, simulated);
  }
  out += "\nper fold\n";
  out += fmt::format("{:<5} {:>20} {:>7}", "fold", "split seed", "n_test");
  for (const auto& name : metric_names(ks)) out += fmt::format(" {:>10}", name);
  out += "\n";
  for (const auto& f : r.folds) {
    out += fmt::format("{:<5} {:>20} {:>7}", f.fold, f.split_seed, f.metrics.n_test_slides);
    for (const auto& name : metric_names(ks)) out += fmt::format(" {:>10}", pct(metric_value(f.metrics, name)));
    out += "\n";
  }
  return out;
}

inline std::string format_metrics_csv(const ExperimentResult& r) {
  const auto ks = r.config.at("settings").at("ks").get<std::vector<int>>();
  std::string out = "row,split_seed,n_test";
  for (const auto& name : metric_names(ks)) out += "," + name;
  out += "\n";
  for (const auto& f : r.folds) {
    out += fmt::format("fold{},{},{}", f.fold, f.split_seed, f.metrics.n_test_slides);
    for (const auto& name : metric_names(ks)) out += fmt::format(",{:.6f}", metric_value(f.metrics, name));
    out += "\n";
  }
  for (const char* stat : {"mean", "std"}) {
    out += fmt::format("{},,", stat);
    for (const auto& name : metric_names(ks)) {
      const auto& m = r.summary.at(name);
      out += fmt::format(",{:.6f}", std::string(stat) == "mean" ? m.mean : m.std);
    }
    out += "\n";
  }
  return out;
}

inline json result_json(const ExperimentResult& r) {
  json j;
  j["experiment"] = r.name;
  j["model"] = to_string(r.kind);
  j["config_fingerprint"] = r.config_fingerprint;
  j["n_classes"] = r.n_classes();
  for (const auto& [name, m] : r.summary) j["summary"][name] = {{"mean", m.mean}, {"std", m.std}};
  for (const auto& [k, b] : r.baselines)
    j["random_baseline"][fmt::format("recall@{}", k)] = {
        {"analytic", b.analytic}, {"simulated_mean", b.simulated_mean}, {"simulated_std", b.simulated_std},
        {"n_sim", b.n_sim}};
  for (const auto& f : r.folds) {
    json fj = f.metrics.to_json();
    fj["fold"] = f.fold;
    fj["split_seed"] = f.split_seed;
    fj["train_seed"] = f.train_seed;
    fj["best_epoch"] = f.mil_history ? f.mil_history->best_epoch : f.patch_history.best_epoch;
    j["folds"].push_back(fj);
  }
  return j;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << text;
}

/// report.txt, metrics.csv, result.json, and per-fold predictions, splits and histories.
inline void write_experiment_outputs(const fs::path& dir, const ExperimentResult& r) {
  fs::create_directories(dir);
  write_text(dir / "report.txt", format_report(r));
  write_text(dir / "metrics.csv", format_metrics_csv(r));
  write_text(dir / "result.json", result_json(r).dump(2) + "\n");
  for (const auto& f : r.folds) {
    const fs::path fd = dir / fmt::format("fold{:02d}", f.fold);
    fs::create_directories(fd);
    write_split(fd / "split.json", f.split);
    if (!f.patch_history.epochs.empty()) models::write_history_csv(fd / "history_patch.csv", f.patch_history);
    if (f.mil_history) models::write_history_csv(fd / "history_mil.csv", *f.mil_history);
    std::string preds = "slide_id,true_patient,predicted_patient,score,top5\n";
    for (const auto& p : f.predictions) {
      std::string top;
      for (std::size_t i = 0; i < std::min<std::size_t>(5, p.topk.size()); ++i)
        top += (i ? " " : "") + r.patients.patient_of(p.topk[i]);
      preds += fmt::format("{},{},{},{:.6f},{}\n", p.slide_id, r.patients.patient_of(r.truth.at(p.slide_id)),
                           r.patients.patient_of(p.predicted_class),
                           p.class_scores[static_cast<std::size_t>(p.predicted_class)], top);
    }
    write_text(fd / "predictions.csv", preds);
  }
}

inline std::string format_sweep_report(const std::vector<SweepRow>& rows) {
  std::string out = "resolution sweep (Monte Carlo cross-validation per resolution)\n\n";
  const auto ks = rows.front().result.config.at("settings").at("ks").get<std::vector<int>>();
  const auto names = metric_names(ks);
  out += fmt::format("{:>8}", "mpp");
  for (const auto& n : names) out += fmt::format(" {:>18}", n);
  out += "\n";
  for (const auto& row : rows) {
    out += fmt::format("{:>8.2f}", row.mpp);
    for (const auto& n : names) {
      const auto& m = row.result.summary.at(n);
      out += fmt::format(" {:>18}", pct(m.mean) + " ± " + pct(m.std));
    }
    out += "\n";
  }
  return out;
}

}  // namespace reid::eval
