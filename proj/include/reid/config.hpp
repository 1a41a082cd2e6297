#pragma once

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "reid/core/error.hpp"
#include "reid/core/hash.hpp"
#include "reid/core/rng.hpp"
#include "reid/experiments.hpp"
#include "reid/models.hpp"
#include "reid/synthetic.hpp"

namespace reid::config {

namespace fs = std::filesystem;

struct DatasetConfig {
  // Without a manifest the synthetic cohort below is generated.
  std::optional<fs::path> manifest;
  synthetic::CohortConfig cohort;
  std::optional<std::uint64_t> cohort_seed;  // defaults to a sub-seed of the root seed
  std::size_t min_slides_per_patient = 2;
};

struct RunConfig {
  DatasetConfig dataset;
  models::TilingConfig tiling;
  models::EncoderConfig encoder;
  models::TrainingConfig training;
  eval::ExperimentConfig experiment;
  std::vector<double> sweep_mpps = eval::default_sweep_mpps();
  fs::path output_dir;

  std::uint64_t root_seed() const { return experiment.seed; }

  std::uint64_t cohort_seed() const { return dataset.cohort_seed.value_or(derive_seed(root_seed(), "cohort")); }

  void validate() const {
    encoder.validate();
    training.validate();
    require(!output_dir.empty(), ErrorKind::config, "[output] dir must be set");
    require(experiment.n_folds >= 1, ErrorKind::config, "[experiment] folds must be at least 1");
    require(experiment.workers >= 1, ErrorKind::config, "[experiment] workers must be at least 1");
    require(!experiment.ks.empty(), ErrorKind::config, "[experiment] ks must not be empty");
    for (int k : experiment.ks) require(k >= 1, ErrorKind::config, "[experiment] ks must be positive");
    const auto& r = experiment.ratios;
    require(r.train > 0 && r.val >= 0 && r.test > 0 && std::abs(r.train + r.val + r.test - 1.0) < 1e-9,
            ErrorKind::config, "[experiment] split ratios must be positive and sum to 1");
    require(tiling.size_px >= 1 && tiling.target_mpp > 0 && tiling.downscale >= 1 && tiling.stride_px >= 0,
            ErrorKind::config, "[tiling] values out of range");
    require(tiling.min_coverage >= 0 && tiling.min_coverage <= 1, ErrorKind::config,
            "[tiling] min_coverage must be in [0, 1]");
    require(!sweep_mpps.empty(), ErrorKind::config, "[experiment] sweep_mpps must not be empty");
    if (!dataset.manifest) synthetic::validate(synthetic_cohort());
  }

  synthetic::CohortConfig synthetic_cohort() const {
    auto c = dataset.cohort;
    c.seed = cohort_seed();
    return c;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::string where(const std::string& section, const std::string& key) { return "[" + section + "] " + key; }

template <typename T>
T parse_number(const std::string& text, const std::string& what) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty())
    fail(ErrorKind::config, fmt::format("{}: cannot parse '{}' as a number", what, text));
  return value;
}

inline bool parse_bool(const std::string& text, const std::string& what) {
  if (text == "true" || text == "yes" || text == "1") return true;
  if (text == "false" || text == "no" || text == "0") return false;
  fail(ErrorKind::config, fmt::format("{}: expected true or false, got '{}'", what, text));
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& what) {
  std::vector<T> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_number<T>(trim(item), what));
  if (out.empty()) fail(ErrorKind::config, what + ": empty list");
  return out;
}

template <typename T>
std::string format_list(const std::vector<T>& v) {
  return fmt::format("{}", fmt::join(v, ", "));
}

struct Field {
  const char* section;
  const char* key;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T, typename Access>
Field number(const char* section, const char* key, Access access) {
  return {section, key,
          [access](RunConfig& c, const std::string& v, const std::string& what) {
            access(c) = parse_number<T>(v, what);
          },
          [access](const RunConfig& c) { return fmt::format("{}", access(const_cast<RunConfig&>(c))); }};
}

template <typename Access>
Field boolean(const char* section, const char* key, Access access) {
  return {section, key,
          [access](RunConfig& c, const std::string& v, const std::string& what) { access(c) = parse_bool(v, what); },
          [access](const RunConfig& c) { return std::string(access(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

// Every accepted key, in the order written by to_ini.
inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"dataset", "manifest",
                 [](RunConfig& c, const std::string& v, const std::string&) {
                   if (v.empty())
                     c.dataset.manifest.reset();
                   else
                     c.dataset.manifest = fs::path(v);
                 },
                 [](const RunConfig& c) { return c.dataset.manifest ? c.dataset.manifest->string() : std::string(); }});
    f.push_back(number<std::size_t>("dataset", "min_slides_per_patient",
                                    [](RunConfig& c) -> auto& { return c.dataset.min_slides_per_patient; }));
    f.push_back(number<int>("dataset", "patients", [](RunConfig& c) -> auto& { return c.dataset.cohort.n_patients; }));
    f.push_back(number<int>("dataset", "slides_per_patient",
                            [](RunConfig& c) -> auto& { return c.dataset.cohort.slides_per_patient; }));
    f.push_back(number<int>("dataset", "resections_per_patient",
                            [](RunConfig& c) -> auto& { return c.dataset.cohort.resections_per_patient; }));
    f.push_back(number<int>("dataset", "image_size_px", [](RunConfig& c) -> auto& { return c.dataset.cohort.image_size_px; }));
    f.push_back(number<double>("dataset", "native_mpp", [](RunConfig& c) -> auto& { return c.dataset.cohort.native_mpp; }));
    f.push_back(number<double>("dataset", "drift", [](RunConfig& c) -> auto& { return c.dataset.cohort.drift; }));
    f.push_back(number<double>("dataset", "slide_stain_shift",
                               [](RunConfig& c) -> auto& { return c.dataset.cohort.stain_lambda; }));
    f.push_back({"dataset", "seed",
                 [](RunConfig& c, const std::string& v, const std::string& what) {
                   if (v.empty())
                     c.dataset.cohort_seed.reset();
                   else
                     c.dataset.cohort_seed = parse_number<std::uint64_t>(v, what);
                 },
                 [](const RunConfig& c) { return c.dataset.cohort_seed ? std::to_string(*c.dataset.cohort_seed) : ""; }});

    f.push_back(number<int>("tiling", "size_px", [](RunConfig& c) -> auto& { return c.tiling.size_px; }));
    f.push_back(number<double>("tiling", "target_mpp", [](RunConfig& c) -> auto& { return c.tiling.target_mpp; }));
    f.push_back(number<double>("tiling", "min_coverage", [](RunConfig& c) -> auto& { return c.tiling.min_coverage; }));
    f.push_back(number<int>("tiling", "downscale", [](RunConfig& c) -> auto& { return c.tiling.downscale; }));
    f.push_back(number<int>("tiling", "stride_px", [](RunConfig& c) -> auto& { return c.tiling.stride_px; }));

    f.push_back(number<double>("stain", "lambda", [](RunConfig& c) -> auto& { return c.training.stain_lambda; }));
    f.push_back(number<double>("stain", "epsilon", [](RunConfig& c) -> auto& { return c.training.stain_epsilon; }));
    f.push_back(number<double>("stain", "od_floor", [](RunConfig& c) -> auto& { return c.training.macenko.od_floor; }));
    f.push_back(number<double>("stain", "angle_percentile",
                               [](RunConfig& c) -> auto& { return c.training.macenko.angle_percentile; }));
    f.push_back(number<double>("stain", "concentration_percentile",
                               [](RunConfig& c) -> auto& { return c.training.macenko.concentration_percentile; }));
    f.push_back(number<std::size_t>("stain", "min_pixels", [](RunConfig& c) -> auto& { return c.training.macenko.min_pixels; }));
    f.push_back(number<double>("stain", "min_separation_deg",
                               [](RunConfig& c) -> auto& { return c.training.macenko.min_separation_deg; }));
    f.push_back(boolean("stain", "flips", [](RunConfig& c) -> auto& { return c.training.flips; }));

    f.push_back({"model", "kind",
                 [](RunConfig& c, const std::string& v, const std::string&) { c.experiment.kind = eval::parse_model_kind(v); },
                 [](const RunConfig& c) { return std::string(eval::to_string(c.experiment.kind)); }});
    f.push_back({"model", "encoder",
                 [](RunConfig& c, const std::string& v, const std::string&) {
                   c.encoder.variant = models::parse_encoder_variant(v);
                 },
                 [](const RunConfig& c) { return std::string(models::to_string(c.encoder.variant)); }});
    f.push_back({"model", "weights",
                 [](RunConfig& c, const std::string& v, const std::string&) {
                   if (v.empty())
                     c.encoder.weights_path.reset();
                   else
                     c.encoder.weights_path = fs::path(v);
                 },
                 [](const RunConfig& c) { return c.encoder.weights_path ? c.encoder.weights_path->string() : std::string(); }});
    f.push_back(number<int>("model", "embedding_dim", [](RunConfig& c) -> auto& { return c.encoder.embedding_dim; }));
    f.push_back(number<int>("model", "width", [](RunConfig& c) -> auto& { return c.encoder.width; }));
    f.push_back(number<int>("model", "blocks", [](RunConfig& c) -> auto& { return c.encoder.blocks; }));
    f.push_back(number<double>("model", "learning_rate", [](RunConfig& c) -> auto& { return c.training.learning_rate; }));
    f.push_back(number<int>("model", "max_epochs", [](RunConfig& c) -> auto& { return c.training.max_epochs; }));
    f.push_back(number<int>("model", "patience", [](RunConfig& c) -> auto& { return c.training.patience; }));
    f.push_back(number<int>("model", "batch_size", [](RunConfig& c) -> auto& { return c.training.batch_size; }));
    f.push_back(number<int>("model", "patches_per_slide", [](RunConfig& c) -> auto& { return c.training.patches_per_slide; }));
    f.push_back(number<int>("model", "val_patches_per_slide",
                            [](RunConfig& c) -> auto& { return c.training.val_patches_per_slide; }));
    f.push_back(number<int>("model", "bag_size", [](RunConfig& c) -> auto& { return c.training.bag_size; }));
    f.push_back(number<int>("model", "bags_per_slide", [](RunConfig& c) -> auto& { return c.training.bags_per_slide; }));
    f.push_back(number<int>("model", "bags_per_step", [](RunConfig& c) -> auto& { return c.training.bags_per_step; }));
    f.push_back(number<int>("model", "val_bags_per_slide", [](RunConfig& c) -> auto& { return c.training.val_bags_per_slide; }));
    f.push_back(number<int>("model", "attention_hidden", [](RunConfig& c) -> auto& { return c.training.attention_hidden; }));
    f.push_back({"model", "aggregation",
                 [](RunConfig& c, const std::string& v, const std::string& what) {
                   if (v == "mean")
                     c.experiment.aggregation = models::Aggregation::mean_probability;
                   else if (v == "vote")
                     c.experiment.aggregation = models::Aggregation::majority_vote;
                   else
                     fail(ErrorKind::config, what + ": expected mean or vote, got '" + v + "'");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.experiment.aggregation == models::Aggregation::mean_probability ? "mean" : "vote");
                 }});
    f.push_back(number<std::size_t>("model", "mil_inference_cap", [](RunConfig& c) -> auto& { return c.experiment.mil_cap; }));

    f.push_back(number<std::uint64_t>("experiment", "seed", [](RunConfig& c) -> auto& { return c.experiment.seed; }));
    f.push_back(number<int>("experiment", "folds", [](RunConfig& c) -> auto& { return c.experiment.n_folds; }));
    f.push_back({"experiment", "ks",
                 [](RunConfig& c, const std::string& v, const std::string& what) { c.experiment.ks = parse_list<int>(v, what); },
                 [](const RunConfig& c) { return format_list(c.experiment.ks); }});
    f.push_back(number<double>("experiment", "train_ratio", [](RunConfig& c) -> auto& { return c.experiment.ratios.train; }));
    f.push_back(number<double>("experiment", "val_ratio", [](RunConfig& c) -> auto& { return c.experiment.ratios.val; }));
    f.push_back(number<double>("experiment", "test_ratio", [](RunConfig& c) -> auto& { return c.experiment.ratios.test; }));
    f.push_back(number<double>("experiment", "temporal_val_fraction",
                               [](RunConfig& c) -> auto& { return c.experiment.val_fraction; }));
    f.push_back(boolean("experiment", "permute_labels", [](RunConfig& c) -> auto& { return c.experiment.permute_labels; }));
    f.push_back(number<int>("experiment", "baseline_sims", [](RunConfig& c) -> auto& { return c.experiment.baseline_sims; }));
    f.push_back(number<int>("experiment", "workers", [](RunConfig& c) -> auto& { return c.experiment.workers; }));
    f.push_back({"experiment", "sweep_mpps",
                 [](RunConfig& c, const std::string& v, const std::string& what) { c.sweep_mpps = parse_list<double>(v, what); },
                 [](const RunConfig& c) { return format_list(c.sweep_mpps); }});

    f.push_back({"output", "dir",
                 [](RunConfig& c, const std::string& v, const std::string&) { c.output_dir = fs::path(v); },
                 [](const RunConfig& c) { return c.output_dir.string(); }});
    return f;
  }();
  return table;
}

inline const std::vector<std::string>& section_names() {
  static const std::vector<std::string> names{"dataset", "tiling", "stain", "model", "experiment", "output"};
  return names;
}

inline const std::vector<std::string>& required_sections() {
  static const std::vector<std::string> names{"dataset", "output"};
  return names;
}

inline void set_value(RunConfig& c, const std::string& section, const std::string& key, const std::string& value) {
  const auto& names = section_names();
  if (std::find(names.begin(), names.end(), section) == names.end())
    fail(ErrorKind::config, fmt::format("unknown section [{}] (valid: {})", section, fmt::join(names, ", ")));
  std::vector<std::string> valid;
  for (const auto& f : fields()) {
    if (f.section != section) continue;
    if (f.key == key) {
      f.set(c, value, where(section, key));
      return;
    }
    valid.emplace_back(f.key);
  }
  fail(ErrorKind::config, fmt::format("unknown key '{}' in [{}] (valid keys: {})", key, section, fmt::join(valid, ", ")));
}

}  // namespace detail

/// A `section.key=value` override.
struct Override {
  std::string section, key, value;
};

inline Override parse_override(const std::string& text) {
  const auto eq = text.find('=');
  const auto dot = text.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    fail(ErrorKind::config, "override '" + text + "' must look like section.key=value");
  return {detail::trim(text.substr(0, dot)), detail::trim(text.substr(dot + 1, eq - dot - 1)),
          detail::trim(text.substr(eq + 1))};
}

/// Parses the sectioned `key = value` format; '#' and ';' start comments.
/// Overrides are applied after the file and may name sections the file lacks.
inline RunConfig parse_config(std::istream& in, const std::vector<Override>& overrides = {}) {
  RunConfig c;
  std::set<std::string> seen;
  std::string section, line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto pos = line.find_first_of("#;"); pos != std::string::npos) line.erase(pos);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(ErrorKind::config, fmt::format("config line {}: malformed section header", lineno));
      section = detail::trim(line.substr(1, line.size() - 2));
      const auto& names = detail::section_names();
      if (std::find(names.begin(), names.end(), section) == names.end())
        fail(ErrorKind::config, fmt::format("config line {}: unknown section [{}] (valid: {})", lineno, section,
                                            fmt::join(names, ", ")));
      seen.insert(section);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorKind::config, fmt::format("config line {}: expected key = value", lineno));
    if (section.empty()) fail(ErrorKind::config, fmt::format("config line {}: key outside of any section", lineno));
    try {
      detail::set_value(c, section, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      fail(e.kind(), fmt::format("config line {}: {}", lineno, e.what()));
    }
  }
  for (const auto& o : overrides) {
    detail::set_value(c, o.section, o.key, o.value);
    seen.insert(o.section);
  }
  for (const auto& s : detail::required_sections())
    if (!seen.contains(s)) fail(ErrorKind::config, "missing required section [" + s + "]");
  c.validate();
  return c;
}

inline RunConfig load_config(const fs::path& path, const std::vector<Override>& overrides = {}) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open config " + path.string());
  return parse_config(in, overrides);
}

/// The effective configuration in the file format; parsing it gives the same config.
inline std::string to_ini(const RunConfig& c) {
  std::string out, section;
  for (const auto& f : detail::fields()) {
    if (f.section != section) {
      section = f.section;
      out += fmt::format("{}[{}]\n", out.empty() ? "" : "\n", section);
    }
    out += fmt::format("{} = {}\n", f.key, f.get(c));
  }
  return out;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  for (const auto& f : detail::fields()) j[f.section][f.key] = f.get(c);
  return j;
}

inline std::string config_fingerprint(const RunConfig& c) {
  auto j = to_json(c);
  // Neither changes results.
  j["experiment"].erase("workers");
  j["output"].erase("dir");
  return fingerprint(j.dump());
}

}  // namespace reid::config
