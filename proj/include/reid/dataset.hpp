#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reid/core/error.hpp"
#include "reid/core/hash.hpp"
#include "reid/core/log.hpp"
#include "reid/core/rng.hpp"

namespace reid {

namespace fs = std::filesystem;

struct SlideManifestEntry {
  std::string slide_id;
  std::string patient_id;
  int resection_ordinal = 0;
  std::optional<int> days_since_first_resection;
  fs::path image_path;
  double native_mpp = 0.0;

  friend bool operator==(const SlideManifestEntry&, const SlideManifestEntry&) = default;
};

using Manifest = std::vector<SlideManifestEntry>;

inline constexpr const char* kManifestHeader =
    "slide_id,patient_id,resection_ordinal,days_since_first_resection,image_path,native_mpp";

struct ManifestOptions {
  // When false, missing images surface later, at first read.
  bool check_images_at_load = true;
  std::size_t min_slides_per_patient = 2;
};

namespace detail {

inline std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline long parse_int(const std::string& text, const std::string& what) {
  std::size_t used = 0;
  long value = 0;
  try {
    value = std::stol(text, &used);
  } catch (const std::exception&) {
    fail(ErrorKind::data, "cannot parse " + what + " '" + text + "'");
  }
  if (used != text.size()) fail(ErrorKind::data, "cannot parse " + what + " '" + text + "'");
  return value;
}

inline double parse_real(const std::string& text, const std::string& what) {
  std::size_t used = 0;
  double value = 0;
  try {
    value = std::stod(text, &used);
  } catch (const std::exception&) {
    fail(ErrorKind::data, "cannot parse " + what + " '" + text + "'");
  }
  if (used != text.size()) fail(ErrorKind::data, "cannot parse " + what + " '" + text + "'");
  return value;
}

}  // namespace detail

/// Checks per-slide invariants and resection ordinal structure. Throws on violation.
inline void validate_manifest(const Manifest& entries) {
  std::set<std::string> ids;
  std::map<std::string, std::set<int>> ordinals;
  for (const auto& e : entries) {
    require(!e.slide_id.empty(), ErrorKind::data, "empty slide id");
    require(!e.patient_id.empty(), ErrorKind::data, "empty patient id for slide " + e.slide_id);
    if (!ids.insert(e.slide_id).second) fail(ErrorKind::data, "duplicate slide id " + e.slide_id);
    if (!(e.native_mpp > 0.0) || !std::isfinite(e.native_mpp))
      fail(ErrorKind::data, "non-positive mpp for slide " + e.slide_id);
    require(e.resection_ordinal >= 0, ErrorKind::data, "negative resection ordinal for slide " + e.slide_id);
    if (e.days_since_first_resection)
      require(*e.days_since_first_resection >= 0, ErrorKind::data,
              "negative days_since_first_resection for slide " + e.slide_id);
    ordinals[e.patient_id].insert(e.resection_ordinal);
  }
  for (const auto& [patient, set] : ordinals) {
    int expected = 0;
    for (int ord : set) {
      if (ord != expected)
        fail(ErrorKind::data, "resection ordinals of patient " + patient + " must form 0..k without gaps");
      ++expected;
    }
  }
}

/// Drops patients with fewer than `min_slides` slides, keeping manifest order.
inline Manifest apply_inclusion_rule(const Manifest& entries, std::size_t min_slides = 2) {
  std::map<std::string, std::size_t> counts;
  for (const auto& e : entries) ++counts[e.patient_id];
  Manifest kept;
  for (const auto& [patient, n] : counts)
    if (n < min_slides)
      logger()->warn("excluding patient {} with {} slide(s); at least {} required", patient, n, min_slides);
  for (const auto& e : entries)
    if (counts[e.patient_id] >= min_slides) kept.push_back(e);
  return kept;
}

inline Manifest load_manifest(const fs::path& path, const ManifestOptions& options = {}) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open manifest " + path.string());
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");

  std::string line;
  if (!std::getline(in, line)) {
    logger()->warn("manifest {} is empty", path.string());
    return {};
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader)
    fail(ErrorKind::data, "manifest header must be exactly '" + std::string(kManifestHeader) + "'");

  Manifest entries;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv_row(line);
    if (cells.size() != 6)
      fail(ErrorKind::data, "manifest row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                                " columns, expected 6");
    SlideManifestEntry e;
    e.slide_id = cells[0];
    e.patient_id = cells[1];
    e.resection_ordinal = static_cast<int>(detail::parse_int(cells[2], "resection_ordinal"));
    if (!cells[3].empty())
      e.days_since_first_resection = static_cast<int>(detail::parse_int(cells[3], "days_since_first_resection"));
    e.image_path = fs::path(cells[4]).is_absolute() ? fs::path(cells[4]) : base / cells[4];
    e.native_mpp = detail::parse_real(cells[5], "native_mpp");
    entries.push_back(std::move(e));
  }
  validate_manifest(entries);
  if (options.check_images_at_load)
    for (const auto& e : entries)
      if (!fs::exists(e.image_path))
        fail(ErrorKind::io, "missing image file " + e.image_path.string() + " for slide " + e.slide_id);
  if (entries.empty()) logger()->warn("manifest {} has no rows", path.string());
  return apply_inclusion_rule(entries, options.min_slides_per_patient);
}

/// Writes image paths relative to the manifest's directory when possible.
inline void write_manifest(const fs::path& path, const Manifest& entries) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write manifest " + path.string());
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  out << kManifestHeader << '\n';
  for (const auto& e : entries) {
    fs::path image = e.image_path;
    if (image.is_absolute() || image.string().starts_with(base.string())) {
      auto rel = image.lexically_relative(base);
      if (!rel.empty()) image = rel;
    }
    std::ostringstream mpp;
    mpp.precision(17);
    mpp << e.native_mpp;
    out << e.slide_id << ',' << e.patient_id << ',' << e.resection_ordinal << ','
        << (e.days_since_first_resection ? std::to_string(*e.days_since_first_resection) : std::string())
        << ',' << image.generic_string() << ',' << mpp.str() << '\n';
  }
}

inline const SlideManifestEntry& find_slide(const Manifest& entries, const std::string& slide_id) {
  auto it = std::find_if(entries.begin(), entries.end(), [&](const auto& e) { return e.slide_id == slide_id; });
  if (it == entries.end()) fail(ErrorKind::data, "unknown slide id " + slide_id);
  return *it;
}

/// Ordered bijection between patient ids and class indices.
class PatientIndex {
 public:
  PatientIndex() = default;
  explicit PatientIndex(std::vector<std::string> patients) : patients_(std::move(patients)) {
    for (std::size_t i = 0; i < patients_.size(); ++i)
      if (!index_.emplace(patients_[i], static_cast<int>(i)).second)
        fail(ErrorKind::data, "duplicate patient id " + patients_[i] + " in index");
  }

  std::size_t size() const noexcept { return patients_.size(); }
  int class_of(const std::string& patient) const {
    auto it = index_.find(patient);
    if (it == index_.end()) fail(ErrorKind::data, "patient " + patient + " not in index");
    return it->second;
  }
  bool contains(const std::string& patient) const { return index_.contains(patient); }
  const std::string& patient_of(int cls) const { return patients_.at(static_cast<std::size_t>(cls)); }
  const std::vector<std::string>& patients() const noexcept { return patients_; }

  nlohmann::json to_json() const { return patients_; }
  static PatientIndex from_json(const nlohmann::json& j) { return PatientIndex(j.get<std::vector<std::string>>()); }

  friend bool operator==(const PatientIndex& a, const PatientIndex& b) { return a.patients_ == b.patients_; }

 private:
  std::vector<std::string> patients_;
  std::map<std::string, int> index_;
};

inline PatientIndex build_patient_index(const Manifest& entries) {
  require(!entries.empty(), ErrorKind::invalid_input, "cannot build a patient index from an empty manifest");
  std::set<std::string> unique;
  for (const auto& e : entries) unique.insert(e.patient_id);
  return PatientIndex(std::vector<std::string>(unique.begin(), unique.end()));
}

enum class SplitKind { monte_carlo, temporal };

inline const char* to_string(SplitKind k) { return k == SplitKind::monte_carlo ? "monte_carlo" : "temporal"; }

struct SplitAssignment {
  std::set<std::string> train;
  std::set<std::string> val;
  std::set<std::string> test;
  std::uint64_t seed = 0;
  SplitKind kind = SplitKind::monte_carlo;

  nlohmann::json to_json() const {
    return {{"kind", to_string(kind)}, {"seed", seed}, {"train", train}, {"val", val}, {"test", test}};
  }

  static SplitAssignment from_json(const nlohmann::json& j) {
    SplitAssignment s;
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "monte_carlo")
      s.kind = SplitKind::monte_carlo;
    else if (kind == "temporal")
      s.kind = SplitKind::temporal;
    else
      fail(ErrorKind::data, "unknown split kind " + kind);
    s.seed = j.at("seed").get<std::uint64_t>();
    s.train = j.at("train").get<std::set<std::string>>();
    s.val = j.at("val").get<std::set<std::string>>();
    s.test = j.at("test").get<std::set<std::string>>();
    return s;
  }

  std::string fingerprint() const { return reid::fingerprint(to_json().dump()); }

  friend bool operator==(const SplitAssignment&, const SplitAssignment&) = default;
};

inline void write_split(const fs::path& path, const SplitAssignment& split) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write split file " + path.string());
  out << split.to_json().dump(2) << '\n';
}

inline SplitAssignment read_split(const fs::path& path) {
  try {
    return SplitAssignment::from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, "malformed split file " + path.string() + ": " + e.what());
  }
}

struct SplitRatios {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

namespace detail {

inline std::map<std::string, std::vector<std::size_t>> slides_by_patient(const Manifest& entries) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < entries.size(); ++i) groups[entries[i].patient_id].push_back(i);
  return groups;
}

}  // namespace detail

/// Slide-level random split. Each patient first keeps one randomly chosen slide
/// in train; the remaining slides are shuffled and dealt to test, val, then train.
inline SplitAssignment monte_carlo_split(const Manifest& entries, const SplitRatios& ratios, std::uint64_t seed) {
  if (!(ratios.train > 0 && ratios.val > 0 && ratios.test > 0))
    fail(ErrorKind::invalid_input, "split ratios must be positive");
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
    fail(ErrorKind::invalid_input, "ratios must sum to 1");

  Rng rng(seed);
  SplitAssignment split;
  split.seed = seed;
  split.kind = SplitKind::monte_carlo;

  std::vector<std::size_t> rest;
  for (auto& [patient, slides] : detail::slides_by_patient(entries)) {
    const std::size_t anchor = rng.below(slides.size());
    split.train.insert(entries[slides[anchor]].slide_id);
    for (std::size_t k = 0; k < slides.size(); ++k)
      if (k != anchor) rest.push_back(slides[k]);
  }
  std::sort(rest.begin(), rest.end());
  rng.shuffle(rest);

  const double n = static_cast<double>(entries.size());
  const auto n_test = std::min(rest.size(), static_cast<std::size_t>(std::llround(ratios.test * n)));
  const auto n_val = std::min(rest.size() - n_test, static_cast<std::size_t>(std::llround(ratios.val * n)));
  for (std::size_t k = 0; k < rest.size(); ++k) {
    const auto& id = entries[rest[k]].slide_id;
    if (k < n_test)
      split.test.insert(id);
    else if (k < n_test + n_val)
      split.val.insert(id);
    else
      split.train.insert(id);
  }
  return split;
}

/// Earliest resection to train/val, every later resection to test.
inline SplitAssignment temporal_split(const Manifest& entries, double val_fraction, std::uint64_t seed) {
  require(val_fraction >= 0.0 && val_fraction < 1.0, ErrorKind::invalid_input, "val_fraction must be in [0, 1)");
  const bool any_later = std::any_of(entries.begin(), entries.end(), [](const auto& e) { return e.resection_ordinal >= 1; });
  if (!any_later) fail(ErrorKind::data, "temporal split impossible: no slide from a later resection");

  Rng rng(seed);
  SplitAssignment split;
  split.seed = seed;
  split.kind = SplitKind::temporal;

  std::vector<std::size_t> pool;
  std::size_t n_first = 0;
  for (auto& [patient, slides] : detail::slides_by_patient(entries)) {
    std::vector<std::size_t> first;
    for (auto i : slides) {
      if (entries[i].resection_ordinal == 0)
        first.push_back(i);
      else
        split.test.insert(entries[i].slide_id);
    }
    if (first.empty()) fail(ErrorKind::data, "patient " + patient + " has no slide from the earliest resection");
    n_first += first.size();
    const std::size_t anchor = rng.below(first.size());
    split.train.insert(entries[first[anchor]].slide_id);
    for (std::size_t k = 0; k < first.size(); ++k)
      if (k != anchor) pool.push_back(first[k]);
  }
  rng.shuffle(pool);
  const auto n_val =
      std::min(pool.size(), static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n_first))));
  for (std::size_t k = 0; k < pool.size(); ++k)
    (k < n_val ? split.val : split.train).insert(entries[pool[k]].slide_id);
  return split;
}

/// Returns an empty string when the split satisfies disjointness, coverage and
/// trainability; otherwise a description of the first violation.
inline std::string check_split(const Manifest& entries, const SplitAssignment& split) {
  std::map<std::string, const SlideManifestEntry*> by_id;
  for (const auto& e : entries) by_id[e.slide_id] = &e;
  std::set<std::string> trained_patients;
  for (const auto& id : split.train) {
    if (!by_id.contains(id)) return "train slide " + id + " not in manifest";
    trained_patients.insert(by_id[id]->patient_id);
  }
  for (const auto* part : {&split.val, &split.test})
    for (const auto& id : *part) {
      if (!by_id.contains(id)) return "slide " + id + " not in manifest";
      if (split.train.contains(id)) return "slide " + id + " assigned twice";
      if (!trained_patients.contains(by_id[id]->patient_id))
        return "patient " + by_id[id]->patient_id + " has no train slide";
    }
  for (const auto& id : split.val)
    if (split.test.contains(id)) return "slide " + id + " in both val and test";
  return {};
}

}  // namespace reid
