#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "reid/core/error.hpp"
#include "reid/core/rng.hpp"
#include "reid/core/stats.hpp"
#include "reid/experiments.hpp"
#include "reid/models.hpp"

namespace reid::latent {

namespace fs = std::filesystem;

struct LatentAnchor {
  int patient_class = -1;
  Eigen::VectorXd anchor;
  int n_contributing = 0;  // slide embeddings averaged
};

using AnchorMap = std::map<int, LatentAnchor>;

struct DistanceRecord {
  std::string slide_id;
  int true_class = -1;
  int predicted_class = -1;
  double distance_to_own_anchor = 0;
  bool correct = false;
};

/// Mean embedding over a seeded sample of at most `patches_per_slide` patches.
inline std::optional<Eigen::VectorXd> slide_embedding(const nn::ResidualEncoder& encoder,
                                                      const std::vector<RGBPatch>& patches, int patches_per_slide,
                                                      std::uint64_t seed, const std::string& slide_id) {
  if (patches.empty()) return std::nullopt;
  Rng rng(derive_seed(seed, slide_id));
  auto idx = rng.sample_without_replacement(patches.size(), static_cast<std::size_t>(patches_per_slide));
  std::sort(idx.begin(), idx.end());
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(encoder.embedding_dim());
  for (auto i : idx) sum += encoder.forward(patches[i]).cast<double>();
  return Eigen::VectorXd(sum / static_cast<double>(idx.size()));
}

/// Anchors from slide embeddings grouped by class: mean over each class's slides.
inline AnchorMap anchors_from_slide_embeddings(const std::vector<std::pair<int, Eigen::VectorXd>>& slides) {
  AnchorMap out;
  for (const auto& [cls, e] : slides) {
    auto& a = out[cls];
    if (a.n_contributing == 0) {
      a.patient_class = cls;
      a.anchor = e;
    } else {
      a.anchor += e;
    }
    ++a.n_contributing;
  }
  for (auto& [_, a] : out) a.anchor /= static_cast<double>(a.n_contributing);
  return out;
}

/// Patches -> slide embedding -> patient anchor, for every class with training slides.
inline AnchorMap compute_anchors(const nn::ResidualEncoder& encoder, const models::PatchSource& source,
                                 const std::set<std::string>& train_slides, const models::SlideLabels& labels,
                                 int patches_per_slide = 64, std::uint64_t seed = 0) {
  require(patches_per_slide >= 1, ErrorKind::invalid_input, "patches_per_slide must be positive");
  std::vector<std::pair<int, Eigen::VectorXd>> slides;
  std::set<int> classes;
  for (const auto& s : train_slides) {
    const int cls = labels.at(s);
    classes.insert(cls);
    if (auto e = slide_embedding(encoder, source.patches(s), patches_per_slide, seed, s))
      slides.emplace_back(cls, std::move(*e));
  }
  AnchorMap anchors = anchors_from_slide_embeddings(slides);
  for (int c : classes)
    if (!anchors.contains(c)) fail(ErrorKind::data, fmt::format("class {} has no encodable training patches", c));
  return anchors;
}

inline DistanceRecord make_record(const std::string& slide_id, int true_class, int predicted_class,
                                  const Eigen::VectorXd& embedding, const AnchorMap& anchors) {
  auto it = anchors.find(true_class);
  if (it == anchors.end()) fail(ErrorKind::data, fmt::format("no latent anchor for class {} (slide {})", true_class, slide_id));
  require(it->second.anchor.size() == embedding.size(), ErrorKind::invalid_input, "embedding dimension mismatch");
  // Sequential sum, so the value does not depend on vectorization.
  double sq = 0;
  for (Eigen::Index i = 0; i < embedding.size(); ++i) {
    const double d = embedding(i) - it->second.anchor(i);
    sq += d * d;
  }
  return {slide_id, true_class, predicted_class, std::sqrt(sq), true_class == predicted_class};
}

/// One record per predicted test slide: L2 distance of its embedding to its own anchor.
inline std::vector<DistanceRecord> anchor_distances(const nn::ResidualEncoder& encoder,
                                                    const models::PatchSource& source,
                                                    const std::vector<models::SlidePrediction>& predictions,
                                                    const models::SlideLabels& labels, const AnchorMap& anchors,
                                                    int patches_per_slide = 64, std::uint64_t seed = 0) {
  std::vector<DistanceRecord> out;
  for (const auto& p : predictions) {
    const auto e = slide_embedding(encoder, source.patches(p.slide_id), patches_per_slide, seed, p.slide_id);
    if (!e) {
      logger()->warn("slide {} has no patches; skipped in distance analysis", p.slide_id);
      continue;
    }
    out.push_back(make_record(p.slide_id, labels.at(p.slide_id), p.predicted_class, *e, anchors));
  }
  return out;
}

/// Pooled over the folds of an experiment run with kept models: each fold's
/// test slides are measured against anchors from its own training slides,
/// using the MIL model's encoder when the fold has one.
inline std::vector<DistanceRecord> experiment_distances(const eval::ExperimentResult& result,
                                                        const models::PatchSource& source, int patches_per_slide = 64,
                                                        std::uint64_t seed = 0) {
  std::vector<DistanceRecord> out;
  for (const auto& f : result.folds) {
    if (!f.mil_model && !f.patch_model) fail(ErrorKind::invalid_input, fmt::format("fold {} kept no model", f.fold));
    const auto& enc = f.mil_model ? f.mil_model->encoder : f.patch_model->encoder;
    const auto anchors = compute_anchors(enc, source, f.split.train, result.truth, patches_per_slide, seed);
    auto rec = anchor_distances(enc, source, f.predictions, result.truth, anchors, patches_per_slide, seed);
    for (auto& r : rec) r.slide_id = fmt::format("fold{:02d}/{}", f.fold, r.slide_id);
    out.insert(out.end(), rec.begin(), rec.end());
  }
  return out;
}

struct GroupSummary {
  std::size_t n = 0;
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
  std::vector<double> values;  // sorted
};

struct DistanceSummary {
  std::optional<GroupSummary> correct;
  std::optional<GroupSummary> incorrect;
  std::vector<std::string> notes;
};

inline GroupSummary summarize(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  GroupSummary g;
  g.n = values.size();
  g.min = values.front();
  g.max = values.back();
  g.q1 = percentile_sorted(values, 25);
  g.median = percentile_sorted(values, 50);
  g.q3 = percentile_sorted(values, 75);
  g.values = std::move(values);
  return g;
}

/// Quartiles per correctness group; an empty group is omitted with a note.
inline DistanceSummary distance_report(const std::vector<DistanceRecord>& records) {
  require(!records.empty(), ErrorKind::invalid_input, "no distance records to summarize");
  std::vector<double> ok, bad;
  for (const auto& r : records) (r.correct ? ok : bad).push_back(r.distance_to_own_anchor);
  DistanceSummary s;
  if (ok.empty())
    s.notes.emplace_back("no correctly classified slides; group omitted");
  else
    s.correct = summarize(std::move(ok));
  if (bad.empty())
    s.notes.emplace_back("no misclassified slides; group omitted");
  else
    s.incorrect = summarize(std::move(bad));
  return s;
}

inline void write_records_csv(const fs::path& path, const std::vector<DistanceRecord>& records) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << "slide_id,true_class,predicted_class,distance,correct\n";
  for (const auto& r : records)
    out << fmt::format("{},{},{},{:.6f},{}\n", r.slide_id, r.true_class, r.predicted_class, r.distance_to_own_anchor,
                       r.correct ? 1 : 0);
}

inline std::string format_summary(const DistanceSummary& s) {
  std::string out = fmt::format("{:<10} {:>4} {:>9} {:>9} {:>9} {:>9} {:>9}\n", "group", "n", "min", "q1", "median",
                                "q3", "max");
  auto row = [&](const char* name, const std::optional<GroupSummary>& g) {
    if (g)
      out += fmt::format("{:<10} {:>4} {:>9.4f} {:>9.4f} {:>9.4f} {:>9.4f} {:>9.4f}\n", name, g->n, g->min, g->q1,
                         g->median, g->q3, g->max);
  };
  row("correct", s.correct);
  row("incorrect", s.incorrect);
  for (const auto& n : s.notes) out += "note: " + n + "\n";
  return out;
}

}  // namespace reid::latent
