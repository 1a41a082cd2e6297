#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reid/core/error.hpp"
#include "reid/core/rng.hpp"
#include "reid/core/stats.hpp"
#include "reid/models.hpp"

namespace reid::eval {

using models::SlideLabels;
using models::SlidePrediction;

struct MetricsReport {
  std::vector<int> ks;
  std::map<int, std::map<int, double>> per_class_recall;  // k -> class -> recall@k
  std::map<int, double> macro_recall;                     // k -> macro recall@k
  std::map<int, double> per_class_precision;
  std::map<int, double> per_class_f1;
  double macro_precision = 0;
  double macro_f1 = 0;
  std::map<int, double> random_baseline;  // k -> k / n_classes
  int n_test_slides = 0;
  int n_classes_evaluated = 0;
  int n_classes = 0;

  double recall(int k) const { return macro_recall.at(k); }

  nlohmann::json to_json() const {
    nlohmann::json j;
    for (int k : ks) {
      j[fmt::format("recall@{}", k)] = macro_recall.at(k);
      j[fmt::format("random@{}", k)] = random_baseline.at(k);
    }
    j["precision"] = macro_precision;
    j["f1"] = macro_f1;
    j["n_test_slides"] = n_test_slides;
    j["n_classes_evaluated"] = n_classes_evaluated;
    j["n_classes"] = n_classes;
    return j;
  }
};

/// True if `truth` is among the first k entries of the ranking.
inline bool in_top_k(const SlidePrediction& p, int truth, int k) {
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(k), p.topk.size());
  return std::find(p.topk.begin(), p.topk.begin() + static_cast<std::ptrdiff_t>(n), truth) !=
         p.topk.begin() + static_cast<std::ptrdiff_t>(n);
}

/// Macro recall@k, precision and F1 over the classes that have test slides.
/// Precision of a class never predicted is 0.
inline MetricsReport compute_metrics(const std::vector<SlidePrediction>& predictions, const SlideLabels& truth,
                                     int n_classes, const std::vector<int>& ks = {1, 5}) {
  require(!predictions.empty(), ErrorKind::invalid_input, "no predictions to evaluate");
  require(n_classes >= 1, ErrorKind::invalid_input, "need at least one class");
  require(!ks.empty(), ErrorKind::invalid_input, "need at least one k");
  for (int k : ks) require(k >= 1, ErrorKind::invalid_input, "k must be positive");

  MetricsReport r;
  r.ks = ks;
  r.n_classes = n_classes;
  r.n_test_slides = static_cast<int>(predictions.size());

  std::map<int, int> support;  // class -> test slides
  std::map<int, int> predicted;
  std::map<int, int> true_positive;
  std::map<int, std::map<int, int>> hits;  // k -> class -> hits
  for (const auto& p : predictions) {
    auto it = truth.find(p.slide_id);
    if (it == truth.end()) fail(ErrorKind::invalid_input, "no truth label for slide " + p.slide_id);
    const int t = it->second;
    require(t >= 0 && t < n_classes, ErrorKind::invalid_input, "truth label out of range for " + p.slide_id);
    ++support[t];
    ++predicted[p.predicted_class];
    if (p.predicted_class == t) ++true_positive[t];
    for (int k : ks)
      if (in_top_k(p, t, k)) ++hits[k][t];
  }
  r.n_classes_evaluated = static_cast<int>(support.size());
  const double m = static_cast<double>(support.size());

  for (int k : ks) {
    double acc = 0;
    for (const auto& [c, n] : support) {
      const double rec = static_cast<double>(hits[k][c]) / n;
      r.per_class_recall[k][c] = rec;
      acc += rec;
    }
    r.macro_recall[k] = acc / m;
    r.random_baseline[k] = std::min(1.0, static_cast<double>(k) / n_classes);
  }

  double p_acc = 0, f_acc = 0;
  for (const auto& [c, n] : support) {
    const int pred = predicted.count(c) ? predicted.at(c) : 0;
    const int tp = true_positive.count(c) ? true_positive.at(c) : 0;
    const double precision = pred > 0 ? static_cast<double>(tp) / pred : 0.0;
    const double recall = static_cast<double>(tp) / n;
    const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
    r.per_class_precision[c] = precision;
    r.per_class_f1[c] = f1;
    p_acc += precision;
    f_acc += f1;
  }
  r.macro_precision = p_acc / m;
  r.macro_f1 = f_acc / m;
  return r;
}

struct RandomBaseline {
  int n_classes = 0;
  int k = 0;
  double analytic = 0;
  double simulated_mean = 0;
  double simulated_std = 0;
  int n_sim = 0;

  double standard_error() const { return simulated_std / std::sqrt(static_cast<double>(n_sim)); }
};

/// Macro recall@k of uniformly random rankings for a given test composition
/// (one truth label per test slide), analytic and simulated.
inline RandomBaseline random_baseline(int n_classes, const std::vector<int>& test_labels, int k, int n_sim, Rng& rng) {
  require(k >= 1 && k <= n_classes, ErrorKind::invalid_input, "random baseline needs 1 <= k <= n_classes");
  require(n_sim >= 1000, ErrorKind::invalid_input, "random baseline needs at least 1000 simulations");
  require(!test_labels.empty(), ErrorKind::invalid_input, "random baseline needs a test composition");
  SlideLabels truth;
  for (std::size_t i = 0; i < test_labels.size(); ++i) truth[fmt::format("s{:06d}", i)] = test_labels[i];

  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(n_sim));
  std::vector<SlidePrediction> preds(test_labels.size());
  for (int s = 0; s < n_sim; ++s) {
    std::size_t i = 0;
    for (const auto& [slide, _] : truth) {
      // Only the top k of a uniform random ranking matter for recall@k.
      auto& p = preds[i++];
      p.slide_id = slide;
      p.topk.clear();
      if (2 * k <= n_classes) {
        while (static_cast<int>(p.topk.size()) < k) {
          const int c = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_classes)));
          if (std::find(p.topk.begin(), p.topk.end(), c) == p.topk.end()) p.topk.push_back(c);
        }
      } else {
        for (auto c : rng.sample_without_replacement(static_cast<std::size_t>(n_classes), static_cast<std::size_t>(k)))
          p.topk.push_back(static_cast<int>(c));
      }
      p.predicted_class = p.topk.front();
    }
    values.push_back(compute_metrics(preds, truth, n_classes, {k}).macro_recall.at(k));
  }
  RandomBaseline b;
  b.n_classes = n_classes;
  b.k = k;
  b.analytic = static_cast<double>(k) / n_classes;
  b.simulated_mean = mean(values);
  b.simulated_std = stddev(values);
  b.n_sim = n_sim;
  return b;
}

/// One test slide per class.
inline std::vector<int> one_slide_per_class(int n_classes) {
  std::vector<int> v(static_cast<std::size_t>(n_classes));
  for (int c = 0; c < n_classes; ++c) v[static_cast<std::size_t>(c)] = c;
  return v;
}

}  // namespace reid::eval
