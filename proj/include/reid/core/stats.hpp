#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "reid/core/error.hpp"

namespace reid {

/// Percentile with linear interpolation between closest ranks (p in [0, 100]).
inline double percentile_sorted(std::span<const double> sorted, double p) {
  require(!sorted.empty(), ErrorKind::invalid_input, "percentile of empty sample");
  const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

/// Same result as percentile_sorted on the sorted sample, without a full sort.
inline double percentile(std::vector<double> values, double p) {
  require(!values.empty(), ErrorKind::invalid_input, "percentile of empty sample");
  const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto lo_it = values.begin() + static_cast<std::ptrdiff_t>(lo);
  std::nth_element(values.begin(), lo_it, values.end());
  const double a = *lo_it;
  if (lo + 1 >= values.size()) return a;
  const double b = *std::min_element(lo_it + 1, values.end());
  return a + (b - a) * (pos - static_cast<double>(lo));
}

inline double mean(std::span<const double> values) {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
inline double stddev(std::span<const double> values) {
  if (values.size() < 2) return 0.0;
  const double m = mean(values);
  double acc = 0.0;
  for (double v : values) acc += (v - m) * (v - m);
  return std::sqrt(acc / static_cast<double>(values.size() - 1));
}

}  // namespace reid
