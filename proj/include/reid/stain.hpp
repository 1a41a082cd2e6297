#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "reid/core/error.hpp"
#include "reid/core/image.hpp"
#include "reid/core/log.hpp"
#include "reid/core/rng.hpp"
#include "reid/core/stats.hpp"

namespace reid::stain {

using StainMatrix = Eigen::Matrix<double, 2, 3, Eigen::RowMajor>;

/// Per-pixel optical density, channels interleaved like RGBPatch.
struct ODImage {
  int size = 0;
  std::vector<double> values;
};

/// Stain concentrations, stain-major: values[s * pixels + p].
struct ConcentrationMap {
  int size = 0;
  std::vector<double> values;

  std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(size) * size; }
  double& at(int stain, std::size_t p) { return values[static_cast<std::size_t>(stain) * pixel_count() + p]; }
  double at(int stain, std::size_t p) const { return values[static_cast<std::size_t>(stain) * pixel_count() + p]; }
};

struct StainModel {
  StainMatrix stain_matrix;  // row 0 hematoxylin-like, row 1 eosin-like
  std::array<double, 2> reference_max_concentration{1.0, 1.0};
};

struct StainAugmentParams {
  double lambda = 0.2;
  std::array<double, 2> alpha{1.0, 1.0};
  std::array<double, 2> beta{0.0, 0.0};
};

struct MacenkoOptions {
  double od_floor = 0.15;
  double angle_percentile = 1.0;
  double concentration_percentile = 99.0;
  std::size_t min_pixels = 100;
  // Rows closer than this angle are treated as one stain.
  double min_separation_deg = 3.0;
};

inline constexpr double kDefaultEpsilon = 1.0 / 255.0;

/// Ruifrok & Johnston hematoxylin / eosin absorption directions, unit-normalized.
inline StainMatrix canonical_he_matrix() {
  StainMatrix m;
  m << 0.650, 0.704, 0.286, 0.072, 0.990, 0.105;
  m.row(0).normalize();
  m.row(1).normalize();
  return m;
}

inline StainModel canonical_he_model() { return {canonical_he_matrix(), {1.0, 1.0}}; }

inline double angle_deg(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  const double c = std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

inline ODImage rgb_to_od(const RGBPatch& patch, double epsilon = kDefaultEpsilon) {
  require(epsilon > 0.0, ErrorKind::invalid_input, "epsilon must be positive");
  ODImage od{patch.size, std::vector<double>(patch.values.size())};
  for (std::size_t i = 0; i < patch.values.size(); ++i)
    od.values[i] = -std::log10(std::max(static_cast<double>(patch.values[i]), epsilon));
  return od;
}

inline RGBPatch od_to_rgb(const ODImage& od) {
  RGBPatch patch(od.size);
  for (std::size_t i = 0; i < od.values.size(); ++i)
    patch.values[i] = static_cast<float>(std::clamp(std::pow(10.0, -od.values[i]), 0.0, 1.0));
  return patch;
}

namespace detail {

inline Eigen::Matrix2d gram_inverse(const StainMatrix& m) {
  const Eigen::Matrix2d gram = m * m.transpose();
  if (std::abs(gram.determinant()) < 1e-10) fail(ErrorKind::numeric, "singular stain matrix");
  return gram.inverse();
}

// Least-squares concentrations for one OD vector, clipped at zero.
inline Eigen::Vector2d solve_pixel(const Eigen::Matrix<double, 2, 3>& projector, const Eigen::Vector3d& od) {
  return (projector * od).cwiseMax(0.0);
}

}  // namespace detail

inline ConcentrationMap deconvolve(const ODImage& od, const StainModel& model) {
  const Eigen::Matrix<double, 2, 3> projector = detail::gram_inverse(model.stain_matrix) * model.stain_matrix;
  const std::size_t n = od.values.size() / 3;
  ConcentrationMap conc{od.size, std::vector<double>(2 * n)};
  for (std::size_t p = 0; p < n; ++p) {
    const Eigen::Vector3d v(od.values[p * 3], od.values[p * 3 + 1], od.values[p * 3 + 2]);
    const Eigen::Vector2d c = detail::solve_pixel(projector, v);
    conc.at(0, p) = c[0];
    conc.at(1, p) = c[1];
  }
  return conc;
}

inline ConcentrationMap deconvolve(const RGBPatch& patch, const StainModel& model,
                                   double epsilon = kDefaultEpsilon) {
  return deconvolve(rgb_to_od(patch, epsilon), model);
}

inline RGBPatch reconstruct(const ConcentrationMap& conc, const StainModel& model) {
  RGBPatch patch(conc.size);
  const StainMatrix& m = model.stain_matrix;
  for (std::size_t p = 0; p < conc.pixel_count(); ++p) {
    const double s0 = conc.at(0, p);
    const double s1 = conc.at(1, p);
    for (int c = 0; c < 3; ++c) {
      const double od = m(0, c) * s0 + m(1, c) * s1;
      patch.values[p * 3 + c] = static_cast<float>(std::clamp(std::pow(10.0, -od), 0.0, 1.0));
    }
  }
  return patch;
}

/// Macenko estimation: principal plane of tissue OD vectors, angular extremes
/// within that plane as the two stain directions.
inline StainModel estimate_stain_model(const ODImage& od, const MacenkoOptions& opt = {}) {
  const std::size_t n = od.values.size() / 3;
  std::vector<Eigen::Vector3d> tissue;
  tissue.reserve(n);
  for (std::size_t p = 0; p < n; ++p) {
    const Eigen::Vector3d v(od.values[p * 3], od.values[p * 3 + 1], od.values[p * 3 + 2]);
    if (v.norm() > opt.od_floor) tissue.push_back(v);
  }
  if (tissue.size() < opt.min_pixels) fail(ErrorKind::numeric, "insufficient tissue for stain estimation");

  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& v : tissue) centroid += v;
  centroid /= static_cast<double>(tissue.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& v : tissue) cov += (v - centroid) * (v - centroid).transpose();
  cov /= static_cast<double>(tissue.size() - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  // Eigenvalues ascend; columns 2 and 1 span the principal plane.
  Eigen::Vector3d e1 = eig.eigenvectors().col(2);
  Eigen::Vector3d e2 = eig.eigenvectors().col(1);
  if (e1.sum() < 0) e1 = -e1;
  if (e2.sum() < 0) e2 = -e2;

  std::vector<double> angles(tissue.size());
  for (std::size_t i = 0; i < tissue.size(); ++i) angles[i] = std::atan2(tissue[i].dot(e2), tissue[i].dot(e1));
  const double lo = percentile(angles, opt.angle_percentile);
  const double hi = percentile(std::move(angles), 100.0 - opt.angle_percentile);

  auto direction = [&](double phi) {
    Eigen::Vector3d v = e1 * std::cos(phi) + e2 * std::sin(phi);
    if (v.sum() < 0) v = -v;
    v = v.cwiseMax(0.0);
    if (v.norm() == 0.0) fail(ErrorKind::numeric, "stain direction has no positive absorption");
    return Eigen::Vector3d(v.normalized());
  };
  Eigen::Vector3d a = direction(lo);
  Eigen::Vector3d b = direction(hi);
  if (angle_deg(a, b) < opt.min_separation_deg)
    fail(ErrorKind::numeric, "stain vectors are collinear; image looks single-stain");

  const StainMatrix canonical = canonical_he_matrix();
  const Eigen::Vector3d h_ref = canonical.row(0).transpose();
  if (b.dot(h_ref) > a.dot(h_ref)) std::swap(a, b);

  StainModel model;
  model.stain_matrix.row(0) = a.transpose();
  model.stain_matrix.row(1) = b.transpose();

  const Eigen::Matrix<double, 2, 3> projector = detail::gram_inverse(model.stain_matrix) * model.stain_matrix;
  std::vector<double> c0, c1;
  c0.reserve(tissue.size());
  c1.reserve(tissue.size());
  for (const auto& v : tissue) {
    const Eigen::Vector2d s = detail::solve_pixel(projector, v);
    c0.push_back(s[0]);
    c1.push_back(s[1]);
  }
  model.reference_max_concentration = {std::max(percentile(std::move(c0), opt.concentration_percentile), 1e-6),
                                       std::max(percentile(std::move(c1), opt.concentration_percentile), 1e-6)};
  return model;
}

inline StainModel estimate_stain_model(const RGBPatch& patch, const MacenkoOptions& opt = {},
                                       double epsilon = kDefaultEpsilon) {
  return estimate_stain_model(rgb_to_od(patch, epsilon), opt);
}

/// Draws alpha in [1 - lambda, 1 + lambda] and beta in [-lambda, lambda], per stain.
inline StainAugmentParams draw_augment_params(double lambda, Rng& rng) {
  require(lambda >= 0.0, ErrorKind::invalid_input, "lambda must be non-negative");
  StainAugmentParams p;
  p.lambda = lambda;
  for (auto& a : p.alpha) a = 1.0 - lambda + 2.0 * lambda * rng.uniform();
  for (auto& b : p.beta) b = -lambda + 2.0 * lambda * rng.uniform();
  return p;
}

/// S' = alpha * S + beta, clipped at zero, then reconstructed with the same matrix.
inline RGBPatch apply_stain_augmentation(const ODImage& od, const StainModel& model,
                                         const StainAugmentParams& params) {
  ConcentrationMap conc = deconvolve(od, model);
  for (int s = 0; s < 2; ++s)
    for (std::size_t p = 0; p < conc.pixel_count(); ++p)
      conc.at(s, p) = std::max(0.0, params.alpha[s] * conc.at(s, p) + params.beta[s]);
  return reconstruct(conc, model);
}

inline RGBPatch apply_stain_augmentation(const RGBPatch& patch, const StainModel& model,
                                         const StainAugmentParams& params, double epsilon = kDefaultEpsilon) {
  return apply_stain_augmentation(rgb_to_od(patch, epsilon), model, params);
}

/// Stain augmentation with the model estimated on the patch itself, or on
/// `slide_model` when given. Estimation failure returns the patch unchanged.
inline RGBPatch augment_stain(const RGBPatch& patch, double lambda, Rng& rng, const MacenkoOptions& opt = {},
                              const StainModel* slide_model = nullptr, double epsilon = kDefaultEpsilon) {
  const StainAugmentParams params = draw_augment_params(lambda, rng);
  const ODImage od = rgb_to_od(patch, epsilon);
  StainModel model;
  if (slide_model) {
    model = *slide_model;
  } else {
    try {
      model = estimate_stain_model(od, opt);
    } catch (const Error& e) {
      logger()->warn("stain augmentation skipped: {}", e.what());
      return patch;
    }
  }
  return apply_stain_augmentation(od, model, params);
}

inline RGBPatch flip(const RGBPatch& patch, bool horizontal, bool vertical) {
  RGBPatch out(patch.size);
  const int n = patch.size;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const float* src = patch.pixel(horizontal ? n - 1 - x : x, vertical ? n - 1 - y : y);
      std::copy_n(src, 3, out.pixel(x, y));
    }
  return out;
}

/// Horizontal and vertical flips, each with probability 0.5.
inline RGBPatch random_flip(const RGBPatch& patch, Rng& rng) {
  const bool h = rng.bernoulli(0.5);
  const bool v = rng.bernoulli(0.5);
  return flip(patch, h, v);
}

}  // namespace reid::stain
