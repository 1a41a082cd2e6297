#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "reid/core/error.hpp"
#include "reid/core/image.hpp"
#include "reid/core/rng.hpp"
#include "reid/dataset.hpp"
#include "reid/stain.hpp"

namespace reid::synthetic {

struct CohortConfig {
  int n_patients = 10;
  int slides_per_patient = 4;
  int resections_per_patient = 1;
  int image_size_px = 1024;
  std::uint64_t seed = 0;
  double native_mpp = 0.44;
  // 0 keeps later resections on the patient's original signature, 1 replaces it.
  double drift = 0.5;
  // Envelope for the per-slide global stain shift.
  double stain_lambda = 0.2;
};

/// Normalized patient morphology parameters, each in [0, 1].
struct MorphologySignature {
  static constexpr std::size_t kSize = 15;
  std::array<double, kSize> u{};
};

/// Physical rendering parameters decoded from a signature.
struct Morphology {
  std::array<double, 3> wavelength_um;
  std::array<double, 3> orientation;
  std::array<double, 3> amplitude;
  double blob_density_per_um2;
  double blob_radius_um;
  double blob_elongation;
  double blob_intensity;
  double h_base;
  double e_base;
  double fiber_mix;
};

inline Morphology decode(const MorphologySignature& s) {
  auto lerp = [](double lo, double hi, double t) { return lo + (hi - lo) * t; };
  Morphology m{};
  for (int k = 0; k < 3; ++k) {
    m.wavelength_um[k] = lerp(6.0, 26.0, s.u[k]);
    m.orientation[k] = lerp(0.0, std::numbers::pi, s.u[3 + k]);
    m.amplitude[k] = lerp(0.05, 0.45, s.u[6 + k]);
  }
  m.blob_density_per_um2 = lerp(0.003, 0.02, s.u[9]);
  m.blob_radius_um = lerp(1.5, 4.0, s.u[10]);
  m.blob_elongation = lerp(1.0, 2.2, s.u[11]);
  m.blob_intensity = lerp(0.5, 1.2, s.u[12]);
  m.h_base = lerp(0.08, 0.35, s.u[13]);
  m.e_base = lerp(0.25, 0.7, s.u[14]);
  m.fiber_mix = s.u[0] * 0.5 + 0.25;
  return m;
}

inline MorphologySignature random_signature(Rng& rng) {
  MorphologySignature s;
  for (auto& v : s.u) v = rng.uniform();
  return s;
}

inline MorphologySignature blend(const MorphologySignature& base, const MorphologySignature& other, double t) {
  MorphologySignature out;
  for (std::size_t i = 0; i < out.u.size(); ++i) out.u[i] = (1.0 - t) * base.u[i] + t * other.u[i];
  return out;
}

/// Irregular ellipse outlining the tissue section on a slide.
struct TissueShape {
  double cx = 0, cy = 0, rx = 0, ry = 0, tilt = 0;
  double wobble_a = 0, wobble_b = 0, phase_a = 0, phase_b = 0;

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(tilt), s = std::sin(tilt);
    const double u = (c * dx + s * dy) / rx;
    const double v = (-s * dx + c * dy) / ry;
    const double theta = std::atan2(v, u);
    const double radius = 1.0 + wobble_a * std::sin(3 * theta + phase_a) + wobble_b * std::sin(5 * theta + phase_b);
    return u * u + v * v <= radius * radius;
  }
};

struct SlideSpec {
  std::string slide_id;
  std::string patient_id;
  int patient = 0;
  int slide = 0;
  int resection_ordinal = 0;
  std::optional<int> days;
};

struct RenderedSlide {
  Image image;
  TissueShape shape;
};

inline std::string patient_id(int p) { return fmt::format("P{:03d}", p); }
inline std::string slide_id(int p, int s) { return fmt::format("P{:03d}_S{:02d}", p, s); }

inline int resection_of(const CohortConfig& cfg, int slide) {
  return slide * cfg.resections_per_patient / cfg.slides_per_patient;
}

inline void validate(const CohortConfig& cfg) {
  require(cfg.n_patients >= 1 && cfg.slides_per_patient >= 1 && cfg.resections_per_patient >= 1,
          ErrorKind::invalid_input, "synthetic cohort counts must be >= 1");
  require(cfg.resections_per_patient <= cfg.slides_per_patient, ErrorKind::invalid_input,
          "resections_per_patient cannot exceed slides_per_patient");
  require(cfg.image_size_px >= 256, ErrorKind::invalid_input, "image_size_px must be >= 256");
  require(cfg.native_mpp > 0, ErrorKind::invalid_input, "native_mpp must be positive");
  require(cfg.drift >= 0 && cfg.drift <= 1, ErrorKind::invalid_input, "drift must be in [0, 1]");
}

/// Signature in effect for one resection of one patient.
inline MorphologySignature resection_signature(const CohortConfig& cfg, int patient, int resection) {
  Rng base_rng(derive_seed(derive_seed(cfg.seed, "patient"), static_cast<std::uint64_t>(patient)));
  const MorphologySignature base = random_signature(base_rng);
  if (resection == 0 || cfg.drift == 0.0) return base;
  Rng drift_rng(derive_seed(derive_seed(derive_seed(cfg.seed, "drift"), static_cast<std::uint64_t>(patient)),
                            static_cast<std::uint64_t>(resection)));
  return blend(base, random_signature(drift_rng), cfg.drift);
}

/// Renders one slide. Pure function of (config, patient, slide).
inline RenderedSlide render_slide(const CohortConfig& cfg, int patient, int slide) {
  const int n = cfg.image_size_px;
  const int resection = resection_of(cfg, slide);
  const Morphology morph = decode(resection_signature(cfg, patient, resection));
  Rng rng(derive_seed(derive_seed(derive_seed(cfg.seed, "slide"), static_cast<std::uint64_t>(patient)),
                      static_cast<std::uint64_t>(slide)));

  RenderedSlide out;
  TissueShape& shape = out.shape;
  shape.cx = n * rng.uniform(0.45, 0.55);
  shape.cy = n * rng.uniform(0.45, 0.55);
  shape.rx = n * rng.uniform(0.36, 0.44);
  shape.ry = n * rng.uniform(0.30, 0.40);
  shape.tilt = rng.uniform(0.0, std::numbers::pi);
  shape.wobble_a = rng.uniform(0.02, 0.07);
  shape.wobble_b = rng.uniform(0.01, 0.04);
  shape.phase_a = rng.uniform(0.0, 2 * std::numbers::pi);
  shape.phase_b = rng.uniform(0.0, 2 * std::numbers::pi);

  const double rotation = rng.uniform(0.0, 2 * std::numbers::pi);
  std::array<double, 3> phase{};
  for (auto& p : phase) p = rng.uniform(0.0, 2 * std::numbers::pi);
  const auto shift = stain::draw_augment_params(cfg.stain_lambda, rng);

  const std::size_t pixels = static_cast<std::size_t>(n) * n;
  std::vector<double> conc_h(pixels, 0.0), conc_e(pixels, 0.0);
  std::vector<std::uint8_t> inside(pixels, 0);

  // Fibrous texture: three gratings with patient-specific spacing and relative orientation.
  std::array<double, 3> kx{}, ky{};
  for (int k = 0; k < 3; ++k) {
    const double f = 2 * std::numbers::pi * cfg.native_mpp / morph.wavelength_um[k];
    kx[k] = f * std::cos(morph.orientation[k] + rotation);
    ky[k] = f * std::sin(morph.orientation[k] + rotation);
  }
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * n + x;
      if (!shape.contains(x + 0.5, y + 0.5)) continue;
      inside[i] = 1;
      double t = 0.0;
      for (int k = 0; k < 3; ++k) t += morph.amplitude[k] * std::cos(kx[k] * x + ky[k] * y + phase[k]);
      conc_e[i] = morph.e_base * (1.0 + t);
      conc_h[i] = morph.h_base * (1.0 + morph.fiber_mix * t);
    }

  // Nuclei: elliptical blobs, re-seeded per slide.
  const double area_um2 = static_cast<double>(pixels) * cfg.native_mpp * cfg.native_mpp;
  const auto n_blobs = static_cast<std::size_t>(morph.blob_density_per_um2 * area_um2);
  const double radius_px = morph.blob_radius_um / cfg.native_mpp;
  for (std::size_t b = 0; b < n_blobs; ++b) {
    const double bx = rng.uniform(0.0, n);
    const double by = rng.uniform(0.0, n);
    const double r = radius_px * std::clamp(1.0 + 0.2 * rng.normal(), 0.5, 1.6);
    const double ang = rng.uniform(0.0, std::numbers::pi);
    const double ra = r * morph.blob_elongation, rb = r;
    const double ca = std::cos(ang), sa = std::sin(ang);
    const int reach = static_cast<int>(std::ceil(ra)) + 1;
    for (int y = std::max(0, static_cast<int>(by) - reach); y <= std::min(n - 1, static_cast<int>(by) + reach); ++y)
      for (int x = std::max(0, static_cast<int>(bx) - reach); x <= std::min(n - 1, static_cast<int>(bx) + reach);
           ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * n + x;
        if (!inside[i]) continue;
        const double dx = x + 0.5 - bx, dy = y + 0.5 - by;
        const double u = (ca * dx + sa * dy) / ra, v = (-sa * dx + ca * dy) / rb;
        const double d2 = u * u + v * v;
        if (d2 >= 1.0) continue;
        const double w = 1.0 - d2 * d2;
        conc_h[i] = std::max(conc_h[i], morph.blob_intensity * w);
        conc_e[i] *= 1.0 - 0.5 * w;
      }
  }

  const stain::StainMatrix m = stain::canonical_he_matrix();
  out.image = Image(n, n, 255);
  for (std::size_t i = 0; i < pixels; ++i) {
    if (!inside[i]) continue;
    // The global stain shift keeps a small floor so tissue never turns white.
    const double h = std::max(0.02, shift.alpha[0] * conc_h[i] + 0.5 * shift.beta[0] + 0.02 * rng.normal());
    const double e = std::max(0.05, shift.alpha[1] * conc_e[i] + 0.5 * shift.beta[1] + 0.02 * rng.normal());
    auto* px = out.image.pixels.data() + i * 3;
    for (int c = 0; c < 3; ++c) {
      const double od = m(0, c) * h + m(1, c) * e;
      px[c] = static_cast<std::uint8_t>(std::clamp(std::lround(255.0 * std::pow(10.0, -od)), 0L, 255L));
    }
  }
  return out;
}

inline std::vector<SlideSpec> cohort_layout(const CohortConfig& cfg) {
  std::vector<SlideSpec> specs;
  for (int p = 0; p < cfg.n_patients; ++p) {
    Rng days_rng(derive_seed(derive_seed(cfg.seed, "days"), static_cast<std::uint64_t>(p)));
    const int gap = 120 + static_cast<int>(days_rng.below(600));
    for (int s = 0; s < cfg.slides_per_patient; ++s) {
      SlideSpec spec;
      spec.patient = p;
      spec.slide = s;
      spec.patient_id = patient_id(p);
      spec.slide_id = slide_id(p, s);
      spec.resection_ordinal = resection_of(cfg, s);
      spec.days = spec.resection_ordinal * gap;
      specs.push_back(spec);
    }
  }
  return specs;
}

/// Renders every slide to `<dir>/slides/<slide_id>.png` and writes `<dir>/manifest.csv`.
inline Manifest generate_synthetic_cohort(const CohortConfig& cfg, const std::filesystem::path& dir) {
  validate(cfg);
  std::error_code ec;
  std::filesystem::create_directories(dir / "slides", ec);
  if (ec) fail(ErrorKind::io, "cannot create output directory " + dir.string() + ": " + ec.message());

  Manifest manifest;
  for (const auto& spec : cohort_layout(cfg)) {
    const auto rendered = render_slide(cfg, spec.patient, spec.slide);
    const auto path = dir / "slides" / (spec.slide_id + ".png");
    write_png(path, rendered.image);
    manifest.push_back({spec.slide_id, spec.patient_id, spec.resection_ordinal, spec.days, path, cfg.native_mpp});
  }
  write_manifest(dir / "manifest.csv", manifest);
  return manifest;
}

}  // namespace reid::synthetic
