#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "reid/core/error.hpp"
#include "reid/core/image.hpp"
#include "reid/core/log.hpp"

namespace reid::tiling {

using Histogram = std::array<std::uint64_t, 256>;

struct TissueMask {
  int width = 0;   // grid columns = ceil(slide width / downscale)
  int height = 0;  // grid rows
  int downscale_factor = 1;
  int threshold_used = 0;
  std::vector<std::uint8_t> cells;  // 1 = tissue

  std::uint8_t at(int x, int y) const { return cells[static_cast<std::size_t>(y) * width + x]; }
  std::size_t tissue_count() const {
    std::size_t n = 0;
    for (auto c : cells) n += c;
    return n;
  }
};

struct PatchSpec {
  std::string slide_id;
  int x = 0;  // top-left, target-mpp pixel grid
  int y = 0;
  int size_px = 512;
  double target_mpp = 0.88;
  double tissue_coverage = 0.0;

  friend bool operator==(const PatchSpec&, const PatchSpec&) = default;
};

struct SlideGeometry {
  std::string slide_id;
  int width = 0;  // native pixels
  int height = 0;
  double native_mpp = 0.0;
};

/// Otsu's threshold over an 8-bit histogram: maximizes between-class variance
/// of the split {<= t} vs {> t}; the smallest maximizer wins ties.
inline int otsu_threshold(std::span<const std::uint64_t, 256> histogram) {
  long double total = 0, total_sum = 0;
  for (int i = 0; i < 256; ++i) {
    total += static_cast<long double>(histogram[i]);
    total_sum += static_cast<long double>(i) * static_cast<long double>(histogram[i]);
  }
  if (total == 0) fail(ErrorKind::invalid_input, "otsu threshold of an all-zero histogram");

  int best_t = -1;
  long double best = -1;
  long double below = 0, below_sum = 0;
  for (int t = 0; t < 256; ++t) {
    below += static_cast<long double>(histogram[t]);
    below_sum += static_cast<long double>(t) * static_cast<long double>(histogram[t]);
    const long double above = total - below;
    long double bcv = 0;
    if (below > 0 && above > 0) {
      // N^2 * w0 * w1 * (mu0 - mu1)^2, scaled by the constant 1/N^2.
      const long double diff = total * below_sum - below * total_sum;
      bcv = diff * diff / (below * above);
    }
    if (bcv > best) {
      best = bcv;
      best_t = t;
    }
  }
  // A single occupied bin gives zero variance everywhere; return that bin.
  if (best == 0) {
    for (int t = 0; t < 256; ++t)
      if (histogram[t] > 0) return t;
  }
  return best_t;
}

inline int otsu_threshold(const Histogram& histogram) {
  return otsu_threshold(std::span<const std::uint64_t, 256>(histogram));
}

inline std::uint8_t luminance(double r, double g, double b) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(0.299 * r + 0.587 * g + 0.114 * b), 0L, 255L));
}

/// Grayscale image downscaled by block averaging; edge blocks average what they cover.
inline std::vector<std::uint8_t> downscaled_gray(const Image& img, int factor, int& out_w, int& out_h) {
  out_w = (img.width + factor - 1) / factor;
  out_h = (img.height + factor - 1) / factor;
  std::vector<std::uint8_t> gray(static_cast<std::size_t>(out_w) * out_h);
  for (int gy = 0; gy < out_h; ++gy)
    for (int gx = 0; gx < out_w; ++gx) {
      double r = 0, g = 0, b = 0;
      int n = 0;
      for (int y = gy * factor; y < std::min(img.height, (gy + 1) * factor); ++y)
        for (int x = gx * factor; x < std::min(img.width, (gx + 1) * factor); ++x) {
          const auto* px = img.at(x, y);
          r += px[0];
          g += px[1];
          b += px[2];
          ++n;
        }
      gray[static_cast<std::size_t>(gy) * out_w + gx] = luminance(r / n, g / n, b / n);
    }
  return gray;
}

/// Otsu on the luminance of a downscaled slide; tissue is the dark side.
inline TissueMask build_tissue_mask(const Image& img, int downscale_factor = 32) {
  require(downscale_factor >= 1, ErrorKind::invalid_input, "downscale factor must be >= 1");
  if (img.empty()) fail(ErrorKind::invalid_input, "cannot mask an empty image");
  TissueMask mask;
  mask.downscale_factor = downscale_factor;
  const auto gray = downscaled_gray(img, downscale_factor, mask.width, mask.height);
  Histogram hist{};
  for (auto v : gray) ++hist[v];
  mask.threshold_used = otsu_threshold(hist);
  const auto occupied = std::count_if(hist.begin(), hist.end(), [](auto c) { return c > 0; });
  mask.cells.assign(gray.size(), 0);
  if (occupied > 1)
    for (std::size_t i = 0; i < gray.size(); ++i) mask.cells[i] = gray[i] <= mask.threshold_used ? 1 : 0;
  return mask;
}

/// Area-weighted tissue fraction of a native-pixel rectangle.
inline double tissue_coverage(const TissueMask& mask, double x0, double y0, double x1, double y1) {
  const double d = mask.downscale_factor;
  const int cx0 = static_cast<int>(std::floor(x0 / d));
  const int cy0 = static_cast<int>(std::floor(y0 / d));
  const int cx1 = std::min(mask.width - 1, static_cast<int>(std::ceil(x1 / d)) - 1);
  const int cy1 = std::min(mask.height - 1, static_cast<int>(std::ceil(y1 / d)) - 1);
  double tissue = 0.0;
  for (int cy = std::max(cy0, 0); cy <= cy1; ++cy) {
    const double oy = std::min(y1, (cy + 1) * d) - std::max(y0, cy * d);
    if (oy <= 0) continue;
    for (int cx = std::max(cx0, 0); cx <= cx1; ++cx) {
      if (!mask.at(cx, cy)) continue;
      const double ox = std::min(x1, (cx + 1) * d) - std::max(x0, cx * d);
      if (ox > 0) tissue += ox * oy;
    }
  }
  const double area = (x1 - x0) * (y1 - y0);
  return area > 0 ? std::clamp(tissue / area, 0.0, 1.0) : 0.0;
}

/// Regular grid at the target resolution, keeping patches with coverage >= min_coverage.
/// stride_px <= 0 selects non-overlapping tiles.
inline std::vector<PatchSpec> enumerate_patches(const SlideGeometry& slide, const TissueMask& mask, int size_px,
                                                double target_mpp, int stride_px, double min_coverage) {
  require(min_coverage >= 0.0 && min_coverage <= 1.0, ErrorKind::invalid_input, "min_coverage must be in [0, 1]");
  require(size_px >= 1, ErrorKind::invalid_input, "patch size must be positive");
  require(slide.native_mpp > 0 && target_mpp > 0, ErrorKind::invalid_input, "mpp must be positive");
  if (stride_px <= 0) stride_px = size_px;
  const double scale = target_mpp / slide.native_mpp;
  const int target_w = static_cast<int>(std::floor(slide.width / scale + 1e-9));
  const int target_h = static_cast<int>(std::floor(slide.height / scale + 1e-9));
  std::vector<PatchSpec> out;
  if (size_px > target_w || size_px > target_h) {
    logger()->warn("patch size {} exceeds slide {} at {} mpp ({}x{}); no patches", size_px, slide.slide_id,
                   target_mpp, target_w, target_h);
    return out;
  }
  for (int y = 0; y + size_px <= target_h; y += stride_px)
    for (int x = 0; x + size_px <= target_w; x += stride_px) {
      const double cov = tissue_coverage(mask, x * scale, y * scale, (x + size_px) * scale, (y + size_px) * scale);
      if (cov >= min_coverage) out.push_back({slide.slide_id, x, y, size_px, target_mpp, cov});
    }
  return out;
}

namespace detail {

struct Tap {
  int index;
  double weight;
};

// Box-filter taps for one output sample spanning [start, start + scale) native pixels.
inline std::vector<std::vector<Tap>> box_taps(double origin, double scale, int count) {
  std::vector<std::vector<Tap>> taps(static_cast<std::size_t>(count));
  for (int j = 0; j < count; ++j) {
    const double a = origin + j * scale;
    const double b = a + scale;
    for (int k = static_cast<int>(std::floor(a)); k < static_cast<int>(std::ceil(b)); ++k) {
      const double w = std::min(b, k + 1.0) - std::max(a, static_cast<double>(k));
      if (w > 1e-12) taps[j].push_back({k, w});
    }
  }
  return taps;
}

}  // namespace detail

/// Reads a patch at target_mpp by area-averaging native pixels.
inline RGBPatch read_patch(const Image& slide, double native_mpp, const PatchSpec& spec) {
  require(native_mpp > 0, ErrorKind::invalid_input, "native mpp must be positive");
  const double scale = spec.target_mpp / native_mpp;
  if (scale < 1.0 - 1e-12) fail(ErrorKind::invalid_input, "upsampling not supported");
  const double x0 = spec.x * scale;
  const double y0 = spec.y * scale;
  if (spec.x < 0 || spec.y < 0 || x0 + spec.size_px * scale > slide.width + 1e-6 ||
      y0 + spec.size_px * scale > slide.height + 1e-6)
    fail(ErrorKind::invalid_input, "patch outside slide bounds for " + spec.slide_id);

  const auto xt = detail::box_taps(x0, scale, spec.size_px);
  const auto yt = detail::box_taps(y0, scale, spec.size_px);
  const double norm = 1.0 / (scale * scale * 255.0);
  RGBPatch patch(spec.size_px);
  for (int j = 0; j < spec.size_px; ++j)
    for (int i = 0; i < spec.size_px; ++i) {
      double acc[3] = {0, 0, 0};
      for (const auto& ty : yt[j]) {
        if (ty.index >= slide.height) continue;
        for (const auto& tx : xt[i]) {
          if (tx.index >= slide.width) continue;
          const auto* px = slide.at(tx.index, ty.index);
          const double w = ty.weight * tx.weight;
          acc[0] += w * px[0];
          acc[1] += w * px[1];
          acc[2] += w * px[2];
        }
      }
      float* out = patch.pixel(i, j);
      for (int c = 0; c < 3; ++c) out[c] = static_cast<float>(std::clamp(acc[c] * norm, 0.0, 1.0));
    }
  return patch;
}

inline void write_patch_list(const std::filesystem::path& path, const std::vector<PatchSpec>& specs) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write patch list " + path.string());
  out << "slide_id,x,y,size_px,target_mpp,coverage\n";
  for (const auto& s : specs) {
    std::ostringstream row;
    row.precision(10);
    row << s.slide_id << ',' << s.x << ',' << s.y << ',' << s.size_px << ',' << s.target_mpp << ','
        << s.tissue_coverage;
    out << row.str() << '\n';
  }
}

inline void write_mask_png(const std::filesystem::path& path, const TissueMask& mask) {
  std::vector<std::uint8_t> gray(mask.cells.size());
  for (std::size_t i = 0; i < gray.size(); ++i) gray[i] = mask.cells[i] ? 255 : 0;
  write_png_gray(path, gray, mask.width, mask.height);
}

}  // namespace reid::tiling
