#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "reid/core/error.hpp"

namespace reid {

/// 8-bit RGB raster, row-major, channels interleaved.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 255)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}

  bool empty() const noexcept { return width <= 0 || height <= 0; }

  std::uint8_t* at(int x, int y) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* at(int x, int y) const {
    return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
};

/// Square RGB patch with values normalized to [0, 1], channels interleaved.
struct RGBPatch {
  int size = 0;
  std::vector<float> values;

  RGBPatch() = default;
  explicit RGBPatch(int edge, float fill = 1.0f)
      : size(edge), values(static_cast<std::size_t>(edge) * edge * 3, fill) {}

  std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(size) * size; }
  float* pixel(int x, int y) { return values.data() + (static_cast<std::size_t>(y) * size + x) * 3; }
  const float* pixel(int x, int y) const {
    return values.data() + (static_cast<std::size_t>(y) * size + x) * 3;
  }

  friend bool operator==(const RGBPatch&, const RGBPatch&) = default;
};

inline std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0f), 0L, 255L));
}

inline Image to_image(const RGBPatch& patch) {
  Image img(patch.size, patch.size);
  std::transform(patch.values.begin(), patch.values.end(), img.pixels.begin(), quantize);
  return img;
}

inline RGBPatch to_patch(const Image& img) {
  require(img.width == img.height, ErrorKind::invalid_input, "patch images must be square");
  RGBPatch patch(img.width);
  std::transform(img.pixels.begin(), img.pixels.end(), patch.values.begin(),
                 [](std::uint8_t v) { return static_cast<float>(v / 255.0); });
  return patch;
}

/// PNG output. Compression settings are fixed so equal images give equal bytes.
inline void write_png(const std::filesystem::path& path, const Image& img) {
  cv::Mat rgb(img.height, img.width, CV_8UC3, const_cast<std::uint8_t*>(img.pixels.data()));
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr, {cv::IMWRITE_PNG_COMPRESSION, 6}))
    fail(ErrorKind::io, "cannot write image " + path.string());
}

inline void write_png_gray(const std::filesystem::path& path, const std::vector<std::uint8_t>& gray, int width,
                           int height) {
  cv::Mat m(height, width, CV_8UC1, const_cast<std::uint8_t*>(gray.data()));
  if (!cv::imwrite(path.string(), m, {cv::IMWRITE_PNG_COMPRESSION, 6, cv::IMWRITE_PNG_BILEVEL, 1}))
    fail(ErrorKind::io, "cannot write image " + path.string());
}

inline Image read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorKind::io, "missing image file " + path.string());
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) fail(ErrorKind::io, "cannot decode image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  Image img(rgb.cols, rgb.rows);
  for (int y = 0; y < rgb.rows; ++y)
    std::copy_n(rgb.ptr<std::uint8_t>(y), static_cast<std::size_t>(rgb.cols) * 3, img.at(0, y));
  return img;
}

}  // namespace reid
