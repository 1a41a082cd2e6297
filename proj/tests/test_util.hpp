#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <fmt/format.h>

#include "reid/core/rng.hpp"
#include "reid/dataset.hpp"

namespace reid::testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "reid") {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / fmt::format("{}-{:x}", tag, (std::uint64_t(rd()) << 32) | rd());
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// In-memory manifest: `patients` patients with `slides` slides each; ordinals
/// dealt so each patient covers `resections` resections.
inline Manifest make_manifest(int patients, int slides, int resections = 1) {
  Manifest m;
  for (int p = 0; p < patients; ++p)
    for (int s = 0; s < slides; ++s)
      m.push_back({fmt::format("P{}_S{}", p, s), fmt::format("P{}", p), s * resections / slides, std::nullopt,
                   fmt::format("P{}_S{}.png", p, s), 0.25});
  return m;
}

/// Random manifest with uneven slide counts (2..6 per patient) and 1..3 resections.
inline Manifest random_manifest(Rng& rng) {
  Manifest m;
  const int patients = 2 + static_cast<int>(rng.below(14));
  for (int p = 0; p < patients; ++p) {
    const int slides = 2 + static_cast<int>(rng.below(5));
    const int resections = 1 + static_cast<int>(rng.below(std::min(3, slides)));
    for (int s = 0; s < slides; ++s)
      m.push_back({fmt::format("P{}_S{}", p, s), fmt::format("P{}", p), s * resections / slides, std::nullopt,
                   "x.png", 0.5});
  }
  return m;
}

}  // namespace reid::testing
