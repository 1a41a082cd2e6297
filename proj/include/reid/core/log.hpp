#pragma once

#include <memory>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace reid {

/// Process-wide logger. Warnings go to stderr unless a caller swaps the sinks.
inline std::shared_ptr<spdlog::logger> logger() {
  static std::shared_ptr<spdlog::logger> instance = [] {
    auto existing = spdlog::get("reid");
    if (existing) return existing;
    auto made = spdlog::stderr_color_mt("reid");
    made->set_pattern("[%l] %v");
    return made;
  }();
  return instance;
}

}  // namespace reid
