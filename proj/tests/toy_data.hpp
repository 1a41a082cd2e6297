#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "reid/core/image.hpp"
#include "reid/core/rng.hpp"
#include "reid/dataset.hpp"
#include "reid/models.hpp"

namespace reid::testing {

/// H&E-like toy patch. Class 0: horizontal stripes. Class 1: round blobs.
inline RGBPatch toy_patch(int cls, int size, Rng& rng) {
  RGBPatch p(size);
  const double phase = rng.uniform(0, 2 * std::numbers::pi);
  std::vector<std::pair<double, double>> blobs;
  for (int i = 0; i < 4; ++i) blobs.emplace_back(rng.uniform(0, size), rng.uniform(0, size));
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double h = 0.15;
      if (cls == 0) {
        h += 0.5 * (0.5 + 0.5 * std::sin(2 * std::numbers::pi * y / 4.0 + phase));
      } else {
        for (const auto& [bx, by] : blobs)
          if ((x - bx) * (x - bx) + (y - by) * (y - by) < 6.0) h += 0.6;
      }
      const double e = 0.3 + 0.05 * rng.normal();
      // Mix two stain colors in optical density.
      const double od[3] = {0.65 * h + 0.07 * e, 0.70 * h + 0.99 * e, 0.29 * h + 0.11 * e};
      for (int c = 0; c < 3; ++c) p.pixel(x, y)[c] = static_cast<float>(std::pow(10.0, -od[c]));
    }
  return p;
}

struct ToyCohort {
  models::PatchSource source;
  SplitAssignment split;
  models::SlideLabels labels;
  int n_classes = 2;
};

/// Two classes; per class `train` training, `val` validation and `test` test slides.
inline ToyCohort toy_cohort(int size = 16, int patches = 12, int train = 4, int val = 2, int test = 2,
                            std::uint64_t seed = 1) {
  ToyCohort t;
  Rng rng(seed);
  for (int c = 0; c < 2; ++c) {
    int idx = 0;
    auto add = [&](std::set<std::string>& set, int n) {
      for (int i = 0; i < n; ++i) {
        const std::string id = fmt::format("C{}_S{:02d}", c, idx++);
        std::vector<RGBPatch> ps;
        for (int k = 0; k < patches; ++k) ps.push_back(toy_patch(c, size, rng));
        t.source.add(id, std::move(ps));
        t.labels[id] = c;
        set.insert(id);
      }
    };
    add(t.split.train, train);
    add(t.split.val, val);
    add(t.split.test, test);
  }
  return t;
}

inline models::EncoderConfig toy_encoder() {
  models::EncoderConfig e;
  e.embedding_dim = 8;
  e.width = 4;
  e.blocks = 3;
  return e;
}

inline models::TrainingConfig toy_training() {
  models::TrainingConfig t;
  t.learning_rate = 3e-3;
  t.max_epochs = 10;
  t.patience = 10;
  t.batch_size = 8;
  t.patches_per_slide = 8;
  t.val_patches_per_slide = 12;
  t.bag_size = 6;
  t.bags_per_slide = 2;
  t.bags_per_step = 2;
  t.attention_hidden = 6;
  t.seed = 11;
  return t;
}

}  // namespace reid::testing
