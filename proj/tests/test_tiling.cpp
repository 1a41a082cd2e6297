#include <gtest/gtest.h>

#include "reid/core/rng.hpp"
#include "reid/synthetic.hpp"
#include "reid/tiling.hpp"
#include "oracles.hpp"

using namespace reid;
using namespace reid::tiling;

namespace {

using oracle::random_histogram;

Image image_with_rect(int w, int h, int x0, int y0, int x1, int y1, std::uint8_t dark = 90) {
  Image img(w, h, 255);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) std::fill_n(img.at(x, y), 3, dark);
  return img;
}

TissueMask mask_from(int w, int h, int d, const std::vector<std::uint8_t>& cells) {
  TissueMask m;
  m.width = w;
  m.height = h;
  m.downscale_factor = d;
  m.cells = cells;
  return m;
}

}  // namespace

TEST(Otsu, TwoSpikesTieBreaksToSmallest) {
  Histogram h{};
  h[50] = 1000;
  h[200] = 3000;
  EXPECT_EQ(otsu_threshold(h), 50);
  EXPECT_EQ(oracle::otsu(h), 50);
}

TEST(Otsu, SingleBinReturnsThatBin) {
  Histogram h{};
  h[137] = 42;
  EXPECT_EQ(otsu_threshold(h), 137);
}

TEST(Otsu, AllZeroIsAnError) { EXPECT_THROW(otsu_threshold(Histogram{}), Error); }

TEST(Otsu, MatchesBruteForceOnRandomHistograms) {
  Rng rng(11);
  for (int i = 0; i < 100; ++i) {
    const auto h = random_histogram(rng);
    ASSERT_EQ(otsu_threshold(h), oracle::otsu(h)) << "histogram " << i;
  }
}

TEST(TissueMask, WhiteImageIsEmpty) {
  const auto mask = build_tissue_mask(Image(300, 200, 255), 32);
  EXPECT_EQ(mask.width, 10);
  EXPECT_EQ(mask.height, 7);
  EXPECT_EQ(mask.tissue_count(), 0u);
  EXPECT_EQ(mask.threshold_used, 255);
}

TEST(TissueMask, DarkBlobIsMarked) {
  const auto mask = build_tissue_mask(image_with_rect(64, 64, 16, 16, 48, 48), 4);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      const bool inside = x >= 4 && x < 12 && y >= 4 && y < 12;
      EXPECT_EQ(mask.at(x, y), inside ? 1 : 0) << x << "," << y;
    }
}

TEST(TissueMask, EmptyImageAndBadFactor) {
  EXPECT_THROW(build_tissue_mask(Image(), 4), Error);
  EXPECT_THROW(build_tissue_mask(Image(8, 8), 0), Error);
}

TEST(TissueMask, SyntheticSlideMatchesRecordedGeometry) {
  synthetic::CohortConfig cfg;
  cfg.image_size_px = 512;
  cfg.seed = 5;
  for (int slide = 0; slide < 3; ++slide) {
    const auto rendered = synthetic::render_slide(cfg, 1, slide);
    const int d = 8;
    const auto mask = build_tissue_mask(rendered.image, d);
    std::size_t inter = 0, uni = 0;
    for (int y = 0; y < mask.height; ++y)
      for (int x = 0; x < mask.width; ++x) {
        const bool truth = rendered.shape.contains((x + 0.5) * d, (y + 0.5) * d);
        const bool pred = mask.at(x, y);
        inter += truth && pred;
        uni += truth || pred;
      }
    EXPECT_GE(static_cast<double>(inter) / uni, 0.9) << "slide " << slide;
  }
}

TEST(EnumeratePatches, CoverageAndInclusiveBoundary) {
  // 10x10 patch at downscale 1 over a mask whose left 7 columns are tissue.
  std::vector<std::uint8_t> cells(20 * 10, 0);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 7; ++x) cells[y * 20 + x] = 1;
  for (int y = 0; y < 10; ++y)
    for (int x = 10; x < 15; ++x) cells[y * 20 + x] = 1;
  const auto mask = mask_from(20, 10, 1, cells);
  const SlideGeometry slide{"s", 20, 10, 0.5};
  const auto all = enumerate_patches(slide, mask, 10, 0.5, 10, 0.0);
  ASSERT_EQ(all.size(), 2u);
  EXPECT_DOUBLE_EQ(all[0].tissue_coverage, 0.7);
  EXPECT_DOUBLE_EQ(all[1].tissue_coverage, 0.5);
  const auto kept = enumerate_patches(slide, mask, 10, 0.5, 10, 0.7);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].x, 0);
}

TEST(EnumeratePatches, FullyInsideMaskHasCoverageOne) {
  const auto mask = mask_from(4, 4, 16, std::vector<std::uint8_t>(16, 1));
  const auto specs = enumerate_patches({"s", 64, 64, 0.25}, mask, 16, 0.5, 0, 0.7);
  ASSERT_EQ(specs.size(), 4u);
  for (const auto& s : specs) EXPECT_DOUBLE_EQ(s.tissue_coverage, 1.0);
}

TEST(EnumeratePatches, PatchLargerThanSlideGivesEmpty) {
  const auto mask = mask_from(1, 1, 32, {1});
  EXPECT_TRUE(enumerate_patches({"s", 30, 30, 0.5}, mask, 32, 0.5, 0, 0.0).empty());
}

TEST(EnumeratePatches, MonotoneInMinCoverageAndPartitioned) {
  Rng rng(3);
  std::vector<std::uint8_t> cells(16 * 16);
  for (auto& c : cells) c = rng.bernoulli(0.6);
  const auto mask = mask_from(16, 16, 8, cells);
  const SlideGeometry slide{"s", 128, 128, 0.25};
  const auto all = enumerate_patches(slide, mask, 12, 0.5, 5, 0.0);
  std::size_t previous = all.size();
  for (double thr = 0.05; thr <= 1.0; thr += 0.05) {
    const auto kept = enumerate_patches(slide, mask, 12, 0.5, 5, thr);
    EXPECT_LE(kept.size(), previous);
    previous = kept.size();
    std::size_t expected = 0;
    for (const auto& s : all) expected += s.tissue_coverage >= thr;
    EXPECT_EQ(kept.size(), expected);
    for (const auto& s : kept) EXPECT_GE(s.tissue_coverage, thr);
  }
}

TEST(ReadPatch, NativeToTargetFactorFour) {
  Image img(16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) std::fill_n(img.at(x, y), 3, static_cast<std::uint8_t>(x < 4 ? 0 : 200));
  const auto patch = read_patch(img, 0.22, {"s", 0, 0, 4, 0.88, 1.0});
  EXPECT_EQ(patch.size, 4);
  EXPECT_FLOAT_EQ(patch.pixel(0, 0)[0], 0.0f);
  EXPECT_FLOAT_EQ(patch.pixel(1, 3)[2], static_cast<float>(200 / 255.0));
}

TEST(ReadPatch, IdentityWhenTargetEqualsNative) {
  Rng rng(9);
  Image img(20, 20);
  for (auto& v : img.pixels) v = static_cast<std::uint8_t>(rng.below(256));
  const auto patch = read_patch(img, 0.5, {"s", 3, 5, 8, 0.5, 1.0});
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c) EXPECT_EQ(quantize(patch.pixel(x, y)[c]), img.at(x + 3, y + 5)[c]);
}

TEST(ReadPatch, ConstantRegionAndMeanPreservation) {
  Image flat(40, 40, 77);
  const auto p = read_patch(flat, 0.3, {"s", 1, 1, 10, 0.9, 1.0});
  for (float v : p.values) EXPECT_NEAR(v, 77 / 255.0, 1e-6);

  Rng rng(1);
  Image img(90, 90);
  for (auto& v : img.pixels) v = static_cast<std::uint8_t>(rng.below(256));
  // Non-integer factor 2.5: region [0, 75) native maps to 30 output pixels.
  const auto q = read_patch(img, 0.2, {"s", 0, 0, 30, 0.5, 1.0});
  double native_mean = 0, patch_mean = 0;
  for (int y = 0; y < 75; ++y)
    for (int x = 0; x < 75; ++x) native_mean += img.at(x, y)[1];
  native_mean /= 75.0 * 75.0 * 255.0;
  for (int y = 0; y < 30; ++y)
    for (int x = 0; x < 30; ++x) patch_mean += q.pixel(x, y)[1];
  patch_mean /= 900.0;
  EXPECT_NEAR(patch_mean, native_mean, 1.0 / 255.0);
}

TEST(ReadPatch, UpsamplingAndOutOfBounds) {
  Image img(32, 32);
  try {
    read_patch(img, 0.5, {"s", 0, 0, 8, 0.25, 1.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("upsampling not supported"), std::string::npos);
  }
  EXPECT_THROW(read_patch(img, 0.5, {"s", 10, 0, 8, 1.0, 1.0}), Error);
}
