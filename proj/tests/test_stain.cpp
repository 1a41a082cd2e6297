#include <gtest/gtest.h>

#include "reid/stain.hpp"
#include "stain_fixtures.hpp"

using namespace reid;
using namespace reid::stain;

namespace {

RGBPatch filled(int size, float r, float g, float b) {
  RGBPatch p(size);
  for (std::size_t i = 0; i < p.pixel_count(); ++i) {
    p.values[i * 3] = r;
    p.values[i * 3 + 1] = g;
    p.values[i * 3 + 2] = b;
  }
  return p;
}

}  // namespace

TEST(OpticalDensity, KnownValues) {
  auto od = rgb_to_od(filled(2, 1, 1, 1));
  for (double v : od.values) EXPECT_DOUBLE_EQ(v, 0.0);
  od = rgb_to_od(filled(2, 0.1f, 0.1f, 0.1f));
  for (double v : od.values) EXPECT_NEAR(v, 1.0, 1e-7);
  od = rgb_to_od(filled(1, 0, 0, 0), 0.01);
  for (double v : od.values) EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(OpticalDensity, InverseIsExactAboveEpsilon) {
  Rng rng(4);
  RGBPatch p(16);
  for (auto& v : p.values) v = static_cast<float>(rng.uniform(kDefaultEpsilon, 1.0));
  EXPECT_EQ(od_to_rgb(rgb_to_od(p)), p);
  ODImage zero{1, {0, 0, 0}};
  for (float v : od_to_rgb(zero).values) EXPECT_EQ(v, 1.0f);
  ODImage big{1, {400, 400, 400}};
  for (float v : od_to_rgb(big).values) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LT(v, 1e-6f);
  }
}

TEST(Deconvolve, RecoversForwardModelConcentrations) {
  Rng rng(21);
  const StainModel model{reid::testing::random_stain_matrix(rng), {1, 1}};
  const auto truth = reid::testing::random_concentrations(rng, 24);
  const auto image = reconstruct(truth, model);
  const auto recovered = deconvolve(image, model);
  for (std::size_t i = 0; i < truth.values.size(); ++i) EXPECT_NEAR(recovered.values[i], truth.values[i], 1e-3);
}

TEST(Deconvolve, WhitePixelAndLinearity) {
  const auto model = canonical_he_model();
  const auto white = deconvolve(filled(2, 1, 1, 1), model);
  for (double v : white.values) EXPECT_EQ(v, 0.0);

  ConcentrationMap c{1, {0.3, 0.2}};
  const auto once = deconvolve(reconstruct(c, model), model);
  ConcentrationMap c2{1, {0.6, 0.4}};
  const auto twice = deconvolve(reconstruct(c2, model), model);
  EXPECT_NEAR(twice.values[0], 2 * once.values[0], 1e-5);
  EXPECT_NEAR(twice.values[1], 2 * once.values[1], 1e-5);
}

TEST(Deconvolve, SingularMatrixIsAnError) {
  StainModel model;
  model.stain_matrix << 0.6, 0.8, 0.0, 0.6, 0.8, 0.0;
  EXPECT_THROW(deconvolve(filled(2, 0.5f, 0.5f, 0.5f), model), Error);
}

TEST(Reconstruct, ZeroConcentrationsGiveWhiteAndProjectionIsIdempotent) {
  const auto model = canonical_he_model();
  ConcentrationMap zero{3, std::vector<double>(18, 0.0)};
  for (float v : reconstruct(zero, model).values) EXPECT_EQ(v, 1.0f);

  Rng rng(8);
  RGBPatch noisy(12);
  for (auto& v : noisy.values) v = static_cast<float>(rng.uniform(0.2, 1.0));
  const auto once = reconstruct(deconvolve(noisy, model), model);
  const auto twice = reconstruct(deconvolve(once, model), model);
  for (std::size_t i = 0; i < once.values.size(); ++i) EXPECT_NEAR(once.values[i], twice.values[i], 1e-5);
}

TEST(Macenko, RecoversKnownMatrix) {
  Rng rng(99);
  for (int trial = 0; trial < 10; ++trial) {
    const auto truth = reid::testing::random_stain_matrix(rng);
    const auto image = reconstruct(reid::testing::random_concentrations(rng, 48), {truth, {1, 1}});
    const auto est = estimate_stain_model(image);
    EXPECT_LE(reid::testing::max_angle_error_deg(est.stain_matrix, truth), 2.0) << "trial " << trial;
    for (int r = 0; r < 2; ++r) {
      EXPECT_NEAR(est.stain_matrix.row(r).norm(), 1.0, 1e-6);
      EXPECT_GE(est.stain_matrix.row(r).minCoeff(), 0.0);
    }
  }
}

TEST(Macenko, WhiteAndSingleStainImages) {
  try {
    estimate_stain_model(filled(32, 1, 1, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("insufficient tissue"), std::string::npos);
  }
  Rng rng(2);
  ConcentrationMap c{32, std::vector<double>(2 * 32 * 32, 0.0)};
  for (std::size_t p = 0; p < c.pixel_count(); ++p) c.at(0, p) = rng.uniform(0.2, 1.0);
  EXPECT_THROW(estimate_stain_model(reconstruct(c, canonical_he_model())), Error);
}

TEST(Augment, LambdaZeroIsProjection) {
  Rng data(5);
  const auto image = reconstruct(reid::testing::random_concentrations(data, 32), canonical_he_model());
  Rng rng(1);
  const auto augmented = augment_stain(image, 0.0, rng);
  const auto model = estimate_stain_model(image);
  EXPECT_EQ(augmented, reconstruct(deconvolve(image, model), model));
}

TEST(Augment, DrawsWithinLambdaBounds) {
  Rng rng(17);
  for (int i = 0; i < 1000; ++i) {
    const auto p = draw_augment_params(0.2, rng);
    for (int s = 0; s < 2; ++s) {
      EXPECT_GE(p.alpha[s], 0.8);
      EXPECT_LE(p.alpha[s], 1.2);
      EXPECT_GE(p.beta[s], -0.2);
      EXPECT_LE(p.beta[s], 0.2);
    }
  }
}

TEST(Augment, ScalingOneStainScalesItsOpticalDensity) {
  Rng rng(3);
  const auto model = canonical_he_model();
  ConcentrationMap c{16, std::vector<double>(2 * 256, 0.0)};
  for (std::size_t p = 0; p < 256; ++p) c.at(0, p) = rng.uniform(0.1, 0.8);
  const auto image = reconstruct(c, model);
  StainAugmentParams params;
  params.alpha = {1.2, 1.0};
  const auto out = apply_stain_augmentation(image, model, params);
  const auto od_in = rgb_to_od(image), od_out = rgb_to_od(out);
  for (std::size_t i = 0; i < od_in.values.size(); ++i) EXPECT_NEAR(od_out.values[i], 1.2 * od_in.values[i], 1e-3);
}

TEST(Augment, EstimationFailurePassesThrough) {
  const auto white = filled(16, 1, 1, 1);
  Rng rng(0);
  EXPECT_EQ(augment_stain(white, 0.2, rng), white);
}

TEST(Augment, PreservesGeometry) {
  Rng data(6);
  const auto model = canonical_he_model();
  auto conc = reid::testing::random_concentrations(data, 32);
  for (std::size_t p = 0; p < 32 * 8; ++p) conc.at(0, p) = conc.at(1, p) = 0.0;  // white band
  const auto image = reconstruct(conc, model);

  Rng rng(2);
  const auto out = augment_stain(image, 0.2, rng, {}, &model);
  EXPECT_EQ(out.size, image.size);
  EXPECT_EQ(out.values.size(), image.values.size());

  // Multiplicative perturbation alone keeps the white/tissue mask identical.
  StainAugmentParams params;
  params.alpha = {1.15, 0.85};
  const auto scaled = apply_stain_augmentation(image, model, params);
  for (std::size_t p = 0; p < image.pixel_count(); ++p) {
    const bool white_in = image.values[p * 3] == 1.0f && image.values[p * 3 + 1] == 1.0f && image.values[p * 3 + 2] == 1.0f;
    const bool white_out =
        scaled.values[p * 3] == 1.0f && scaled.values[p * 3 + 1] == 1.0f && scaled.values[p * 3 + 2] == 1.0f;
    ASSERT_EQ(white_in, white_out) << "pixel " << p;
  }
}

TEST(Flip, InvolutionSymmetryAndDeterminism) {
  Rng data(12);
  RGBPatch p(9);
  for (auto& v : p.values) v = static_cast<float>(data.uniform());
  EXPECT_EQ(flip(flip(p, true, false), true, false), p);
  EXPECT_EQ(flip(flip(p, true, true), true, true), p);
  EXPECT_NE(flip(p, true, false), p);

  const RGBPatch sym(9, 0.4f);
  EXPECT_EQ(flip(sym, true, false), sym);
  EXPECT_EQ(flip(sym, false, true), sym);

  Rng a(77), b(77);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(random_flip(p, a), random_flip(p, b));
}
