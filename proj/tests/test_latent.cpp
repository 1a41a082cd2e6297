#include <gtest/gtest.h>

#include "reid/latent.hpp"
#include "test_util.hpp"
#include "toy_data.hpp"

using namespace reid;
using namespace reid::latent;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

}  // namespace

TEST(Anchors, MeanOfSlideEmbeddings) {
  const auto a = anchors_from_slide_embeddings({{0, vec({0, 0})}, {0, vec({2, 4})}, {1, vec({1, 1})}});
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a.at(0).anchor, vec({1, 2}));
  EXPECT_EQ(a.at(0).n_contributing, 2);
  EXPECT_EQ(a.at(1).anchor, vec({1, 1}));
}

TEST(Anchors, DistanceIsEuclidean) {
  AnchorMap anchors = anchors_from_slide_embeddings({{0, vec({0, 0})}});
  const auto r = make_record("s", 0, 0, vec({3, 4}), anchors);
  EXPECT_DOUBLE_EQ(r.distance_to_own_anchor, 5.0);
  EXPECT_TRUE(r.correct);
  EXPECT_FALSE(make_record("s", 0, 1, vec({3, 4}), anchors).correct);
  EXPECT_THROW(make_record("s", 1, 1, vec({3, 4}), anchors), Error);
  EXPECT_THROW(make_record("s", 0, 0, vec({3, 4, 0}), anchors), Error);
}

TEST(Anchors, RotationInvariantDistances) {
  Rng rng(3);
  const int d = 6;
  std::vector<std::pair<int, Eigen::VectorXd>> slides;
  for (int i = 0; i < 8; ++i) {
    Eigen::VectorXd e(d);
    for (int j = 0; j < d; ++j) e(j) = rng.normal();
    slides.emplace_back(i % 2, e);
  }
  Eigen::MatrixXd m(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = rng.normal();
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(m).householderQ();
  auto rotated = slides;
  for (auto& [_, e] : rotated) e = q * e;

  const auto a = anchors_from_slide_embeddings(slides);
  const auto b = anchors_from_slide_embeddings(rotated);
  for (std::size_t i = 0; i < slides.size(); ++i) {
    const auto ra = make_record("s", slides[i].first, 0, slides[i].second, a);
    const auto rb = make_record("s", rotated[i].first, 0, rotated[i].second, b);
    EXPECT_NEAR(ra.distance_to_own_anchor, rb.distance_to_own_anchor, 1e-12);
  }
}

TEST(Summary, QuartilesMatchOracle) {
  std::vector<DistanceRecord> records;
  const std::vector<double> ok{5, 1, 4, 2, 3};
  for (double v : ok) records.push_back({"s", 0, 0, v, true});
  records.push_back({"t", 0, 1, 9.0, false});
  const auto s = distance_report(records);
  ASSERT_TRUE(s.correct);
  // Linear interpolation between closest ranks on 1..5.
  EXPECT_DOUBLE_EQ(s.correct->q1, 2.0);
  EXPECT_DOUBLE_EQ(s.correct->median, 3.0);
  EXPECT_DOUBLE_EQ(s.correct->q3, 4.0);
  EXPECT_DOUBLE_EQ(s.correct->min, 1.0);
  EXPECT_DOUBLE_EQ(s.correct->max, 5.0);
  ASSERT_TRUE(s.incorrect);
  EXPECT_EQ(s.incorrect->n, 1u);
  EXPECT_DOUBLE_EQ(s.incorrect->median, 9.0);

  records.pop_back();
  const auto only = distance_report(records);
  EXPECT_FALSE(only.incorrect);
  ASSERT_EQ(only.notes.size(), 1u);
  EXPECT_NE(format_summary(only).find("no misclassified slides"), std::string::npos);
  EXPECT_THROW(distance_report({}), Error);

  std::vector<DistanceRecord> even;
  for (double v : {1.0, 2.0, 3.0, 4.0}) even.push_back({"s", 0, 0, v, true});
  const auto e = distance_report(even);
  EXPECT_DOUBLE_EQ(e.correct->q1, 1.75);
  EXPECT_DOUBLE_EQ(e.correct->median, 2.5);
  EXPECT_DOUBLE_EQ(e.correct->q3, 3.25);
}

TEST(Anchors, FromEncoderAndCsv) {
  auto toy = reid::testing::toy_cohort();
  const auto enc = models::build_encoder(reid::testing::toy_encoder(), 1);
  const auto anchors = compute_anchors(enc, toy.source, toy.split.train, toy.labels, 5, 9);
  ASSERT_EQ(anchors.size(), 2u);
  EXPECT_EQ(anchors.at(0).n_contributing, 4);

  std::vector<models::SlidePrediction> preds;
  for (const auto& s : toy.split.test) preds.push_back(models::make_prediction(s, {0.7, 0.3}));
  const auto records = anchor_distances(enc, toy.source, preds, toy.labels, anchors, 5, 9);
  ASSERT_EQ(records.size(), toy.split.test.size());
  for (const auto& r : records) {
    EXPECT_GE(r.distance_to_own_anchor, 0.0);
    EXPECT_EQ(r.correct, r.true_class == 0);
  }
  // Seeded sampling gives the same distances again.
  EXPECT_EQ(anchor_distances(enc, toy.source, preds, toy.labels, anchors, 5, 9)[0].distance_to_own_anchor,
            records[0].distance_to_own_anchor);

  reid::testing::TempDir dir;
  write_records_csv(dir / "d.csv", records);
  std::ifstream in(dir / "d.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "slide_id,true_class,predicted_class,distance,correct");

  models::SlideLabels missing = toy.labels;
  missing["extra"] = 1;
  std::set<std::string> train = toy.split.train;
  std::erase_if(train, [&](const std::string& s) { return toy.labels.at(s) == 1; });
  train.insert("extra");
  EXPECT_THROW(compute_anchors(enc, toy.source, train, missing, 5, 9), Error);
}

TEST(Anchors, ExperimentDistancesUseEachFoldsEncoder) {
  auto toy = reid::testing::toy_cohort();
  const auto cfg = reid::testing::toy_encoder();
  std::vector<models::SlidePrediction> preds;
  for (const auto& s : toy.split.test) preds.push_back(models::make_prediction(s, {0.4, 0.6}));

  eval::ExperimentResult run;
  run.truth = toy.labels;
  eval::FoldResult fold;
  fold.split = toy.split;
  fold.predictions = preds;
  fold.patch_model = std::make_shared<models::PatchClassifier>(cfg, models::build_encoder(cfg, 1), 2);
  run.folds.push_back(fold);

  auto expected = [&](const nn::ResidualEncoder& enc) {
    const auto anchors = compute_anchors(enc, toy.source, toy.split.train, toy.labels, 5, 3);
    return anchor_distances(enc, toy.source, preds, toy.labels, anchors, 5, 3);
  };
  const auto patch = experiment_distances(run, toy.source, 5, 3);
  const auto want_patch = expected(fold.patch_model->encoder);
  ASSERT_EQ(patch.size(), want_patch.size());
  for (std::size_t i = 0; i < patch.size(); ++i) {
    EXPECT_EQ(patch[i].distance_to_own_anchor, want_patch[i].distance_to_own_anchor);
    EXPECT_EQ(patch[i].slide_id, "fold00/" + want_patch[i].slide_id);
  }

  run.folds[0].mil_model = std::make_shared<models::MilModel>(cfg, models::build_encoder(cfg, 2), 4, 2);
  const auto mil = experiment_distances(run, toy.source, 5, 3);
  const auto want_mil = expected(run.folds[0].mil_model->encoder);
  for (std::size_t i = 0; i < mil.size(); ++i) EXPECT_EQ(mil[i].distance_to_own_anchor, want_mil[i].distance_to_own_anchor);

  run.folds[0].patch_model.reset();
  run.folds[0].mil_model.reset();
  EXPECT_THROW(experiment_distances(run, toy.source, 5, 3), Error);
}
