#include <cstring>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include "reid/models.hpp"
#include "test_util.hpp"
#include "toy_data.hpp"

using namespace reid;
using namespace reid::models;
using reid::testing::TempDir;

namespace {

double patch_accuracy(const PatchClassifier& m, const reid::testing::ToyCohort& t, const std::set<std::string>& slides) {
  int ok = 0, n = 0;
  for (const auto& s : slides)
    for (const auto& p : t.source.patches(s)) {
      const auto probs = m.probabilities(p);
      ok += (std::max_element(probs.begin(), probs.end()) - probs.begin()) == t.labels.at(s);
      ++n;
    }
  return static_cast<double>(ok) / n;
}

// Trained once and shared by the tests below.
struct Trained {
  reid::testing::ToyCohort toy = reid::testing::toy_cohort();
  TrainedPatchModel patch =
      train_patch_classifier(toy.source, toy.split, toy.labels, 2, reid::testing::toy_encoder(), reid::testing::toy_training());
};

const Trained& trained() {
  static const Trained t;
  return t;
}

}  // namespace

TEST(Encoder, PretrainedVariantsNeedWeights) {
  EncoderConfig cfg;
  cfg.variant = EncoderVariant::imagenet_pretrained;
  EXPECT_THROW(build_encoder(cfg, 0), Error);
  cfg.variant = EncoderVariant::ssl_pretrained;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.embedding_dim = 0;
  cfg.variant = EncoderVariant::tiny_synthetic;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(Encoder, TinyShapeAndDeterminism) {
  EncoderConfig cfg;
  cfg.embedding_dim = 20;
  const auto enc = build_encoder(cfg, 3);
  Rng rng(1);
  const auto patch = reid::testing::toy_patch(0, 64, rng);
  const auto e = enc.forward(patch);
  EXPECT_EQ(e.size(), 20);
  EXPECT_EQ(e, enc.forward(patch));
  EXPECT_EQ(e, build_encoder(cfg, 3).forward(patch));
}

TEST(Encoder, WeightsRoundTripAndCorruption) {
  TempDir dir;
  EncoderConfig cfg = reid::testing::toy_encoder();
  auto enc = build_encoder(cfg, 5);
  save_encoder_weights(dir / "w.json", enc);

  EncoderConfig pre = cfg;
  pre.variant = EncoderVariant::ssl_pretrained;
  pre.weights_path = dir / "w.json";
  const auto loaded = build_encoder(pre, 999);
  Rng rng(2);
  const auto patch = reid::testing::toy_patch(1, 16, rng);
  EXPECT_EQ(loaded.forward(patch), enc.forward(patch));

  std::ofstream(dir / "bad.json") << "{ not json";
  pre.weights_path = dir / "bad.json";
  EXPECT_THROW(build_encoder(pre, 0), Error);
  pre.weights_path = dir / "missing.json";
  EXPECT_THROW(build_encoder(pre, 0), Error);

  pre.weights_path = dir / "w.json";
  pre.embedding_dim = 9;
  EXPECT_THROW(build_encoder(pre, 0), Error);
}

TEST(Aggregation, Unanimity) {
  std::vector<std::vector<double>> probs(5, std::vector<double>{0, 0, 0, 1, 0});
  const auto p = aggregate_patch_probabilities("s", probs);
  EXPECT_EQ(p.predicted_class, 3);
  EXPECT_DOUBLE_EQ(p.class_scores[3], 1.0);
}

TEST(Aggregation, MeanOfProbabilities) {
  const auto p = aggregate_patch_probabilities("s", {{0.6, 0.4}, {0.2, 0.8}});
  EXPECT_NEAR(p.class_scores[0], 0.4, 1e-12);
  EXPECT_NEAR(p.class_scores[1], 0.6, 1e-12);
  EXPECT_EQ(p.predicted_class, 1);
}

TEST(Aggregation, TieGoesToLowerIndex) {
  const auto p = aggregate_patch_probabilities("s", {{0.5, 0.5}});
  EXPECT_EQ(p.predicted_class, 0);
  EXPECT_EQ(p.topk, (std::vector<int>{0, 1}));
  const auto q = make_prediction("s", {0.1, 0.3, 0.3, 0.3});
  EXPECT_EQ(q.topk, (std::vector<int>{1, 2, 3, 0}));
}

TEST(Aggregation, MajorityVoteAndErrors) {
  const auto p = aggregate_patch_probabilities("s", {{0.6, 0.4}, {0.55, 0.45}, {0.0, 1.0}}, Aggregation::majority_vote);
  EXPECT_EQ(p.predicted_class, 0);
  EXPECT_NEAR(p.class_scores[0], 2.0 / 3.0, 1e-12);
  EXPECT_THROW(aggregate_patch_probabilities("s", {}), Error);
  PatchClassifier m(EncoderConfig{}, build_encoder(reid::testing::toy_encoder(), 0), 2);
  EXPECT_THROW(predict_slide_patchwise(m, "s", {}), Error);
}

TEST(Aggregation, ScoresSumToOne) {
  const auto& t = trained();
  for (const auto& s : t.toy.split.test) {
    const auto p = predict_slide_patchwise(t.patch.model, s, t.toy.source.patches(s));
    double sum = 0;
    for (double v : p.class_scores) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-6);
    EXPECT_EQ(p.predicted_class, p.topk.front());
  }
}

TEST(Bags, WithoutReplacementWhenEnoughPatches) {
  Rng rng(1);
  const auto bags = make_bag_indices(100, 40, 3, rng);
  ASSERT_EQ(bags.size(), 3u);
  for (const auto& b : bags) {
    EXPECT_EQ(b.size(), 40u);
    EXPECT_EQ(std::set<std::size_t>(b.begin(), b.end()).size(), 40u);
  }
}

TEST(Bags, WithReplacementWhenShort) {
  Rng rng(2);
  const auto b = make_bag_indices(10, 40, 1, rng).front();
  EXPECT_EQ(b.size(), 40u);
  EXPECT_LE(std::set<std::size_t>(b.begin(), b.end()).size(), 10u);
  for (auto i : b) EXPECT_LT(i, 10u);
}

TEST(Bags, DeterministicAndErrors) {
  Rng a(3), b(3);
  EXPECT_EQ(make_bag_indices(50, 40, 2, a), make_bag_indices(50, 40, 2, b));
  EXPECT_THROW(make_bag_indices(0, 40, 1, a), Error);
  std::vector<RGBPatch> patches(7, RGBPatch(4));
  const auto bags = make_bags("s", patches, 1, 40, 2, a);
  ASSERT_EQ(bags.size(), 2u);
  EXPECT_EQ(bags[0].instances.size(), 40u);
  EXPECT_EQ(bags[0].label, 1);
  EXPECT_EQ(bags[0].slide_id, "s");
}

TEST(PatchTraining, SeparatesDistinctPatientsWithinTenEpochs) {
  const auto& t = trained();
  EXPECT_LE(t.patch.history.epochs.size(), 10u);
  EXPECT_GT(patch_accuracy(t.patch.model, t.toy, t.toy.split.val), 0.9);
  EXPECT_GT(patch_accuracy(t.patch.model, t.toy, t.toy.split.test), 0.9);
}

TEST(PatchTraining, SelectsMinimumValidationLoss) {
  const auto& t = trained();
  const auto& h = t.patch.history;
  ASSERT_GE(h.best_epoch, 0);
  double min_loss = 1e300;
  for (const auto& e : h.epochs) min_loss = std::min(min_loss, e.val_loss);
  EXPECT_EQ(h.best_val_loss(), min_loss);

  // The returned parameters reproduce the recorded loss.
  const auto val = models::detail::fixed_sample(t.toy.source, t.toy.split.val, reid::testing::toy_training().val_patches_per_slide,
                                        derive_seed(reid::testing::toy_training().seed, "val-sample"));
  double loss = 0;
  std::size_t n = 0;
  for (const auto& [slide, idx] : val)
    for (auto i : idx) {
      loss += nn::cross_entropy<float>(t.patch.model.head.forward(t.patch.model.encoder.forward(t.toy.source.patches(slide)[i])),
                                       t.toy.labels.at(slide));
      ++n;
    }
  EXPECT_NEAR(loss / n, min_loss, 1e-9);
}

TEST(PatchTraining, FixedSeedGivesIdenticalFirstEpoch) {
  auto toy = reid::testing::toy_cohort();
  auto cfg = reid::testing::toy_training();
  cfg.max_epochs = 1;
  const auto a = train_patch_classifier(toy.source, toy.split, toy.labels, 2, reid::testing::toy_encoder(), cfg);
  const auto b = train_patch_classifier(toy.source, toy.split, toy.labels, 2, reid::testing::toy_encoder(), cfg);
  EXPECT_EQ(a.history.epochs.at(0).train_loss, b.history.epochs.at(0).train_loss);
  EXPECT_EQ(a.history.epochs.at(0).val_loss, b.history.epochs.at(0).val_loss);
}

TEST(PatchTraining, PermutedLabelsStayNearChance) {
  // Many small slides so the shuffled labels carry almost no signal.
  auto toy = reid::testing::toy_cohort(16, 4, 20, 10, 0, 7);
  std::vector<std::string> slides(toy.split.train.begin(), toy.split.train.end());
  std::vector<int> values;
  for (const auto& s : slides) values.push_back(toy.labels.at(s));
  Rng rng(5);
  rng.shuffle(values);
  auto permuted = toy.labels;
  for (std::size_t i = 0; i < slides.size(); ++i) permuted[slides[i]] = values[i];
  auto cfg = reid::testing::toy_training();
  cfg.patches_per_slide = 4;
  cfg.val_patches_per_slide = 4;
  const auto m = train_patch_classifier(toy.source, toy.split, permuted, 2, reid::testing::toy_encoder(), cfg);
  const double acc = patch_accuracy(m.model, toy, toy.split.val);
  EXPECT_GT(acc, 0.25);
  EXPECT_LT(acc, 0.75);
}

TEST(PatchTraining, Errors) {
  auto toy = reid::testing::toy_cohort();
  const auto enc = reid::testing::toy_encoder();
  auto cfg = reid::testing::toy_training();

  SplitAssignment empty = toy.split;
  empty.train.clear();
  EXPECT_THROW(train_patch_classifier(toy.source, empty, toy.labels, 2, enc, cfg), Error);

  // A class without training slides.
  SplitAssignment one_class = toy.split;
  std::erase_if(one_class.train, [&](const std::string& s) { return toy.labels.at(s) == 1; });
  EXPECT_THROW(train_patch_classifier(toy.source, one_class, toy.labels, 2, enc, cfg), Error);

  cfg.learning_rate = 1e30;
  cfg.max_epochs = 3;
  try {
    train_patch_classifier(toy.source, toy.split, toy.labels, 2, enc, cfg);
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::numeric);
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
  }
  cfg.learning_rate = 0;
  EXPECT_THROW(train_patch_classifier(toy.source, toy.split, toy.labels, 2, enc, cfg), Error);
}

TEST(Embeddings, ShapeDuplicatesAndLinearProbe) {
  const auto& t = trained();
  std::vector<RGBPatch> patches;
  std::vector<int> y;
  for (const auto& s : t.toy.split.test)
    for (const auto& p : t.toy.source.patches(s)) {
      patches.push_back(p);
      y.push_back(t.toy.labels.at(s));
    }
  patches.push_back(patches.front());
  y.push_back(y.front());
  const auto e = embed_patches(t.patch.model.encoder, patches);
  ASSERT_EQ(e.rows(), static_cast<Eigen::Index>(patches.size()));
  ASSERT_EQ(e.cols(), 8);
  EXPECT_EQ(e.row(0), e.row(e.rows() - 1));

  // Logistic-regression probe.
  const Eigen::MatrixXd x = e.cast<double>();
  Eigen::VectorXd w = Eigen::VectorXd::Zero(x.cols());
  double b = 0;
  for (int it = 0; it < 2000; ++it) {
    Eigen::VectorXd gw = Eigen::VectorXd::Zero(x.cols());
    double gb = 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double p = 1 / (1 + std::exp(-(x.row(i).dot(w) + b)));
      gw += (p - y[static_cast<std::size_t>(i)]) * x.row(i).transpose();
      gb += p - y[static_cast<std::size_t>(i)];
    }
    w -= 0.1 * gw / x.rows();
    b -= 0.1 * gb / x.rows();
  }
  int ok = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) ok += ((x.row(i).dot(w) + b) > 0) == (y[static_cast<std::size_t>(i)] == 1);
  EXPECT_EQ(ok, x.rows());
}

TEST(Mil, FrozenEncoderAttentionAndAccuracy) {
  const auto& t = trained();
  nn::ResidualEncoder encoder = t.patch.model.encoder;
  nn::ParamSet before_set;
  encoder.visit(before_set.collector());
  const auto before = before_set.snapshot();

  auto cfg = reid::testing::toy_training();
  cfg.seed = 21;
  const auto mil = train_mil(t.toy.source, t.toy.split, t.toy.labels, 2, reid::testing::toy_encoder(), encoder, cfg);

  nn::ParamSet after_set;
  auto copy = mil.model.encoder;
  copy.visit(after_set.collector());
  const auto after = after_set.snapshot();
  ASSERT_EQ(before.size(), after.size());
  EXPECT_EQ(std::memcmp(before.data(), after.data(), before.size() * sizeof(float)), 0);

  int correct = 0, n = 0;
  Rng rng(4);
  for (const auto& s : t.toy.split.val)
    for (const auto& bag : make_bags(s, t.toy.source.patches(s), t.toy.labels.at(s), 6, 3, rng)) {
      const auto f = mil.model.head.forward(embed_patches(mil.model.encoder, bag.instances));
      EXPECT_NEAR(f.weights.sum(), 1.0f, 1e-6f);
      Eigen::Index best;
      f.logits.maxCoeff(&best);
      correct += best == bag.label;
      ++n;
    }
  EXPECT_GT(static_cast<double>(correct) / n, 0.9);

  // Unanimous slides get the same call from both paths.
  for (const auto& s : t.toy.split.test) {
    const auto& patches = t.toy.source.patches(s);
    std::set<int> calls;
    for (const auto& p : patches) {
      const auto pr = t.patch.model.probabilities(p);
      calls.insert(static_cast<int>(std::max_element(pr.begin(), pr.end()) - pr.begin()));
    }
    if (calls.size() != 1) continue;
    EXPECT_EQ(predict_slide_mil(mil.model, s, patches).predicted_class,
              predict_slide_patchwise(t.patch.model, s, patches).predicted_class);
  }
}

TEST(Mil, InferenceBagCap) {
  const auto& t = trained();
  MilModel model(reid::testing::toy_encoder(), t.patch.model.encoder, 6, 2);
  Rng rng(8);
  model.head.init(rng);

  std::vector<RGBPatch> small;
  for (int i = 0; i < 30; ++i) small.push_back(reid::testing::toy_patch(i % 2, 16, rng));
  const auto all = model.head.forward(embed_patches(model.encoder, small));
  const auto p = predict_slide_mil(model, "s", small, 500);
  const nn::VectorF expect = nn::softmax<float>(all.logits);
  for (int c = 0; c < 2; ++c) EXPECT_FLOAT_EQ(static_cast<float>(p.class_scores[static_cast<std::size_t>(c)]), expect(c));

  std::vector<RGBPatch> big;
  for (int i = 0; i < 2000; ++i) big.push_back(reid::testing::toy_patch(i % 2, 16, rng));
  const auto a = predict_slide_mil(model, "big", big, 500, 77);
  const auto b = predict_slide_mil(model, "big", big, 500, 77);
  EXPECT_EQ(a.class_scores, b.class_scores);
  Rng sample_rng(derive_seed(77, "big"));
  auto idx = sample_rng.sample_without_replacement(2000, 500);
  std::sort(idx.begin(), idx.end());
  std::vector<RGBPatch> chosen;
  for (auto i : idx) chosen.push_back(big[i]);
  const nn::VectorF manual = nn::softmax<float>(model.head.forward(embed_patches(model.encoder, chosen)).logits);
  for (int c = 0; c < 2; ++c) EXPECT_FLOAT_EQ(static_cast<float>(a.class_scores[static_cast<std::size_t>(c)]), manual(c));
  EXPECT_THROW(predict_slide_mil(model, "e", {}), Error);
}

TEST(Checkpoint, RoundTripsBothModelKinds) {
  const auto& t = trained();
  TempDir dir;
  CheckpointMeta meta{"patch", reid::testing::toy_encoder(), reid::testing::toy_training().to_json(),
                      PatientIndex({"A", "B"}), "abc", 0};
  auto model = t.patch.model;
  save_checkpoint(dir / "p.json", model, meta);
  const auto [loaded, lmeta] = load_patch_checkpoint(dir / "p.json");
  EXPECT_EQ(lmeta.split_fingerprint, "abc");
  EXPECT_EQ(lmeta.patients, meta.patients);
  const auto& s = *t.toy.split.test.begin();
  EXPECT_EQ(predict_slide_patchwise(loaded, s, t.toy.source.patches(s)).class_scores,
            predict_slide_patchwise(t.patch.model, s, t.toy.source.patches(s)).class_scores);
  EXPECT_THROW(load_mil_checkpoint(dir / "p.json"), Error);

  MilModel mil(reid::testing::toy_encoder(), t.patch.model.encoder, 6, 2);
  Rng rng(1);
  mil.head.init(rng);
  meta.kind = "mil";
  meta.attention_hidden = 6;
  save_checkpoint(dir / "m.json", mil, meta);
  const auto [lmil, _] = load_mil_checkpoint(dir / "m.json");
  EXPECT_EQ(predict_slide_mil(lmil, s, t.toy.source.patches(s)).class_scores,
            predict_slide_mil(mil, s, t.toy.source.patches(s)).class_scores);

  // A checkpoint also serves as encoder weights.
  EncoderConfig pre = reid::testing::toy_encoder();
  pre.variant = EncoderVariant::imagenet_pretrained;
  pre.weights_path = dir / "p.json";
  Rng prng(3);
  const auto patch = reid::testing::toy_patch(0, 16, prng);
  EXPECT_EQ(build_encoder(pre, 0).forward(patch), t.patch.model.encoder.forward(patch));

  std::ofstream(dir / "trunc.json") << "{\"format\": \"reid-checkpoint/1\"";
  EXPECT_THROW(load_patch_checkpoint(dir / "trunc.json"), Error);
}

TEST(History, CsvHasOneRowPerEpoch) {
  const auto& t = trained();
  TempDir dir;
  write_history_csv(dir / "h.csv", t.patch.history);
  std::ifstream in(dir / "h.csv");
  std::string line;
  int rows = 0;
  std::getline(in, line);
  EXPECT_EQ(line, "epoch,train_loss,val_loss,val_recall_at_1");
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, static_cast<int>(t.patch.history.epochs.size()));
}
