#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "reid/core/error.hpp"
#include "reid/core/hash.hpp"
#include "reid/core/image.hpp"
#include "reid/core/log.hpp"
#include "reid/core/rng.hpp"
#include "reid/dataset.hpp"
#include "reid/nn/attention.hpp"
#include "reid/nn/encoder.hpp"
#include "reid/nn/optim.hpp"
#include "reid/stain.hpp"
#include "reid/tiling.hpp"

namespace reid::models {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Encoders

enum class EncoderVariant { task_trained, imagenet_pretrained, ssl_pretrained, tiny_synthetic };

inline const char* to_string(EncoderVariant v) {
  switch (v) {
    case EncoderVariant::task_trained: return "task_trained";
    case EncoderVariant::imagenet_pretrained: return "imagenet_pretrained";
    case EncoderVariant::ssl_pretrained: return "ssl_pretrained";
    case EncoderVariant::tiny_synthetic: return "tiny_synthetic";
  }
  return "?";
}

inline EncoderVariant parse_encoder_variant(const std::string& s) {
  for (auto v : {EncoderVariant::task_trained, EncoderVariant::imagenet_pretrained, EncoderVariant::ssl_pretrained,
                 EncoderVariant::tiny_synthetic})
    if (s == to_string(v)) return v;
  fail(ErrorKind::config, "unknown encoder variant '" + s +
                              "' (expected task_trained, imagenet_pretrained, ssl_pretrained or tiny_synthetic)");
}

inline bool is_pretrained(EncoderVariant v) {
  return v == EncoderVariant::imagenet_pretrained || v == EncoderVariant::ssl_pretrained;
}

struct EncoderConfig {
  EncoderVariant variant = EncoderVariant::tiny_synthetic;
  int embedding_dim = 32;
  int width = 8;
  int blocks = 4;
  std::optional<fs::path> weights_path;

  nn::EncoderArch arch() const { return {width, embedding_dim, blocks}; }

  void validate() const {
    require(embedding_dim > 0, ErrorKind::config, "embedding_dim must be positive");
    require(width > 0 && blocks >= 1, ErrorKind::config, "encoder width and blocks must be positive");
    if (is_pretrained(variant) && !weights_path)
      fail(ErrorKind::config, fmt::format("encoder variant {} requires weights_path", to_string(variant)));
  }

  json to_json() const {
    json j{{"variant", to_string(variant)}, {"embedding_dim", embedding_dim}, {"width", width}, {"blocks", blocks}};
    j["weights_path"] = weights_path ? json(weights_path->string()) : json(nullptr);
    return j;
  }

  static EncoderConfig from_json(const json& j) {
    EncoderConfig c;
    c.variant = parse_encoder_variant(j.at("variant").get<std::string>());
    c.embedding_dim = j.at("embedding_dim").get<int>();
    c.width = j.at("width").get<int>();
    c.blocks = j.at("blocks").get<int>();
    if (j.contains("weights_path") && !j.at("weights_path").is_null())
      c.weights_path = j.at("weights_path").get<std::string>();
    return c;
  }
};

inline constexpr const char* kCheckpointFormat = "reid-checkpoint/1";
inline constexpr const char* kEncoderWeightsFormat = "reid-encoder/1";

/// Serializes every visited tensor as {name: {shape, values}}.
template <typename Model>
json parameters_to_json(Model& model) {
  json out = json::object();
  model.visit([&](const std::string& name, std::span<float> values, std::span<float>, std::vector<int> shape) {
    out[name] = {{"shape", shape}, {"values", std::vector<float>(values.begin(), values.end())}};
  });
  return out;
}

/// Loads tensors whose names start with `prefix`; every such tensor must be present.
template <typename Model>
void parameters_from_json(Model& model, const json& params, const std::string& prefix = "") {
  model.visit([&](const std::string& name, std::span<float> values, std::span<float>, std::vector<int> shape) {
    if (name.rfind(prefix, 0) != 0) return;
    if (!params.contains(name)) fail(ErrorKind::data, "weights file lacks tensor " + name);
    const auto& entry = params.at(name);
    if (entry.at("shape").get<std::vector<int>>() != shape) fail(ErrorKind::data, "shape mismatch for tensor " + name);
    const auto v = entry.at("values").get<std::vector<float>>();
    if (v.size() != values.size()) fail(ErrorKind::data, "size mismatch for tensor " + name);
    std::copy(v.begin(), v.end(), values.begin());
  });
}

inline json read_json_file(const fs::path& path, const std::string& what) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, fmt::format("cannot open {} {}", what, path.string()));
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::data, fmt::format("corrupt {} {}: {}", what, path.string(), e.what()));
  }
}

inline void write_json_file(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << j.dump(1) << '\n';
}

inline void save_encoder_weights(const fs::path& path, nn::ResidualEncoder& encoder) {
  const auto& a = encoder.arch();
  write_json_file(path, {{"format", kEncoderWeightsFormat},
                         {"arch", {{"width", a.width}, {"embedding_dim", a.embedding_dim}, {"blocks", a.blocks}}},
                         {"parameters", parameters_to_json(encoder)}});
}

/// Loads encoder tensors from an encoder weights file or from any checkpoint.
inline void load_encoder_weights(const fs::path& path, nn::ResidualEncoder& encoder) {
  const json j = read_json_file(path, "encoder weights");
  try {
    const auto format = j.at("format").get<std::string>();
    if (format != kEncoderWeightsFormat && format != kCheckpointFormat)
      fail(ErrorKind::data, fmt::format("{} is not an encoder weights file (format '{}')", path.string(), format));
    parameters_from_json(encoder, j.at("parameters"), "encoder.");
  } catch (const json::exception& e) {
    fail(ErrorKind::data, fmt::format("corrupt encoder weights {}: {}", path.string(), e.what()));
  }
}

/// Architecture recorded in a weights file or checkpoint, if any.
inline std::optional<nn::EncoderArch> stored_arch(const fs::path& path) {
  const json j = read_json_file(path, "encoder weights");
  if (j.contains("arch")) {
    const auto& a = j.at("arch");
    return nn::EncoderArch{a.at("width").get<int>(), a.at("embedding_dim").get<int>(), a.at("blocks").get<int>()};
  }
  if (j.contains("encoder_config")) return EncoderConfig::from_json(j.at("encoder_config")).arch();
  return std::nullopt;
}

/// Builds the encoder; pretrained variants load weights_path, the others start
/// from a seeded initialization unless weights are given.
inline nn::ResidualEncoder build_encoder(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  nn::EncoderArch arch = config.arch();
  if (config.weights_path) {
    if (auto stored = stored_arch(*config.weights_path)) {
      if (stored->embedding_dim != config.embedding_dim)
        fail(ErrorKind::config, fmt::format("weights in {} have embedding_dim {}, config asks for {}",
                                            config.weights_path->string(), stored->embedding_dim,
                                            config.embedding_dim));
      arch = *stored;
    }
  }
  nn::ResidualEncoder encoder(arch);
  Rng rng(derive_seed(seed, "encoder-init"));
  encoder.init(rng);
  if (config.weights_path) load_encoder_weights(*config.weights_path, encoder);
  return encoder;
}

// ---------------------------------------------------------------------------
// Patch source

struct TilingConfig {
  int size_px = 512;
  double target_mpp = 0.88;
  double min_coverage = 0.7;
  int downscale = 32;
  int stride_px = 0;

  json to_json() const {
    return {{"size_px", size_px}, {"target_mpp", target_mpp}, {"min_coverage", min_coverage},
            {"downscale", downscale}, {"stride_px", stride_px}};
  }
};

/// Tissue patches of every slide in a manifest, read once and kept in memory.
class PatchSource {
 public:
  PatchSource() = default;

  static PatchSource build(const Manifest& manifest, const TilingConfig& cfg) {
    PatchSource src;
    for (const auto& e : manifest) {
      const Image img = read_image(e.image_path);
      const auto mask = tiling::build_tissue_mask(img, cfg.downscale);
      const tiling::SlideGeometry geo{e.slide_id, img.width, img.height, e.native_mpp};
      auto specs = tiling::enumerate_patches(geo, mask, cfg.size_px, cfg.target_mpp, cfg.stride_px, cfg.min_coverage);
      std::vector<RGBPatch> patches;
      patches.reserve(specs.size());
      for (const auto& s : specs) patches.push_back(tiling::read_patch(img, e.native_mpp, s));
      if (patches.empty()) logger()->warn("slide {} yields no tissue patches", e.slide_id);
      src.specs_[e.slide_id] = std::move(specs);
      src.patches_[e.slide_id] = std::move(patches);
    }
    return src;
  }

  void add(const std::string& slide_id, std::vector<RGBPatch> patches) { patches_[slide_id] = std::move(patches); }

  bool contains(const std::string& slide_id) const { return patches_.contains(slide_id); }

  const std::vector<RGBPatch>& patches(const std::string& slide_id) const {
    auto it = patches_.find(slide_id);
    if (it == patches_.end()) fail(ErrorKind::data, "no patches loaded for slide " + slide_id);
    return it->second;
  }

  const std::vector<tiling::PatchSpec>& specs(const std::string& slide_id) const {
    static const std::vector<tiling::PatchSpec> none;
    auto it = specs_.find(slide_id);
    return it == specs_.end() ? none : it->second;
  }

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& [_, p] : patches_) n += p.size();
    return n;
  }

 private:
  std::map<std::string, std::vector<RGBPatch>> patches_;
  std::map<std::string, std::vector<tiling::PatchSpec>> specs_;
};

/// Slide id -> class index.
using SlideLabels = std::map<std::string, int>;

inline SlideLabels labels_from_manifest(const Manifest& manifest, const PatientIndex& index) {
  SlideLabels labels;
  for (const auto& e : manifest) labels[e.slide_id] = index.class_of(e.patient_id);
  return labels;
}

// ---------------------------------------------------------------------------
// Training configuration and history

struct TrainingConfig {
  double learning_rate = 1e-4;
  int max_epochs = 60;
  int patience = 10;
  int batch_size = 16;
  int patches_per_slide = 16;      // training patches drawn per slide and epoch
  int val_patches_per_slide = 16;  // fixed validation sample per slide
  int bag_size = 40;
  int bags_per_slide = 2;          // MIL bags per training slide and epoch
  int bags_per_step = 4;
  int val_bags_per_slide = 2;
  int attention_hidden = 16;
  double stain_lambda = 0.2;
  double stain_epsilon = stain::kDefaultEpsilon;
  stain::MacenkoOptions macenko;
  bool flips = true;
  std::uint64_t seed = 0;

  void validate() const {
    require(learning_rate > 0, ErrorKind::config, "learning_rate must be positive");
    require(max_epochs >= 1, ErrorKind::config, "max_epochs must be at least 1");
    require(patience >= 1, ErrorKind::config, "patience must be at least 1");
    require(batch_size >= 1 && bags_per_step >= 1, ErrorKind::config, "batch sizes must be positive");
    require(patches_per_slide >= 1 && val_patches_per_slide >= 1, ErrorKind::config,
            "patches per slide must be positive");
    require(bag_size >= 1 && bags_per_slide >= 1 && val_bags_per_slide >= 1, ErrorKind::config,
            "bag settings must be positive");
    require(attention_hidden >= 1, ErrorKind::config, "attention_hidden must be positive");
    require(stain_lambda >= 0, ErrorKind::config, "stain lambda must be non-negative");
    require(stain_epsilon > 0 && stain_epsilon < 1, ErrorKind::config, "stain epsilon must be in (0, 1)");
    require(macenko.angle_percentile >= 0 && macenko.angle_percentile < 50, ErrorKind::config,
            "macenko angle_percentile must be in [0, 50)");
    require(macenko.concentration_percentile > 0 && macenko.concentration_percentile <= 100, ErrorKind::config,
            "macenko concentration_percentile must be in (0, 100]");
  }

  json to_json() const {
    return {{"learning_rate", learning_rate}, {"optimizer", "adam"}, {"loss", "cross_entropy"},
            {"max_epochs", max_epochs}, {"patience", patience}, {"batch_size", batch_size},
            {"patches_per_slide", patches_per_slide}, {"val_patches_per_slide", val_patches_per_slide},
            {"bag_size", bag_size}, {"bags_per_slide", bags_per_slide}, {"bags_per_step", bags_per_step},
            {"val_bags_per_slide", val_bags_per_slide}, {"attention_hidden", attention_hidden},
            {"stain_lambda", stain_lambda}, {"stain_epsilon", stain_epsilon},
            {"macenko", {{"od_floor", macenko.od_floor}, {"angle_percentile", macenko.angle_percentile},
                         {"concentration_percentile", macenko.concentration_percentile},
                         {"min_pixels", macenko.min_pixels}, {"min_separation_deg", macenko.min_separation_deg}}},
            {"flips", flips}, {"seed", seed}};
  }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_recall_at_1 = 0;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;

  double best_val_loss() const { return epochs.at(static_cast<std::size_t>(best_epoch)).val_loss; }
};

inline void write_history_csv(const fs::path& path, const TrainingHistory& h) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << "epoch,train_loss,val_loss,val_recall_at_1\n";
  for (const auto& e : h.epochs)
    out << fmt::format("{},{:.6f},{:.6f},{:.6f}\n", e.epoch, e.train_loss, e.val_loss, e.val_recall_at_1);
}

// ---------------------------------------------------------------------------
// Slide predictions

struct SlidePrediction {
  std::string slide_id;
  std::vector<double> class_scores;
  int predicted_class = -1;
  std::vector<int> topk;  // all classes, best first
};

/// Ranks by descending score, ties by ascending class index.
inline SlidePrediction make_prediction(std::string slide_id, std::vector<double> scores) {
  require(!scores.empty(), ErrorKind::invalid_input, "prediction needs at least one class score");
  SlidePrediction p;
  p.slide_id = std::move(slide_id);
  p.topk.resize(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) p.topk[i] = static_cast<int>(i);
  std::stable_sort(p.topk.begin(), p.topk.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  p.predicted_class = p.topk.front();
  p.class_scores = std::move(scores);
  return p;
}

enum class Aggregation { mean_probability, majority_vote };

/// Slide-level scores from per-patch probability vectors.
inline SlidePrediction aggregate_patch_probabilities(const std::string& slide_id,
                                                     const std::vector<std::vector<double>>& probs,
                                                     Aggregation mode = Aggregation::mean_probability) {
  require(!probs.empty(), ErrorKind::invalid_input, "slide " + slide_id + " has no patches to aggregate");
  const std::size_t n = probs.front().size();
  std::vector<double> scores(n, 0.0);
  for (const auto& p : probs) {
    require(p.size() == n, ErrorKind::invalid_input, "inconsistent class count across patches");
    if (mode == Aggregation::mean_probability) {
      for (std::size_t c = 0; c < n; ++c) scores[c] += p[c];
    } else {
      const auto best = std::max_element(p.begin(), p.end()) - p.begin();
      scores[static_cast<std::size_t>(best)] += 1.0;
    }
  }
  for (auto& s : scores) s /= static_cast<double>(probs.size());
  return make_prediction(slide_id, std::move(scores));
}

// ---------------------------------------------------------------------------
// Patch classifier

/// Encoder followed by a fully connected N-way layer.
struct PatchClassifier {
  EncoderConfig encoder_config;
  nn::ResidualEncoder encoder;
  nn::Linear head;

  PatchClassifier() = default;
  PatchClassifier(const EncoderConfig& cfg, nn::ResidualEncoder enc, int n_classes)
      : encoder_config(cfg), encoder(std::move(enc)), head(encoder.embedding_dim(), n_classes) {}

  int n_classes() const { return head.out_features(); }

  void visit(const nn::ParamVisitor& f) {
    encoder.visit(f);
    head.visit("classifier", f);
  }

  std::vector<double> probabilities(const RGBPatch& patch) const {
    const nn::VectorF p = nn::softmax<float>(head.forward(encoder.forward(patch)));
    return {p.data(), p.data() + p.size()};
  }
};

inline SlidePrediction predict_slide_patchwise(const PatchClassifier& model, const std::string& slide_id,
                                               const std::vector<RGBPatch>& patches,
                                               Aggregation mode = Aggregation::mean_probability) {
  require(!patches.empty(), ErrorKind::invalid_input, "slide " + slide_id + " has no patches to predict");
  std::vector<std::vector<double>> probs;
  probs.reserve(patches.size());
  for (const auto& p : patches) probs.push_back(model.probabilities(p));
  return aggregate_patch_probabilities(slide_id, probs, mode);
}

namespace detail {

inline RGBPatch augment(const RGBPatch& patch, const TrainingConfig& cfg, Rng& rng) {
  RGBPatch out = cfg.stain_lambda > 0 ? stain::augment_stain(patch, cfg.stain_lambda, rng, cfg.macenko, nullptr, cfg.stain_epsilon)
                                     : patch;
  return cfg.flips ? stain::random_flip(out, rng) : out;
}

inline void check_finite(double loss, const std::string& where, const TrainingConfig& cfg, double last_finite) {
  if (!std::isfinite(loss))
    fail(ErrorKind::numeric, fmt::format("training diverged: non-finite loss at {} (learning_rate {}, last finite "
                                         "epoch loss {:.6f}); lower the learning rate",
                                         where, cfg.learning_rate, last_finite));
}

/// Fixed, seeded sample of patch indices per slide.
inline std::map<std::string, std::vector<std::size_t>> fixed_sample(const PatchSource& source,
                                                                    const std::set<std::string>& slides,
                                                                    int per_slide, std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> out;
  for (const auto& s : slides) {
    Rng rng(derive_seed(seed, s));
    auto idx = rng.sample_without_replacement(source.patches(s).size(), static_cast<std::size_t>(per_slide));
    std::sort(idx.begin(), idx.end());
    out[s] = std::move(idx);
  }
  return out;
}

inline void require_trainable(const PatchSource& source, const SplitAssignment& split, const SlideLabels& labels,
                              int n_classes) {
  require(n_classes >= 1, ErrorKind::invalid_input, "need at least one class");
  std::vector<bool> seen(static_cast<std::size_t>(n_classes), false);
  std::size_t total = 0;
  for (const auto& s : split.train) {
    const auto& p = source.patches(s);
    total += p.size();
    auto it = labels.find(s);
    if (it == labels.end()) fail(ErrorKind::data, "no label for training slide " + s);
    require(it->second >= 0 && it->second < n_classes, ErrorKind::data, "label out of range for slide " + s);
    if (!p.empty()) seen[static_cast<std::size_t>(it->second)] = true;
  }
  require(total > 0, ErrorKind::data, "training set is empty: no tissue patches on training slides");
  for (int c = 0; c < n_classes; ++c)
    if (!seen[static_cast<std::size_t>(c)])
      fail(ErrorKind::data, fmt::format("class {} has no training patches", c));
}

inline double recall_at_1(const std::vector<SlidePrediction>& preds, const SlideLabels& labels) {
  if (preds.empty()) return 0.0;
  std::map<int, std::pair<int, int>> per_class;  // hits, total
  for (const auto& p : preds) {
    const int truth = labels.at(p.slide_id);
    auto& [hits, total] = per_class[truth];
    ++total;
    if (p.predicted_class == truth) ++hits;
  }
  double acc = 0;
  for (const auto& [_, ht] : per_class) acc += static_cast<double>(ht.first) / ht.second;
  return acc / static_cast<double>(per_class.size());
}

}  // namespace detail

struct TrainedPatchModel {
  PatchClassifier model;
  TrainingHistory history;
};

/// Trains encoder and head on stain-augmented, flipped patches; keeps the epoch with minimal validation loss.
inline TrainedPatchModel train_patch_classifier(const PatchSource& source, const SplitAssignment& split,
                                                const SlideLabels& labels, int n_classes,
                                                const EncoderConfig& encoder_config, const TrainingConfig& cfg) {
  cfg.validate();
  detail::require_trainable(source, split, labels, n_classes);

  TrainedPatchModel result{PatchClassifier(encoder_config, build_encoder(encoder_config, cfg.seed), n_classes), {}};
  PatchClassifier& model = result.model;
  {
    Rng rng(derive_seed(cfg.seed, "head-init"));
    model.head.init(rng);
  }
  nn::ParamSet params;
  model.visit(params.collector());
  nn::Adam adam({.learning_rate = cfg.learning_rate});
  adam.bind(params.values, params.grads);

  // Without validation slides the training loss drives selection.
  const bool has_val = !split.val.empty();
  if (!has_val) logger()->warn("no validation slides; model selection falls back to training loss");
  const auto val_sample = detail::fixed_sample(source, split.val, cfg.val_patches_per_slide,
                                               derive_seed(cfg.seed, "val-sample"));

  Rng sampler(derive_seed(cfg.seed, "sampling"));
  Rng aug_rng(derive_seed(cfg.seed, "augmentation"));
  std::vector<float> best = params.snapshot();
  double best_loss = std::numeric_limits<double>::infinity();
  double last_finite = std::numeric_limits<double>::quiet_NaN();
  int since_best = 0;
  nn::ResidualEncoder::Tape tape;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::vector<std::pair<const RGBPatch*, int>> items;
    for (const auto& s : split.train) {
      const auto& patches = source.patches(s);
      if (patches.empty()) continue;
      const int label = labels.at(s);
      if (patches.size() >= static_cast<std::size_t>(cfg.patches_per_slide)) {
        for (auto i : sampler.sample_without_replacement(patches.size(), static_cast<std::size_t>(cfg.patches_per_slide)))
          items.emplace_back(&patches[i], label);
      } else {
        for (int k = 0; k < cfg.patches_per_slide; ++k) items.emplace_back(&patches[sampler.below(patches.size())], label);
      }
    }
    sampler.shuffle(items);

    double train_loss = 0;
    for (std::size_t start = 0; start < items.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(items.size(), start + static_cast<std::size_t>(cfg.batch_size));
      adam.zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        const RGBPatch input = detail::augment(*items[i].first, cfg, aug_rng);
        const nn::VectorF emb = model.encoder.forward(input, tape);
        nn::VectorF dlogits;
        const double loss = nn::cross_entropy<float>(model.head.forward(emb), items[i].second, &dlogits);
        detail::check_finite(loss, fmt::format("epoch {} step {}", epoch, start / cfg.batch_size), cfg, last_finite);
        train_loss += loss;
        model.encoder.backward(model.head.backward(dlogits, emb), tape);
      }
      adam.step(1.0f / static_cast<float>(end - start));
    }
    train_loss /= static_cast<double>(items.size());
    detail::check_finite(train_loss, fmt::format("epoch {}", epoch), cfg, last_finite);
    last_finite = train_loss;

    EpochRecord rec{epoch, train_loss, train_loss, 0.0};
    if (has_val) {
      double val_loss = 0;
      std::size_t n = 0;
      std::vector<SlidePrediction> preds;
      for (const auto& [slide, idx] : val_sample) {
        if (idx.empty()) continue;
        const auto& patches = source.patches(slide);
        const int label = labels.at(slide);
        std::vector<std::vector<double>> probs;
        for (auto i : idx) {
          const nn::VectorF logits = model.head.forward(model.encoder.forward(patches[i]));
          val_loss += nn::cross_entropy<float>(logits, label);
          const nn::VectorF p = nn::softmax<float>(logits);
          probs.emplace_back(p.data(), p.data() + p.size());
          ++n;
        }
        preds.push_back(aggregate_patch_probabilities(slide, probs));
      }
      rec.val_loss = n ? val_loss / static_cast<double>(n) : train_loss;
      rec.val_recall_at_1 = detail::recall_at_1(preds, labels);
      detail::check_finite(rec.val_loss, fmt::format("epoch {} validation", epoch), cfg, last_finite);
    }
    result.history.epochs.push_back(rec);
    logger()->debug("epoch {} train {:.4f} val {:.4f} recall@1 {:.3f}", epoch, rec.train_loss, rec.val_loss,
                    rec.val_recall_at_1);

    if (rec.val_loss < best_loss) {
      best_loss = rec.val_loss;
      best = params.snapshot();
      result.history.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  params.restore(best);
  return result;
}

// ---------------------------------------------------------------------------
// Multiple instance learning

struct Bag {
  std::string slide_id;
  std::vector<RGBPatch> instances;
  int label = -1;
};

/// Indices for `n_bags` bags: without replacement when the slide has enough patches.
inline std::vector<std::vector<std::size_t>> make_bag_indices(std::size_t n_patches, int bag_size, int n_bags,
                                                              Rng& rng) {
  require(n_patches > 0, ErrorKind::invalid_input, "cannot build a bag from a slide without patches");
  require(bag_size >= 1 && n_bags >= 0, ErrorKind::invalid_input, "invalid bag settings");
  const auto k = static_cast<std::size_t>(bag_size);
  std::vector<std::vector<std::size_t>> bags(static_cast<std::size_t>(n_bags));
  for (auto& b : bags) {
    if (n_patches >= k) {
      b = rng.sample_without_replacement(n_patches, k);
    } else {
      b.resize(k);
      for (auto& i : b) i = rng.below(n_patches);
    }
  }
  return bags;
}

inline std::vector<Bag> make_bags(const std::string& slide_id, const std::vector<RGBPatch>& patches, int label,
                                  int bag_size, int n_bags, Rng& rng) {
  std::vector<Bag> out;
  for (const auto& idx : make_bag_indices(patches.size(), bag_size, n_bags, rng)) {
    Bag b{slide_id, {}, label};
    b.instances.reserve(idx.size());
    for (auto i : idx) b.instances.push_back(patches[i]);
    out.push_back(std::move(b));
  }
  return out;
}

/// Frozen encoder, gated attention pooling and an N-way classifier.
struct MilModel {
  EncoderConfig encoder_config;
  nn::ResidualEncoder encoder;
  nn::GatedAttentionHead<float> head;

  MilModel() = default;
  MilModel(const EncoderConfig& cfg, nn::ResidualEncoder enc, int hidden, int n_classes)
      : encoder_config(cfg), encoder(std::move(enc)), head(encoder.embedding_dim(), hidden, n_classes) {}

  int n_classes() const { return head.classes(); }

  /// Every tensor, encoder included, for checkpoints.
  void visit(const nn::ParamVisitor& f) {
    encoder.visit(f);
    head.visit(f);
  }

  nn::GatedAttentionHead<float>::Forward forward_embeddings(const nn::MatrixF& embeddings) const {
    return head.forward(embeddings);
  }
};

/// Row i is the evaluation-mode embedding of patch i.
inline nn::MatrixF embed_patches(const nn::ResidualEncoder& encoder, const std::vector<RGBPatch>& patches) {
  nn::MatrixF out(static_cast<Eigen::Index>(patches.size()), encoder.embedding_dim());
  for (std::size_t i = 0; i < patches.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = encoder.forward(patches[i]).transpose();
  return out;
}

inline SlidePrediction predict_slide_mil(const MilModel& model, const std::string& slide_id,
                                         const std::vector<RGBPatch>& patches, std::size_t cap = 500,
                                         std::uint64_t seed = 0) {
  require(!patches.empty(), ErrorKind::invalid_input, "slide " + slide_id + " has no patches to predict");
  require(cap >= 1, ErrorKind::invalid_input, "bag cap must be positive");
  std::vector<std::size_t> idx;
  if (patches.size() > cap) {
    Rng rng(derive_seed(seed, slide_id));
    idx = rng.sample_without_replacement(patches.size(), cap);
    std::sort(idx.begin(), idx.end());
  } else {
    idx.resize(patches.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  }
  nn::MatrixF emb(static_cast<Eigen::Index>(idx.size()), model.encoder.embedding_dim());
  for (std::size_t r = 0; r < idx.size(); ++r)
    emb.row(static_cast<Eigen::Index>(r)) = model.encoder.forward(patches[idx[r]]).transpose();
  const nn::VectorF p = nn::softmax<float>(model.head.forward(emb).logits);
  return make_prediction(slide_id, std::vector<double>(p.data(), p.data() + p.size()));
}

struct TrainedMilModel {
  MilModel model;
  TrainingHistory history;
};

/// Trains attention and classifier on bags; each instance is augmented separately, the encoder stays fixed.
inline TrainedMilModel train_mil(const PatchSource& source, const SplitAssignment& split, const SlideLabels& labels,
                                 int n_classes, const EncoderConfig& encoder_config,
                                 const nn::ResidualEncoder& encoder, const TrainingConfig& cfg) {
  cfg.validate();
  detail::require_trainable(source, split, labels, n_classes);
  TrainedMilModel result{MilModel(encoder_config, encoder, cfg.attention_hidden, n_classes), {}};
  MilModel& model = result.model;
  {
    Rng rng(derive_seed(cfg.seed, "attention-init"));
    model.head.init(rng);
  }
  nn::ParamSet params;
  model.head.visit(params.collector());
  nn::Adam adam({.learning_rate = cfg.learning_rate});
  adam.bind(params.values, params.grads);

  const bool has_val = !split.val.empty();
  if (!has_val) logger()->warn("no validation slides; model selection falls back to training loss");

  // Validation bags are fixed and unaugmented, so their embeddings are computed once.
  struct ValBag {
    std::string slide;
    int label;
    nn::MatrixF embeddings;
  };
  std::vector<ValBag> val_bags;
  {
    Rng rng(derive_seed(cfg.seed, "val-bags"));
    for (const auto& s : split.val) {
      const auto& patches = source.patches(s);
      if (patches.empty()) continue;
      const nn::MatrixF all = embed_patches(model.encoder, patches);
      for (const auto& idx : make_bag_indices(patches.size(), cfg.bag_size, cfg.val_bags_per_slide, rng)) {
        nn::MatrixF e(static_cast<Eigen::Index>(idx.size()), all.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) e.row(static_cast<Eigen::Index>(r)) = all.row(static_cast<Eigen::Index>(idx[r]));
        val_bags.push_back({s, labels.at(s), std::move(e)});
      }
    }
  }

  Rng sampler(derive_seed(cfg.seed, "bags"));
  Rng aug_rng(derive_seed(cfg.seed, "augmentation"));
  std::vector<float> best = params.snapshot();
  double best_loss = std::numeric_limits<double>::infinity();
  double last_finite = std::numeric_limits<double>::quiet_NaN();
  int since_best = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::vector<std::pair<std::string, std::vector<std::size_t>>> bags;
    for (const auto& s : split.train) {
      const auto& patches = source.patches(s);
      if (patches.empty()) continue;
      for (auto& idx : make_bag_indices(patches.size(), cfg.bag_size, cfg.bags_per_slide, sampler))
        bags.emplace_back(s, std::move(idx));
    }
    sampler.shuffle(bags);

    double train_loss = 0;
    for (std::size_t start = 0; start < bags.size(); start += static_cast<std::size_t>(cfg.bags_per_step)) {
      const std::size_t end = std::min(bags.size(), start + static_cast<std::size_t>(cfg.bags_per_step));
      model.head.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const auto& [slide, idx] = bags[b];
        const auto& patches = source.patches(slide);
        nn::MatrixF emb(static_cast<Eigen::Index>(idx.size()), model.encoder.embedding_dim());
        for (std::size_t r = 0; r < idx.size(); ++r)
          emb.row(static_cast<Eigen::Index>(r)) =
              model.encoder.forward(detail::augment(patches[idx[r]], cfg, aug_rng)).transpose();
        const auto f = model.head.forward(emb);
        nn::VectorF dlogits;
        const double loss = nn::cross_entropy<float>(f.logits, labels.at(slide), &dlogits);
        detail::check_finite(loss, fmt::format("epoch {} bag {}", epoch, b), cfg, last_finite);
        train_loss += loss;
        model.head.accumulate(model.head.backward(f, dlogits));
      }
      adam.step(1.0f / static_cast<float>(end - start));
    }
    train_loss /= static_cast<double>(bags.size());
    detail::check_finite(train_loss, fmt::format("epoch {}", epoch), cfg, last_finite);
    last_finite = train_loss;

    EpochRecord rec{epoch, train_loss, train_loss, 0.0};
    if (has_val && !val_bags.empty()) {
      double val_loss = 0;
      std::map<std::string, std::vector<std::vector<double>>> probs;
      for (const auto& vb : val_bags) {
        const nn::VectorF logits = model.head.forward(vb.embeddings).logits;
        val_loss += nn::cross_entropy<float>(logits, vb.label);
        const nn::VectorF p = nn::softmax<float>(logits);
        probs[vb.slide].emplace_back(p.data(), p.data() + p.size());
      }
      std::vector<SlidePrediction> preds;
      for (const auto& [slide, pr] : probs) preds.push_back(aggregate_patch_probabilities(slide, pr));
      rec.val_loss = val_loss / static_cast<double>(val_bags.size());
      rec.val_recall_at_1 = detail::recall_at_1(preds, labels);
      detail::check_finite(rec.val_loss, fmt::format("epoch {} validation", epoch), cfg, last_finite);
    }
    result.history.epochs.push_back(rec);
    logger()->debug("mil epoch {} train {:.4f} val {:.4f} recall@1 {:.3f}", epoch, rec.train_loss, rec.val_loss,
                    rec.val_recall_at_1);

    if (rec.val_loss < best_loss) {
      best_loss = rec.val_loss;
      best = params.snapshot();
      result.history.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  params.restore(best);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointMeta {
  std::string kind;  // "patch" or "mil"
  EncoderConfig encoder_config;
  json training_config;
  PatientIndex patients;
  std::string split_fingerprint;
  int attention_hidden = 0;
};

template <typename Model>
void save_checkpoint(const fs::path& path, Model& model, const CheckpointMeta& meta) {
  json j{{"format", kCheckpointFormat},
         {"kind", meta.kind},
         {"encoder_config", meta.encoder_config.to_json()},
         {"arch",
          {{"width", model.encoder.arch().width},
           {"embedding_dim", model.encoder.arch().embedding_dim},
           {"blocks", model.encoder.arch().blocks}}},
         {"training_config", meta.training_config},
         {"patient_index", meta.patients.to_json()},
         {"split_fingerprint", meta.split_fingerprint},
         {"n_classes", model.n_classes()},
         {"attention_hidden", meta.attention_hidden},
         {"parameters", parameters_to_json(model)}};
  write_json_file(path, j);
}

inline CheckpointMeta read_checkpoint_meta(const json& j, const fs::path& path) {
  if (!j.contains("format") || j.at("format") != kCheckpointFormat)
    fail(ErrorKind::data, path.string() + " is not a checkpoint");
  CheckpointMeta m;
  m.kind = j.at("kind").get<std::string>();
  m.encoder_config = EncoderConfig::from_json(j.at("encoder_config"));
  m.training_config = j.at("training_config");
  m.patients = PatientIndex::from_json(j.at("patient_index"));
  m.split_fingerprint = j.at("split_fingerprint").get<std::string>();
  m.attention_hidden = j.value("attention_hidden", 0);
  return m;
}

namespace detail {
inline nn::EncoderArch arch_of(const json& j) {
  const auto& a = j.at("arch");
  return {a.at("width").get<int>(), a.at("embedding_dim").get<int>(), a.at("blocks").get<int>()};
}
}  // namespace detail

inline std::pair<PatchClassifier, CheckpointMeta> load_patch_checkpoint(const fs::path& path) {
  const json j = read_json_file(path, "checkpoint");
  try {
    auto meta = read_checkpoint_meta(j, path);
    if (meta.kind != "patch") fail(ErrorKind::data, path.string() + " holds a " + meta.kind + " model, not patch");
    PatchClassifier model(meta.encoder_config, nn::ResidualEncoder(detail::arch_of(j)), j.at("n_classes").get<int>());
    parameters_from_json(model, j.at("parameters"));
    return {std::move(model), std::move(meta)};
  } catch (const json::exception& e) {
    fail(ErrorKind::data, fmt::format("corrupt checkpoint {}: {}", path.string(), e.what()));
  }
}

inline std::pair<MilModel, CheckpointMeta> load_mil_checkpoint(const fs::path& path) {
  const json j = read_json_file(path, "checkpoint");
  try {
    auto meta = read_checkpoint_meta(j, path);
    if (meta.kind != "mil") fail(ErrorKind::data, path.string() + " holds a " + meta.kind + " model, not mil");
    MilModel model(meta.encoder_config, nn::ResidualEncoder(detail::arch_of(j)), meta.attention_hidden,
                   j.at("n_classes").get<int>());
    parameters_from_json(model, j.at("parameters"));
    return {std::move(model), std::move(meta)};
  } catch (const json::exception& e) {
    fail(ErrorKind::data, fmt::format("corrupt checkpoint {}: {}", path.string(), e.what()));
  }
}

}  // namespace reid::models
