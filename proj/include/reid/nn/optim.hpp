#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "reid/core/error.hpp"
#include "reid/nn/layers.hpp"

namespace reid::nn {

template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> softmax(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& logits) {
  const Scalar shift = logits.maxCoeff();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> e = (logits.array() - shift).exp();
  return e / e.sum();
}

/// Cross-entropy of softmax(logits) against `label`; writes d(loss)/d(logits).
template <typename Scalar>
Scalar cross_entropy(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& logits, int label,
                     Eigen::Matrix<Scalar, Eigen::Dynamic, 1>* grad = nullptr) {
  const Scalar shift = logits.maxCoeff();
  const Scalar lse = shift + std::log((logits.array() - shift).exp().sum());
  if (grad) {
    *grad = (logits.array() - lse).exp().matrix();
    (*grad)(label) -= Scalar(1);
  }
  return lse - logits(label);
}

/// Adam over an ordered list of parameter tensors.
class Adam {
 public:
  struct Options {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  explicit Adam(Options options) : opt_(options) {
    require(opt_.learning_rate > 0, ErrorKind::invalid_input, "learning rate must be positive");
  }

  void bind(std::vector<std::span<float>> values, std::vector<std::span<float>> grads) {
    values_ = std::move(values);
    grads_ = std::move(grads);
    m_.clear();
    v_.clear();
    for (const auto& v : values_) {
      m_.emplace_back(v.size(), 0.0f);
      v_.emplace_back(v.size(), 0.0f);
    }
    step_ = 0;
  }

  /// One update using gradients scaled by `grad_scale`.
  void step(float grad_scale = 1.0f) {
    ++step_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, step_);
    const double bc2 = 1.0 - std::pow(opt_.beta2, step_);
    const float lr = static_cast<float>(opt_.learning_rate * std::sqrt(bc2) / bc1);
    const float b1 = static_cast<float>(opt_.beta1), b2 = static_cast<float>(opt_.beta2);
    const float eps = static_cast<float>(opt_.epsilon * std::sqrt(bc2));
    for (std::size_t t = 0; t < values_.size(); ++t) {
      auto& m = m_[t];
      auto& v = v_[t];
      for (std::size_t i = 0; i < values_[t].size(); ++i) {
        const float g = grads_[t][i] * grad_scale;
        m[i] = b1 * m[i] + (1 - b1) * g;
        v[i] = b2 * v[i] + (1 - b2) * g * g;
        values_[t][i] -= lr * m[i] / (std::sqrt(v[i]) + eps);
      }
    }
  }

  void zero_grad() {
    for (auto& g : grads_) std::fill(g.begin(), g.end(), 0.0f);
  }

  int steps() const { return step_; }

 private:
  Options opt_;
  std::vector<std::span<float>> values_, grads_;
  std::vector<std::vector<float>> m_, v_;
  int step_ = 0;
};

/// Collects parameter spans from anything exposing visit(ParamVisitor).
struct ParamSet {
  std::vector<std::string> names;
  std::vector<std::span<float>> values;
  std::vector<std::span<float>> grads;
  std::vector<std::vector<int>> shapes;

  ParamVisitor collector() {
    return [this](const std::string& name, std::span<float> v, std::span<float> g, std::vector<int> shape) {
      names.push_back(name);
      values.push_back(v);
      grads.push_back(g);
      shapes.push_back(std::move(shape));
    };
  }

  std::vector<float> snapshot() const {
    std::vector<float> flat;
    for (const auto& v : values) flat.insert(flat.end(), v.begin(), v.end());
    return flat;
  }

  void restore(const std::vector<float>& flat) {
    std::size_t offset = 0;
    for (auto& v : values) {
      require(offset + v.size() <= flat.size(), ErrorKind::data, "parameter snapshot too short");
      std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), v.size(), v.begin());
      offset += v.size();
    }
    require(offset == flat.size(), ErrorKind::data, "parameter snapshot size mismatch");
  }

  bool all_finite() const {
    for (const auto& v : values)
      for (float x : v)
        if (!std::isfinite(x)) return false;
    return true;
  }
};

}  // namespace reid::nn
