#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "reid/core/error.hpp"
#include "reid/core/rng.hpp"

namespace reid::nn {

using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorF = Eigen::VectorXf;

/// Activation volume: one row per channel, spatial positions row-major.
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  MatrixF data;

  FeatureMap() = default;
  FeatureMap(int c, int h, int w) : channels(c), height(h), width(w), data(MatrixF::Zero(c, h * w)) {}
};

/// Visitor over trainable tensors: (name, values, gradients, shape).
using ParamVisitor =
    std::function<void(const std::string&, std::span<float>, std::span<float>, std::vector<int>)>;

inline void he_init(std::span<float> values, int fan_in, Rng& rng, double gain = 1.0) {
  const double sd = gain * std::sqrt(2.0 / fan_in);
  for (auto& v : values) v = static_cast<float>(rng.normal(0.0, sd));
}

/// Square convolution via im2col + GEMM.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in, int out, int kernel, int stride, int pad)
      : in_(in), out_(out), kernel_(kernel), stride_(stride), pad_(pad),
        weight_(MatrixF::Zero(out, in * kernel * kernel)), bias_(VectorF::Zero(out)),
        grad_weight_(MatrixF::Zero(out, in * kernel * kernel)), grad_bias_(VectorF::Zero(out)) {}

  void init(Rng& rng, double gain = 1.0) {
    he_init({weight_.data(), static_cast<std::size_t>(weight_.size())}, in_ * kernel_ * kernel_, rng, gain);
    bias_.setZero();
  }

  int out_size(int n) const { return (n + 2 * pad_ - kernel_) / stride_ + 1; }

  /// Returns the output; `cols` receives the unfolded input for backward.
  FeatureMap forward(const FeatureMap& x, MatrixF& cols) const {
    if (x.channels != in_) fail(ErrorKind::invalid_input, "conv input channel mismatch");
    const int ho = out_size(x.height), wo = out_size(x.width);
    im2col(x, ho, wo, cols);
    FeatureMap y(out_, ho, wo);
    y.data.noalias() = weight_ * cols;
    y.data.colwise() += bias_;
    return y;
  }

  /// Accumulates parameter gradients; returns the gradient w.r.t. the input.
  FeatureMap backward(const FeatureMap& grad_out, const MatrixF& cols, int in_h, int in_w, bool need_input_grad = true) {
    grad_weight_.noalias() += grad_out.data * cols.transpose();
    grad_bias_ += grad_out.data.rowwise().sum();
    FeatureMap grad_in(in_, in_h, in_w);
    if (need_input_grad) {
      const MatrixF dcols = weight_.transpose() * grad_out.data;
      col2im(dcols, grad_out.height, grad_out.width, grad_in);
    }
    return grad_in;
  }

  void visit(const std::string& prefix, const ParamVisitor& f) {
    f(prefix + ".weight", {weight_.data(), static_cast<std::size_t>(weight_.size())},
      {grad_weight_.data(), static_cast<std::size_t>(grad_weight_.size())}, {out_, in_, kernel_, kernel_});
    f(prefix + ".bias", {bias_.data(), static_cast<std::size_t>(bias_.size())},
      {grad_bias_.data(), static_cast<std::size_t>(grad_bias_.size())}, {out_});
  }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

 private:
  void im2col(const FeatureMap& x, int ho, int wo, MatrixF& cols) const {
    const int k = kernel_;
    cols.setZero(in_ * k * k, ho * wo);
    for (int c = 0; c < in_; ++c) {
      const float* plane = x.data.row(c).data();
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          float* row = cols.row((c * k + ky) * k + kx).data();
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= x.height) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < x.width) row[oy * wo + ox] = plane[iy * x.width + ix];
            }
          }
        }
    }
  }

  void col2im(const MatrixF& dcols, int ho, int wo, FeatureMap& grad_in) const {
    const int k = kernel_;
    for (int c = 0; c < in_; ++c) {
      float* plane = grad_in.data.row(c).data();
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const float* row = dcols.row((c * k + ky) * k + kx).data();
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= grad_in.height) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < grad_in.width) plane[iy * grad_in.width + ix] += row[oy * wo + ox];
            }
          }
        }
    }
  }

  int in_ = 0, out_ = 0, kernel_ = 3, stride_ = 1, pad_ = 1;
  MatrixF weight_;
  VectorF bias_;
  MatrixF grad_weight_;
  VectorF grad_bias_;
};

/// Fully connected layer y = W x + b.
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out)
      : weight_(MatrixF::Zero(out, in)), bias_(VectorF::Zero(out)), grad_weight_(MatrixF::Zero(out, in)),
        grad_bias_(VectorF::Zero(out)) {}

  void init(Rng& rng) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(weight_.cols()));
    for (Eigen::Index i = 0; i < weight_.size(); ++i) weight_.data()[i] = static_cast<float>(rng.normal(0.0, sd));
    bias_.setZero();
  }

  VectorF forward(const VectorF& x) const { return weight_ * x + bias_; }

  VectorF backward(const VectorF& grad_out, const VectorF& x) {
    grad_weight_.noalias() += grad_out * x.transpose();
    grad_bias_ += grad_out;
    return weight_.transpose() * grad_out;
  }

  void visit(const std::string& prefix, const ParamVisitor& f) {
    const int out = static_cast<int>(weight_.rows()), in = static_cast<int>(weight_.cols());
    f(prefix + ".weight", {weight_.data(), static_cast<std::size_t>(weight_.size())},
      {grad_weight_.data(), static_cast<std::size_t>(grad_weight_.size())}, {out, in});
    f(prefix + ".bias", {bias_.data(), static_cast<std::size_t>(bias_.size())},
      {grad_bias_.data(), static_cast<std::size_t>(grad_bias_.size())}, {out});
  }

  int in_features() const { return static_cast<int>(weight_.cols()); }
  int out_features() const { return static_cast<int>(weight_.rows()); }

 private:
  MatrixF weight_;
  VectorF bias_;
  MatrixF grad_weight_;
  VectorF grad_bias_;
};

inline void relu_inplace(MatrixF& m) { m = m.cwiseMax(0.0f); }

/// grad *= (activation > 0)
inline void relu_backward(MatrixF& grad, const MatrixF& activation) {
  grad = (activation.array() > 0.0f).select(grad, 0.0f);
}

}  // namespace reid::nn
