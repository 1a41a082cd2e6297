#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "reid/core/rng.hpp"
#include "reid/nn/optim.hpp"

namespace reid::nn {

/// Gated attention MIL pooling followed by a linear N-way classifier.
///
///   score_i = w . (tanh(V h_i + b_V) * sigmoid(U h_i + b_U))
///   a       = softmax(score)
///   z       = sum_i a_i h_i
///   logits  = W_c z + b_c
///
/// A scalar bias on the score is omitted: softmax is invariant to it.
template <typename Scalar>
class GatedAttentionHead {
 public:
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  struct Forward {
    Mat instances;  // n x d
    Mat tanh_branch;
    Mat gate_branch;
    Vec scores;
    Vec weights;
    Vec pooled;
    Vec logits;
  };

  struct Grads {
    Mat V, U, Wc;
    Vec bV, bU, w, bc;
    Mat instances;
  };

  GatedAttentionHead() = default;
  GatedAttentionHead(int dim, int hidden, int classes)
      : V(Mat::Zero(hidden, dim)), U(Mat::Zero(hidden, dim)), Wc(Mat::Zero(classes, dim)), bV(Vec::Zero(hidden)),
        bU(Vec::Zero(hidden)), w(Vec::Zero(hidden)), bc(Vec::Zero(classes)) {
    zero_grad();
  }

  int dim() const { return static_cast<int>(V.cols()); }
  int hidden() const { return static_cast<int>(V.rows()); }
  int classes() const { return static_cast<int>(Wc.rows()); }

  void init(Rng& rng) {
    auto fill = [&](auto& m, double sd) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(rng.normal(0.0, sd));
    };
    fill(V, 1.0 / std::sqrt(static_cast<double>(dim())));
    fill(U, 1.0 / std::sqrt(static_cast<double>(dim())));
    fill(w, 1.0 / std::sqrt(static_cast<double>(hidden())));
    fill(Wc, 1.0 / std::sqrt(static_cast<double>(dim())));
    bV.setZero();
    bU.setZero();
    bc.setZero();
  }

  Forward forward(const Mat& instances) const {
    require(instances.rows() >= 1, ErrorKind::invalid_input, "attention pooling needs at least one instance");
    Forward f;
    f.instances = instances;
    f.tanh_branch = ((instances * V.transpose()).rowwise() + bV.transpose()).array().tanh();
    f.gate_branch =
        (((instances * U.transpose()).rowwise() + bU.transpose()).array() * Scalar(-1)).exp().unaryExpr(
            [](Scalar e) { return Scalar(1) / (Scalar(1) + e); });
    f.scores = (f.tanh_branch.array() * f.gate_branch.array()).matrix() * w;
    f.weights = softmax<Scalar>(f.scores);
    f.pooled = instances.transpose() * f.weights;
    f.logits = Wc * f.pooled + bc;
    return f;
  }

  /// Gradients of a loss with d(loss)/d(logits) = grad_logits.
  Grads backward(const Forward& f, const Vec& grad_logits) const {
    Grads g;
    g.Wc = grad_logits * f.pooled.transpose();
    g.bc = grad_logits;
    const Vec d_pooled = Wc.transpose() * grad_logits;
    const Vec d_weights = f.instances * d_pooled;
    const Scalar mean_dw = f.weights.dot(d_weights);
    const Vec d_scores = (f.weights.array() * (d_weights.array() - mean_dw)).matrix();

    const Mat gated = (f.tanh_branch.array() * f.gate_branch.array()).matrix();
    g.w = gated.transpose() * d_scores;
    const Mat d_gated = d_scores * w.transpose();
    const Mat d_pre_tanh =
        (d_gated.array() * f.gate_branch.array() * (Scalar(1) - f.tanh_branch.array().square())).matrix();
    const Mat d_pre_gate = (d_gated.array() * f.tanh_branch.array() * f.gate_branch.array() *
                            (Scalar(1) - f.gate_branch.array()))
                               .matrix();
    g.V = d_pre_tanh.transpose() * f.instances;
    g.bV = d_pre_tanh.colwise().sum().transpose();
    g.U = d_pre_gate.transpose() * f.instances;
    g.bU = d_pre_gate.colwise().sum().transpose();
    g.instances = f.weights * d_pooled.transpose() + d_pre_tanh * V + d_pre_gate * U;
    return g;
  }

  void accumulate(const Grads& g) {
    gV += g.V;
    gU += g.U;
    gWc += g.Wc;
    gbV += g.bV;
    gbU += g.bU;
    gw += g.w;
    gbc += g.bc;
  }

  void zero_grad() {
    gV = Mat::Zero(V.rows(), V.cols());
    gU = Mat::Zero(U.rows(), U.cols());
    gWc = Mat::Zero(Wc.rows(), Wc.cols());
    gbV = Vec::Zero(bV.size());
    gbU = Vec::Zero(bU.size());
    gw = Vec::Zero(w.size());
    gbc = Vec::Zero(bc.size());
  }

  /// Only meaningful for Scalar = float, where it feeds the optimizer.
  void visit(const ParamVisitor& f)
    requires std::is_same_v<Scalar, float>
  {
    auto span_of = [](auto& m) { return std::span<float>(m.data(), static_cast<std::size_t>(m.size())); };
    const int d = dim(), h = hidden(), n = classes();
    f("attention.V.weight", span_of(V), span_of(gV), {h, d});
    f("attention.V.bias", span_of(bV), span_of(gbV), {h});
    f("attention.U.weight", span_of(U), span_of(gU), {h, d});
    f("attention.U.bias", span_of(bU), span_of(gbU), {h});
    f("attention.w", span_of(w), span_of(gw), {h});
    f("classifier.weight", span_of(Wc), span_of(gWc), {n, d});
    f("classifier.bias", span_of(bc), span_of(gbc), {n});
  }

  Mat V, U, Wc;
  Vec bV, bU, w, bc;
  Mat gV, gU, gWc;
  Vec gbV, gbU, gw, gbc;
};

}  // namespace reid::nn
