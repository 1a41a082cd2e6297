#pragma once

#include <optional>
#include <string>
#include <vector>

#include "reid/core/image.hpp"
#include "reid/nn/layers.hpp"

namespace reid::nn {

struct EncoderArch {
  int width = 8;
  int embedding_dim = 32;
  int blocks = 4;

  friend bool operator==(const EncoderArch&, const EncoderArch&) = default;
};

/// conv3x3 -> relu -> conv3x3, plus identity or 1x1 projection, then relu.
class ResidualBlock {
 public:
  struct Tape {
    FeatureMap input;
    MatrixF cols1, cols2, cols_skip;
    MatrixF act1;  // relu(conv1)
    MatrixF out;   // relu(sum)
  };

  ResidualBlock() = default;
  ResidualBlock(int in, int out, int stride)
      : conv1_(in, out, 3, stride, 1), conv2_(out, out, 3, 1, 1) {
    if (in != out || stride != 1) skip_.emplace(in, out, 1, stride, 0);
  }

  void init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng, 0.5);
    if (skip_) skip_->init(rng);
  }

  FeatureMap forward(const FeatureMap& x, Tape& tape) const {
    tape.input = x;
    FeatureMap h = conv1_.forward(x, tape.cols1);
    relu_inplace(h.data);
    tape.act1 = h.data;
    FeatureMap y = conv2_.forward(h, tape.cols2);
    if (skip_)
      y.data += skip_->forward(x, tape.cols_skip).data;
    else
      y.data += x.data;
    relu_inplace(y.data);
    tape.out = y.data;
    return y;
  }

  FeatureMap backward(FeatureMap grad, const Tape& tape, bool need_input_grad) {
    relu_backward(grad.data, tape.out);
    FeatureMap d_act1 = conv2_.backward(grad, tape.cols2, grad.height, grad.width);
    relu_backward(d_act1.data, tape.act1);
    FeatureMap dx = conv1_.backward(d_act1, tape.cols1, tape.input.height, tape.input.width, need_input_grad);
    if (need_input_grad) {
      if (skip_)
        dx.data += skip_->backward(grad, tape.cols_skip, tape.input.height, tape.input.width).data;
      else
        dx.data += grad.data;
    } else if (skip_) {
      skip_->backward(grad, tape.cols_skip, tape.input.height, tape.input.width, false);
    }
    return dx;
  }

  void visit(const std::string& prefix, const ParamVisitor& f) {
    conv1_.visit(prefix + ".conv1", f);
    conv2_.visit(prefix + ".conv2", f);
    if (skip_) skip_->visit(prefix + ".skip", f);
  }

 private:
  Conv2d conv1_, conv2_;
  std::optional<Conv2d> skip_;
};

/// Small residual CNN: strided stem, residual stages, global average pooling.
class ResidualEncoder {
 public:
  struct Tape {
    FeatureMap input;
    MatrixF stem_cols;
    MatrixF stem_out;
    std::vector<ResidualBlock::Tape> blocks;
    int final_h = 0, final_w = 0;
  };

  ResidualEncoder() = default;
  explicit ResidualEncoder(const EncoderArch& arch) : arch_(arch), stem_(3, arch.width, 3, 2, 1) {
    require(arch.width > 0 && arch.embedding_dim > 0 && arch.blocks >= 1, ErrorKind::invalid_input,
            "invalid encoder architecture");
    int in = arch.width;
    for (int i = 0; i < arch.blocks; ++i) {
      const int out = i == arch.blocks - 1 ? arch.embedding_dim : arch.width * (1 << ((i + 1) / 2));
      blocks_.emplace_back(in, out, i == 0 ? 1 : 2);
      in = out;
    }
  }

  void init(Rng& rng) {
    stem_.init(rng);
    for (auto& b : blocks_) b.init(rng);
  }

  const EncoderArch& arch() const { return arch_; }
  int embedding_dim() const { return arch_.embedding_dim; }

  /// Maps [0, 1] RGB to a centered input volume.
  static FeatureMap to_input(const RGBPatch& patch) {
    FeatureMap x(3, patch.size, patch.size);
    const std::size_t n = patch.pixel_count();
    for (std::size_t p = 0; p < n; ++p)
      for (int c = 0; c < 3; ++c) x.data(c, static_cast<Eigen::Index>(p)) = (patch.values[p * 3 + c] - 0.5f) * 2.0f;
    return x;
  }

  VectorF forward(const RGBPatch& patch, Tape& tape) const {
    tape.input = to_input(patch);
    FeatureMap h = stem_.forward(tape.input, tape.stem_cols);
    relu_inplace(h.data);
    tape.stem_out = h.data;
    tape.blocks.resize(blocks_.size());
    for (std::size_t i = 0; i < blocks_.size(); ++i) h = blocks_[i].forward(h, tape.blocks[i]);
    tape.final_h = h.height;
    tape.final_w = h.width;
    return h.data.rowwise().mean();
  }

  VectorF forward(const RGBPatch& patch) const {
    Tape tape;
    return forward(patch, tape);
  }

  /// Accumulates gradients of all encoder parameters given d(loss)/d(embedding).
  void backward(const VectorF& grad_embedding, const Tape& tape) {
    const int hw = tape.final_h * tape.final_w;
    FeatureMap g(embedding_dim(), tape.final_h, tape.final_w);
    g.data = (grad_embedding / static_cast<float>(hw)).replicate(1, hw);
    for (std::size_t i = blocks_.size(); i-- > 0;) g = blocks_[i].backward(std::move(g), tape.blocks[i], true);
    relu_backward(g.data, tape.stem_out);
    stem_.backward(g, tape.stem_cols, tape.input.height, tape.input.width, false);
  }

  void visit(const ParamVisitor& f) {
    stem_.visit("encoder.stem", f);
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].visit("encoder.block" + std::to_string(i), f);
  }

 private:
  EncoderArch arch_;
  Conv2d stem_;
  std::vector<ResidualBlock> blocks_;
};

}  // namespace reid::nn
