#pragma once

// Minimal NHWC layer stack with explicit forward/backward passes.
//
// Each layer caches what it needs from the most recent forward() call, so a
// backward() must follow the forward() it differentiates. Gradients accumulate
// into Parameter::grad until zeroed by the optimizer.

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "sslauth/error.hpp"
#include "sslauth/random.hpp"
#include "sslauth/tensor.hpp"

namespace sslauth::nn {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline MatMap as_matrix(Tensor& t, int rows, int cols) { return MatMap(t.data(), rows, cols); }
inline ConstMatMap as_matrix(const Tensor& t, int rows, int cols) { return ConstMatMap(t.data(), rows, cols); }

struct Parameter {
  Tensor value;
  Tensor grad;
  /// Weight matrices/kernels are subject to magnitude pruning; biases are not.
  bool prunable = false;
};

struct ParamRef {
  std::string name;
  Parameter* param;
};

/// Parameters in canonical (construction) order with dotted path names.
using ParamList = std::vector<ParamRef>;

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual void collect(ParamList&, const std::string& /*prefix*/) {}
  virtual std::unique_ptr<Layer> clone() const = 0;
};

using LayerPtr = std::unique_ptr<Layer>;

namespace detail {

/// Patch extraction for a k x k kernel with stride and zero padding.
/// image: (B, ih, iw, C); returns (B * oh * ow, k * k * C) ordered (ky, kx, c).
inline void im2col(const float* image, int b, int ih, int iw, int c, int oh, int ow, int k, int stride, int pad,
                   float* cols) {
  const std::size_t row_len = static_cast<std::size_t>(k) * k * c;
  for (int n = 0; n < b; ++n)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        float* row = cols + ((static_cast<std::size_t>(n) * oh + oy) * ow + ox) * row_len;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride - pad + ky;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride - pad + kx;
            float* dst = row + (ky * k + kx) * c;
            if (iy < 0 || iy >= ih || ix < 0 || ix >= iw) {
              std::fill(dst, dst + c, 0.0f);
            } else {
              const float* src = image + ((static_cast<std::size_t>(n) * ih + iy) * iw + ix) * c;
              std::copy(src, src + c, dst);
            }
          }
        }
      }
}

/// Adjoint of im2col: accumulates patch rows back onto the image.
inline void col2im(const float* cols, int b, int ih, int iw, int c, int oh, int ow, int k, int stride, int pad,
                   float* image) {
  const std::size_t row_len = static_cast<std::size_t>(k) * k * c;
  for (int n = 0; n < b; ++n)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const float* row = cols + ((static_cast<std::size_t>(n) * oh + oy) * ow + ox) * row_len;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= ih) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= iw) continue;
            const float* src = row + (ky * k + kx) * c;
            float* dst = image + ((static_cast<std::size_t>(n) * ih + iy) * iw + ix) * c;
            for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
          }
        }
      }
}

inline void he_normal(Tensor& t, int fan_in, Rng& rng, float gain = 1.0f) {
  const double sd = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.vec()) v = static_cast<float>(sd * rng.normal());
}

}  // namespace detail

class Linear final : public Layer {
 public:
  Linear(int in, int out, Rng& rng, float gain = 1.0f) : in_(in), out_(out) {
    w_ = {Tensor({in, out}), Tensor({in, out}), true};
    b_ = {Tensor({out}), Tensor({out}), false};
    detail::he_normal(w_.value, in, rng, gain);
  }

  Tensor forward(const Tensor& x) override {
    require(x.rank() == 2 && x.dim(1) == in_, ErrorCode::shape_mismatch,
            "Linear: expected (B, " + std::to_string(in_) + "), got " + shape_str(x.shape()));
    input_ = x;
    const int b = x.dim(0);
    Tensor y({b, out_});
    auto ym = as_matrix(y, b, out_);
    ym.noalias() = as_matrix(x, b, in_) * as_matrix(w_.value, in_, out_);
    ym.rowwise() += as_matrix(b_.value, 1, out_).row(0);
    return y;
  }

  Tensor backward(const Tensor& gy) override {
    const int b = gy.dim(0);
    auto g = as_matrix(gy, b, out_);
    as_matrix(w_.grad, in_, out_).noalias() += as_matrix(input_, b, in_).transpose() * g;
    as_matrix(b_.grad, 1, out_) += g.colwise().sum();
    Tensor gx({b, in_});
    as_matrix(gx, b, in_).noalias() = g * as_matrix(w_.value, in_, out_).transpose();
    return gx;
  }

  void collect(ParamList& p, const std::string& prefix) override {
    p.push_back({prefix + "weight", &w_});
    p.push_back({prefix + "bias", &b_});
  }
  LayerPtr clone() const override { return std::make_unique<Linear>(*this); }

 private:
  int in_, out_;
  Parameter w_, b_;
  Tensor input_;
};

/// 2D convolution, NHWC, square kernel.
class Conv2d final : public Layer {
 public:
  Conv2d(int in, int out, int kernel, int stride, int pad, Rng& rng, float gain = 1.0f)
      : in_(in), out_(out), k_(kernel), stride_(stride), pad_(pad) {
    const int rows = kernel * kernel * in;
    w_ = {Tensor({rows, out}), Tensor({rows, out}), true};
    b_ = {Tensor({out}), Tensor({out}), false};
    detail::he_normal(w_.value, rows, rng, gain);
  }

  Tensor forward(const Tensor& x) override {
    require(x.rank() == 4 && x.dim(3) == in_, ErrorCode::shape_mismatch,
            "Conv2d: expected (B, H, W, " + std::to_string(in_) + "), got " + shape_str(x.shape()));
    in_shape_ = x.shape();
    const int b = x.dim(0), ih = x.dim(1), iw = x.dim(2);
    oh_ = (ih + 2 * pad_ - k_) / stride_ + 1;
    ow_ = (iw + 2 * pad_ - k_) / stride_ + 1;
    const int rows = b * oh_ * ow_, cols = k_ * k_ * in_;
    cols_ = Tensor({rows, cols});
    detail::im2col(x.data(), b, ih, iw, in_, oh_, ow_, k_, stride_, pad_, cols_.data());
    Tensor y({b, oh_, ow_, out_});
    auto ym = as_matrix(y, rows, out_);
    ym.noalias() = as_matrix(cols_, rows, cols) * as_matrix(w_.value, cols, out_);
    ym.rowwise() += as_matrix(b_.value, 1, out_).row(0);
    return y;
  }

  Tensor backward(const Tensor& gy) override {
    const int b = in_shape_[0];
    const int rows = b * oh_ * ow_, cols = k_ * k_ * in_;
    auto g = as_matrix(gy, rows, out_);
    as_matrix(w_.grad, cols, out_).noalias() += as_matrix(cols_, rows, cols).transpose() * g;
    as_matrix(b_.grad, 1, out_) += g.colwise().sum();
    Tensor gcols({rows, cols});
    as_matrix(gcols, rows, cols).noalias() = g * as_matrix(w_.value, cols, out_).transpose();
    Tensor gx(in_shape_);
    detail::col2im(gcols.data(), b, in_shape_[1], in_shape_[2], in_, oh_, ow_, k_, stride_, pad_, gx.data());
    return gx;
  }

  void collect(ParamList& p, const std::string& prefix) override {
    p.push_back({prefix + "weight", &w_});
    p.push_back({prefix + "bias", &b_});
  }
  LayerPtr clone() const override { return std::make_unique<Conv2d>(*this); }

 private:
  int in_, out_, k_, stride_, pad_;
  int oh_ = 0, ow_ = 0;
  Parameter w_, b_;
  Shape in_shape_;
  Tensor cols_;
};

/// Transposed 2D convolution (fractionally strided), NHWC. Output size is
/// (H - 1) * stride - 2 * pad + kernel.
class ConvTranspose2d final : public Layer {
 public:
  ConvTranspose2d(int in, int out, int kernel, int stride, int pad, Rng& rng, float gain = 1.0f)
      : in_(in), out_(out), k_(kernel), stride_(stride), pad_(pad) {
    const int cols = kernel * kernel * out;
    w_ = {Tensor({in, cols}), Tensor({in, cols}), true};
    b_ = {Tensor({out}), Tensor({out}), false};
    // Each output pixel receives about in * k^2 / stride^2 contributions.
    detail::he_normal(w_.value, in * kernel * kernel / (stride * stride), rng, gain);
  }

  Tensor forward(const Tensor& x) override {
    require(x.rank() == 4 && x.dim(3) == in_, ErrorCode::shape_mismatch,
            "ConvTranspose2d: expected (B, H, W, " + std::to_string(in_) + "), got " + shape_str(x.shape()));
    input_ = x;
    const int b = x.dim(0), h = x.dim(1), w = x.dim(2);
    oh_ = (h - 1) * stride_ - 2 * pad_ + k_;
    ow_ = (w - 1) * stride_ - 2 * pad_ + k_;
    const int rows = b * h * w, cols = k_ * k_ * out_;
    Tensor col({rows, cols});
    as_matrix(col, rows, cols).noalias() = as_matrix(x, rows, in_) * as_matrix(w_.value, in_, cols);
    Tensor y({b, oh_, ow_, out_});
    detail::col2im(col.data(), b, oh_, ow_, out_, h, w, k_, stride_, pad_, y.data());
    as_matrix(y, b * oh_ * ow_, out_).rowwise() += as_matrix(b_.value, 1, out_).row(0);
    return y;
  }

  Tensor backward(const Tensor& gy) override {
    const int b = input_.dim(0), h = input_.dim(1), w = input_.dim(2);
    const int rows = b * h * w, cols = k_ * k_ * out_;
    Tensor gcol({rows, cols});
    detail::im2col(gy.data(), b, oh_, ow_, out_, h, w, k_, stride_, pad_, gcol.data());
    auto gc = as_matrix(gcol, rows, cols);
    as_matrix(w_.grad, in_, cols).noalias() += as_matrix(input_, rows, in_).transpose() * gc;
    as_matrix(b_.grad, 1, out_) += as_matrix(gy, b * oh_ * ow_, out_).colwise().sum();
    Tensor gx(input_.shape());
    as_matrix(gx, rows, in_).noalias() = gc * as_matrix(w_.value, in_, cols).transpose();
    return gx;
  }

  void collect(ParamList& p, const std::string& prefix) override {
    p.push_back({prefix + "weight", &w_});
    p.push_back({prefix + "bias", &b_});
  }
  LayerPtr clone() const override { return std::make_unique<ConvTranspose2d>(*this); }

 private:
  int in_, out_, k_, stride_, pad_;
  int oh_ = 0, ow_ = 0;
  Parameter w_, b_;
  Tensor input_;
};

class ReLU final : public Layer {
 public:
  explicit ReLU(float negative_slope = 0.0f) : slope_(negative_slope) {}
  Tensor forward(const Tensor& x) override {
    input_ = x;
    Tensor y = x;
    for (auto& v : y.vec()) v = v > 0 ? v : slope_ * v;
    return y;
  }
  Tensor backward(const Tensor& gy) override {
    Tensor gx = gy;
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (!(input_[i] > 0)) gx[i] *= slope_;
    return gx;
  }
  LayerPtr clone() const override { return std::make_unique<ReLU>(*this); }

 private:
  float slope_;
  Tensor input_;
};

class Sigmoid final : public Layer {
 public:
  Tensor forward(const Tensor& x) override {
    out_ = x;
    for (auto& v : out_.vec()) v = 1.0f / (1.0f + std::exp(-v));
    return out_;
  }
  Tensor backward(const Tensor& gy) override {
    Tensor gx = gy;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= out_[i] * (1.0f - out_[i]);
    return gx;
  }
  LayerPtr clone() const override { return std::make_unique<Sigmoid>(*this); }

 private:
  Tensor out_;
};

/// (B, H, W, C) -> (B, C)
class GlobalAvgPool final : public Layer {
 public:
  Tensor forward(const Tensor& x) override {
    require(x.rank() == 4, ErrorCode::shape_mismatch, "GlobalAvgPool expects rank 4");
    in_shape_ = x.shape();
    const int b = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
    Tensor y({b, c});
    for (int n = 0; n < b; ++n)
      as_matrix(y, b, c).row(n) = as_matrix(x, b * hw, c).middleRows(n * hw, hw).colwise().mean();
    return y;
  }
  Tensor backward(const Tensor& gy) override {
    const int b = in_shape_[0], hw = in_shape_[1] * in_shape_[2], c = in_shape_[3];
    Tensor gx(in_shape_);
    auto gm = as_matrix(gx, b * hw, c);
    for (int n = 0; n < b; ++n)
      gm.middleRows(n * hw, hw).rowwise() = as_matrix(gy, b, c).row(n) / static_cast<float>(hw);
    return gx;
  }
  LayerPtr clone() const override { return std::make_unique<GlobalAvgPool>(*this); }

 private:
  Shape in_shape_;
};

/// Reshapes the trailing dimensions, keeping the batch axis.
class Reshape final : public Layer {
 public:
  explicit Reshape(Shape trailing) : trailing_(std::move(trailing)) {}
  Tensor forward(const Tensor& x) override {
    in_shape_ = x.shape();
    Shape s{x.dim(0)};
    s.insert(s.end(), trailing_.begin(), trailing_.end());
    Tensor y = x;
    y.reshape(s);
    return y;
  }
  Tensor backward(const Tensor& gy) override {
    Tensor gx = gy;
    gx.reshape(in_shape_);
    return gx;
  }
  LayerPtr clone() const override { return std::make_unique<Reshape>(*this); }

 private:
  Shape trailing_, in_shape_;
};

/// Named chain of layers; parameter names are "<layer>.<param>".
class Sequential final : public Layer {
 public:
  Sequential() = default;
  Sequential(const Sequential& o) : names_(o.names_) {
    for (const auto& l : o.layers_) layers_.push_back(l->clone());
  }
  Sequential& operator=(const Sequential& o) {
    if (this != &o) {
      Sequential tmp(o);
      std::swap(layers_, tmp.layers_);
      std::swap(names_, tmp.names_);
    }
    return *this;
  }
  Sequential(Sequential&&) = default;
  Sequential& operator=(Sequential&&) = default;

  Sequential& add(std::string name, LayerPtr layer) {
    names_.push_back(std::move(name));
    layers_.push_back(std::move(layer));
    return *this;
  }

  Tensor forward(const Tensor& x) override {
    Tensor h = x;
    for (auto& l : layers_) h = l->forward(h);
    return h;
  }
  Tensor backward(const Tensor& gy) override {
    Tensor g = gy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  void collect(ParamList& out, const std::string& prefix) override {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->collect(out, prefix + names_[i] + ".");
  }

  ParamList parameters() {
    ParamList p;
    collect(p, "");
    return p;
  }

  LayerPtr clone() const override { return std::make_unique<Sequential>(*this); }
  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<LayerPtr> layers_;
  std::vector<std::string> names_;
};

/// Normalisation of (B, C) rows with the statistics of the current batch. There are no
/// running averages: use it only in parts of a network that never see single samples.
class BatchNorm1d final : public Layer {
 public:
  explicit BatchNorm1d(int features, float eps = 1e-5f) : c_(features), eps_(eps) {
    gamma_ = {Tensor({features}, 1.0f), Tensor({features}), false};
    beta_ = {Tensor({features}), Tensor({features}), false};
  }

  Tensor forward(const Tensor& x) override {
    require(x.rank() == 2 && x.dim(1) == c_ && x.dim(0) >= 2, ErrorCode::shape_mismatch,
            "BatchNorm1d: expected (B >= 2, " + std::to_string(c_) + "), got " + shape_str(x.shape()));
    const int b = x.dim(0);
    xhat_ = Tensor(x.shape());
    inv_std_.assign(c_, 0.0f);
    Tensor y(x.shape());
    for (int j = 0; j < c_; ++j) {
      double sum = 0, sq = 0;
      for (int n = 0; n < b; ++n) {
        const double v = x[static_cast<std::size_t>(n) * c_ + j];
        sum += v;
        sq += v * v;
      }
      const double mean = sum / b, var = std::max(sq / b - mean * mean, 0.0);
      inv_std_[j] = static_cast<float>(1.0 / std::sqrt(var + eps_));
      for (int n = 0; n < b; ++n) {
        const std::size_t i = static_cast<std::size_t>(n) * c_ + j;
        xhat_[i] = static_cast<float>((x[i] - mean) * inv_std_[j]);
        y[i] = gamma_.value[j] * xhat_[i] + beta_.value[j];
      }
    }
    return y;
  }

  Tensor backward(const Tensor& gy) override {
    const int b = xhat_.dim(0);
    Tensor gx(xhat_.shape());
    for (int j = 0; j < c_; ++j) {
      double sum_d = 0, sum_dx = 0;
      for (int n = 0; n < b; ++n) {
        const std::size_t i = static_cast<std::size_t>(n) * c_ + j;
        gamma_.grad[j] += gy[i] * xhat_[i];
        beta_.grad[j] += gy[i];
        const double d = double(gy[i]) * gamma_.value[j];
        sum_d += d;
        sum_dx += d * xhat_[i];
      }
      for (int n = 0; n < b; ++n) {
        const std::size_t i = static_cast<std::size_t>(n) * c_ + j;
        const double d = double(gy[i]) * gamma_.value[j];
        gx[i] = static_cast<float>(inv_std_[j] * (d - sum_d / b - xhat_[i] * sum_dx / b));
      }
    }
    return gx;
  }

  void collect(ParamList& p, const std::string& prefix) override {
    p.push_back({prefix + "gamma", &gamma_});
    p.push_back({prefix + "beta", &beta_});
  }
  LayerPtr clone() const override { return std::make_unique<BatchNorm1d>(*this); }

 private:
  int c_;
  float eps_;
  Parameter gamma_, beta_;
  Tensor xhat_;
  std::vector<float> inv_std_;
};

/// Group normalization over (H, W, C / groups) per sample, with per-channel affine.
class GroupNorm final : public Layer {
 public:
  GroupNorm(int channels, int groups, float eps = 1e-5f) : c_(channels), g_(groups), eps_(eps) {
    require(channels % groups == 0, ErrorCode::config, "GroupNorm: channels must divide into groups");
    gamma_ = {Tensor({channels}, 1.0f), Tensor({channels}), false};
    beta_ = {Tensor({channels}), Tensor({channels}), false};
  }

  Tensor forward(const Tensor& x) override {
    require(x.rank() == 4 && x.dim(3) == c_, ErrorCode::shape_mismatch,
            "GroupNorm: expected (B, H, W, " + std::to_string(c_) + "), got " + shape_str(x.shape()));
    const int b = x.dim(0), hw = x.dim(1) * x.dim(2), cg = c_ / g_;
    xhat_ = Tensor(x.shape());
    inv_std_.assign(static_cast<std::size_t>(b) * g_, 0.0f);
    Tensor y(x.shape());
    const double count = static_cast<double>(hw) * cg;
    for (int n = 0; n < b; ++n)
      for (int g = 0; g < g_; ++g) {
        double sum = 0, sq = 0;
        for (int p = 0; p < hw; ++p)
          for (int k = 0; k < cg; ++k) {
            const double v = x[(static_cast<std::size_t>(n) * hw + p) * c_ + g * cg + k];
            sum += v;
            sq += v * v;
          }
        const double mean = sum / count;
        const double var = std::max(sq / count - mean * mean, 0.0);
        const float inv = static_cast<float>(1.0 / std::sqrt(var + eps_));
        inv_std_[n * g_ + g] = inv;
        for (int p = 0; p < hw; ++p)
          for (int k = 0; k < cg; ++k) {
            const std::size_t i = (static_cast<std::size_t>(n) * hw + p) * c_ + g * cg + k;
            const int ch = g * cg + k;
            xhat_[i] = static_cast<float>((x[i] - mean) * inv);
            y[i] = gamma_.value[ch] * xhat_[i] + beta_.value[ch];
          }
      }
    return y;
  }

  Tensor backward(const Tensor& gy) override {
    const int b = xhat_.dim(0), hw = xhat_.dim(1) * xhat_.dim(2), cg = c_ / g_;
    Tensor gx(xhat_.shape());
    const double count = static_cast<double>(hw) * cg;
    for (int n = 0; n < b; ++n)
      for (int g = 0; g < g_; ++g) {
        double sum_d = 0, sum_dx = 0;
        for (int p = 0; p < hw; ++p)
          for (int k = 0; k < cg; ++k) {
            const std::size_t i = (static_cast<std::size_t>(n) * hw + p) * c_ + g * cg + k;
            const int ch = g * cg + k;
            gamma_.grad[ch] += gy[i] * xhat_[i];
            beta_.grad[ch] += gy[i];
            const double d = double(gy[i]) * gamma_.value[ch];
            sum_d += d;
            sum_dx += d * xhat_[i];
          }
        const double inv = inv_std_[n * g_ + g];
        for (int p = 0; p < hw; ++p)
          for (int k = 0; k < cg; ++k) {
            const std::size_t i = (static_cast<std::size_t>(n) * hw + p) * c_ + g * cg + k;
            const double d = double(gy[i]) * gamma_.value[g * cg + k];
            gx[i] = static_cast<float>(inv * (d - sum_d / count - xhat_[i] * sum_dx / count));
          }
      }
    return gx;
  }

  void collect(ParamList& p, const std::string& prefix) override {
    p.push_back({prefix + "gamma", &gamma_});
    p.push_back({prefix + "beta", &beta_});
  }
  LayerPtr clone() const override { return std::make_unique<GroupNorm>(*this); }

 private:
  int c_, g_;
  float eps_;
  Parameter gamma_, beta_;
  Tensor xhat_;
  std::vector<float> inv_std_;
};

/// y = relu(x + norm2(conv2(relu(norm1(conv1(x)))))), 3x3 convolutions preserving shape.
class ResidualBlock final : public Layer {
 public:
  ResidualBlock(int channels, Rng& rng, int groups = 0) {
    if (groups <= 0) groups = std::max(1, channels / 8);
    body_.add("conv1", std::make_unique<Conv2d>(channels, channels, 3, 1, 1, rng))
        .add("norm1", std::make_unique<GroupNorm>(channels, groups))
        .add("relu", std::make_unique<ReLU>())
        .add("conv2", std::make_unique<Conv2d>(channels, channels, 3, 1, 1, rng))
        .add("norm2", std::make_unique<GroupNorm>(channels, groups));
  }

  Tensor forward(const Tensor& x) override {
    Tensor y = body_.forward(x);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i];
    return out_relu_.forward(y);
  }
  Tensor backward(const Tensor& gy) override {
    Tensor g = out_relu_.backward(gy);
    Tensor gx = body_.backward(g);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    return gx;
  }
  void collect(ParamList& p, const std::string& prefix) override { body_.collect(p, prefix); }
  LayerPtr clone() const override { return std::make_unique<ResidualBlock>(*this); }

 private:
  Sequential body_;
  ReLU out_relu_;
};

}  // namespace sslauth::nn
