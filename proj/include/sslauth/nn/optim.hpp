#pragma once

#include <cmath>
#include <vector>

#include "sslauth/nn/layers.hpp"

namespace sslauth::nn {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(ParamList params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.param->value.size(), 0.0f);
      v_.emplace_back(p.param->value.size(), 0.0f);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.param->grad.fill(0.0f);
  }

  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }
  double learning_rate() const { return cfg_.learning_rate; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    const float step = static_cast<float>(cfg_.learning_rate / bc1);
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const float inv_bc2 = static_cast<float>(1.0 / bc2), eps = static_cast<float>(cfg_.eps);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      float* w = params_[k].param->value.data();
      const float* g = params_[k].param->grad.data();
      float* m = m_[k].data();
      float* v = v_[k].data();
      const std::size_t n = m_[k].size();
      for (std::size_t i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + (1 - b1) * g[i];
        v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
        w[i] -= step * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
      }
    }
  }

  const ParamList& params() const { return params_; }

 private:
  ParamList params_;
  AdamConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  long t_ = 0;
};

inline bool all_finite(const Tensor& t) {
  for (float v : t.vec())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace sslauth::nn
