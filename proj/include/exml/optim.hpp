// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "exml/tensor.hpp"

namespace exml {

/// SGD with heavy-ball momentum and L2 weight decay (decay is folded into the
/// gradient, as in the usual deep-learning formulation).
template <class T>
class Sgd {
 public:
  Sgd(T lr, T momentum = T(0), T weight_decay = T(0))
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const std::vector<Tensor<T>*>& params,
            const std::vector<Tensor<T>>& grads) {
    if (velocity_.empty())
      for (const auto* p : params) velocity_.emplace_back(p->shape());
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = *params[i];
      Tensor<T>& v = velocity_[i];
      const Tensor<T>& g = grads[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        const T d = g[j] + weight_decay_ * p[j];
        v[j] = momentum_ * v[j] + d;
        p[j] -= lr_ * v[j];
      }
    }
  }

  T learning_rate() const { return lr_; }

 private:
  T lr_, momentum_, weight_decay_;
  std::vector<Tensor<T>> velocity_;
};

/// Adam over a single tensor; used for optimizing synthetic inputs.
template <class T>
class Adam {
 public:
  explicit Adam(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(Tensor<T>& x, const Tensor<T>& g) {
    if (m_.size() != x.size()) {
      m_.assign(x.size(), T(0));
      v_.assign(x.size(), T(0));
      t_ = 0;
    }
    ++t_;
    const T c1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T c2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (std::size_t j = 0; j < x.size(); ++j) {
      m_[j] = beta1_ * m_[j] + (T(1) - beta1_) * g[j];
      v_[j] = beta2_ * v_[j] + (T(1) - beta2_) * g[j] * g[j];
      x[j] -= lr_ * (m_[j] / c1) / (std::sqrt(v_[j] / c2) + eps_);
    }
  }

 private:
  T lr_, beta1_, beta2_, eps_;
  std::vector<T> m_, v_;
  long t_ = 0;
};

}  // namespace exml
