// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <map>

#include "exml/model.hpp"
#include "exml/tensor.hpp"

namespace exml {

/// Natural-image regularizers evaluated on a synthetic batch.
template <class T>
struct PriorValues {
  T norm = 0;
  T blur = 0;
  T bns = 0;
};

/// Mean over the batch of the squared L2 norm of each sample.
template <class T>
T norm_prior(const Tensor<T>& x, Tensor<T>* grad = nullptr) {
  const T B = static_cast<T>(x.dim(0));
  T sum = 0;
  for (T v : x.values()) sum += v * v;
  if (grad) {
    *grad = x;
    *grad *= T(2) / B;
  }
  return sum / B;
}

namespace detail {

/// Normalized 1-D taps of a sigma=1 Gaussian on {-1, 0, 1}.
template <class T>
std::array<T, 3> blur_taps() {
  const T a = std::exp(T(-0.5));
  const T s = T(1) + T(2) * a;
  return {a / s, T(1) / s, a / s};
}

inline long clamp_index(long i, long n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); }

}  // namespace detail

/// 3x3 Gaussian blur (sigma 1) with replicate padding, per channel.
template <class T>
Tensor<T> gaussian_blur(const Tensor<T>& x) {
  const auto k = detail::blur_taps<T>();
  const std::size_t planes = x.dim(0) * x.dim(1);
  const long H = static_cast<long>(x.dim(2)), W = static_cast<long>(x.dim(3));
  Tensor<T> y(x.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const T* in = x.data() + p * H * W;
    T* out = y.data() + p * H * W;
    for (long i = 0; i < H; ++i)
      for (long j = 0; j < W; ++j) {
        T acc = 0;
        for (long di = -1; di <= 1; ++di)
          for (long dj = -1; dj <= 1; ++dj)
            acc += k[di + 1] * k[dj + 1] *
                   in[detail::clamp_index(i + di, H) * W + detail::clamp_index(j + dj, W)];
        out[i * W + j] = acc;
      }
  }
  return y;
}

/// Transpose of gaussian_blur (replicate padding makes it non-symmetric).
template <class T>
Tensor<T> gaussian_blur_adjoint(const Tensor<T>& g) {
  const auto k = detail::blur_taps<T>();
  const std::size_t planes = g.dim(0) * g.dim(1);
  const long H = static_cast<long>(g.dim(2)), W = static_cast<long>(g.dim(3));
  Tensor<T> y(g.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const T* in = g.data() + p * H * W;
    T* out = y.data() + p * H * W;
    for (long i = 0; i < H; ++i)
      for (long j = 0; j < W; ++j)
        for (long di = -1; di <= 1; ++di)
          for (long dj = -1; dj <= 1; ++dj)
            out[detail::clamp_index(i + di, H) * W + detail::clamp_index(j + dj, W)] +=
                k[di + 1] * k[dj + 1] * in[i * W + j];
  }
  return y;
}

/// Mean over the batch of ||x - blur(x)||^2. Zero for non-image inputs.
template <class T>
T blur_prior(const Tensor<T>& x, Tensor<T>* grad = nullptr) {
  if (x.rank() != 4) {
    if (grad) *grad = Tensor<T>(x.shape());
    return T(0);
  }
  const T B = static_cast<T>(x.dim(0));
  Tensor<T> r = gaussian_blur(x);
  T sum = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    r[i] = x[i] - r[i];
    sum += r[i] * r[i];
  }
  if (grad) {
    // d/dx ||(I - K)x||^2 = 2 (I - K)^T (I - K) x
    const Tensor<T> kt = gaussian_blur_adjoint(r);
    *grad = Tensor<T>(x.shape());
    for (std::size_t i = 0; i < r.size(); ++i)
      (*grad)[i] = T(2) * (r[i] - kt[i]) / B;
  }
  return sum / B;
}

/// Sum over normalization layers of ||mu - mu_syn||^2 + ||var - var_syn||^2,
/// where the synthetic statistics are those recorded in `tape` for the
/// current batch. Gradients, scaled by `weight`, are added to `injections`
/// keyed by normalization-layer index (see Model::backward). Zero when the
/// model has no normalization layers.
template <class T>
T bns_prior(const Model<T>& expert, const Tape<T>& tape,
            std::map<std::size_t, Tensor<T>>* injections = nullptr,
            T weight = T(1)) {
  T loss = 0;
  const auto stats = expert.norm_stats();
  const auto layers = expert.norm_layer_indices();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const LayerCache<T>& c = tape.caches.at(layers[k]);
    const std::size_t C = c.batch_mean.size();
    for (std::size_t ch = 0; ch < C; ++ch) {
      const T dm = c.batch_mean[ch] - stats[k].mean[ch];
      const T dv = c.batch_var[ch] - stats[k].var[ch];
      loss += dm * dm + dv * dv;
    }
    if (injections && weight != T(0)) {
      const Tensor<T>& z = c.input;
      const std::size_t B = z.dim(0), S = z.dim(2) * z.dim(3);
      const T M = static_cast<T>(B * S);
      Tensor<T> g(z.shape());
      for (std::size_t ch = 0; ch < C; ++ch) {
        const T dm = T(2) * (c.batch_mean[ch] - stats[k].mean[ch]);
        const T dv = T(2) * (c.batch_var[ch] - stats[k].var[ch]);
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t off = (b * C + ch) * S;
          for (std::size_t s = 0; s < S; ++s)
            g[off + s] = weight * (dm / M + dv * T(2) * (z[off + s] - c.batch_mean[ch]) / M);
        }
      }
      auto [it, inserted] = injections->try_emplace(layers[k], g);
      if (!inserted) it->second += g;
    }
  }
  return loss;
}

/// Evaluates all three priors for a batch (one Eval-mode forward pass).
template <class T>
PriorValues<T> priors(const Tensor<T>& x, const Model<T>& expert) {
  Tape<T> tape;
  expert.forward(x, Mode::Eval, &tape);
  return {norm_prior(x), blur_prior(x), bns_prior(expert, tape)};
}

}  // namespace exml
