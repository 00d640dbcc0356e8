// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "exml/tensor.hpp"

namespace exml {

enum class Mode { Train, Eval };

/// Per-layer activation record produced by a forward pass. Only the fields
/// a given layer needs are populated.
template <class T>
struct LayerCache {
  Tensor<T> input;
  Tensor<T> xhat;
  std::vector<T> batch_mean;  // statistics of the input batch (norm layers)
  std::vector<T> batch_var;
  std::vector<T> inv_std;     // of whichever statistics normalized the batch
  Mode mode = Mode::Eval;
};

namespace detail {

template <class T>
void init_uniform(Tensor<T>& t, T bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound),
                                              static_cast<double>(bound));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
}

inline void expect(bool ok, const std::string& msg) {
  if (!ok) throw InputContractError(msg);
}

}  // namespace detail

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, std::size_t in, std::size_t out)
      : name_(std::move(name)), weight_({out, in}), bias_({out}) {}

  void init(std::mt19937_64& rng) {
    const T bound = T(1) / std::sqrt(static_cast<T>(in_features()));
    detail::init_uniform(weight_, bound, rng);
    detail::init_uniform(bias_, bound, rng);
  }

  std::size_t in_features() const { return weight_.dim(1); }
  std::size_t out_features() const { return weight_.dim(0); }
  const Tensor<T>& weight() const { return weight_; }

  template <class F>
  void visit(F&& f) {
    f(name_ + ".weight", weight_, true);
    f(name_ + ".bias", bias_, true);
  }
  template <class F>
  void visit(F&& f) const {
    f(name_ + ".weight", weight_, true);
    f(name_ + ".bias", bias_, true);
  }

  Tensor<T> forward(const Tensor<T>& x, LayerCache<T>& cache, Mode) const {
    detail::expect(x.rank() == 2 && x.dim(1) == in_features(),
                   name_ + ": expected input [Bx" +
                       std::to_string(in_features()) + "], got " +
                       shape_str(x.shape()));
    const std::size_t B = x.dim(0), I = in_features(), O = out_features();
    Tensor<T> y({B, O});
    for (std::size_t b = 0; b < B; ++b) {
      const T* xr = x.data() + b * I;
      T* yr = y.data() + b * O;
      for (std::size_t o = 0; o < O; ++o) {
        const T* wr = weight_.data() + o * I;
        T acc = bias_[o];
        for (std::size_t i = 0; i < I; ++i) acc += wr[i] * xr[i];
        yr[o] = acc;
      }
    }
    cache.input = x;
    return y;
  }

  /// grads, when non-empty, receives {dweight, dbias} accumulations.
  Tensor<T> backward(const Tensor<T>& g, const LayerCache<T>& cache,
                     std::span<Tensor<T>> grads) const {
    const Tensor<T>& x = cache.input;
    const std::size_t B = x.dim(0), I = in_features(), O = out_features();
    Tensor<T> dx({B, I});
    for (std::size_t b = 0; b < B; ++b) {
      const T* gr = g.data() + b * O;
      T* dxr = dx.data() + b * I;
      for (std::size_t o = 0; o < O; ++o) {
        const T go = gr[o];
        if (go == T(0)) continue;
        const T* wr = weight_.data() + o * I;
        for (std::size_t i = 0; i < I; ++i) dxr[i] += go * wr[i];
      }
    }
    if (!grads.empty()) {
      Tensor<T>& dw = grads[0];
      Tensor<T>& db = grads[1];
      for (std::size_t b = 0; b < B; ++b) {
        const T* gr = g.data() + b * O;
        const T* xr = x.data() + b * I;
        for (std::size_t o = 0; o < O; ++o) {
          const T go = gr[o];
          db[o] += go;
          if (go == T(0)) continue;
          T* dwr = dw.data() + o * I;
          for (std::size_t i = 0; i < I; ++i) dwr[i] += go * xr[i];
        }
      }
    }
    return dx;
  }

 private:
  std::string name_;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

/// 2-D convolution over [B, C, H, W] with square kernels and zero padding.
template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, std::size_t in_ch, std::size_t out_ch,
         std::size_t kernel, std::size_t stride, std::size_t pad)
      : name_(std::move(name)),
        stride_(stride),
        pad_(pad),
        weight_({out_ch, in_ch, kernel, kernel}),
        bias_({out_ch}) {}

  void init(std::mt19937_64& rng) {
    const std::size_t fan_in = weight_.dim(1) * kernel() * kernel();
    const T bound = T(1) / std::sqrt(static_cast<T>(fan_in));
    detail::init_uniform(weight_, bound, rng);
    detail::init_uniform(bias_, bound, rng);
  }

  std::size_t in_channels() const { return weight_.dim(1); }
  std::size_t out_channels() const { return weight_.dim(0); }
  std::size_t kernel() const { return weight_.dim(2); }

  std::size_t out_extent(std::size_t in) const {
    return (in + 2 * pad_ - kernel()) / stride_ + 1;
  }

  template <class F>
  void visit(F&& f) {
    f(name_ + ".weight", weight_, true);
    f(name_ + ".bias", bias_, true);
  }
  template <class F>
  void visit(F&& f) const {
    f(name_ + ".weight", weight_, true);
    f(name_ + ".bias", bias_, true);
  }

  Tensor<T> forward(const Tensor<T>& x, LayerCache<T>& cache, Mode) const {
    detail::expect(x.rank() == 4 && x.dim(1) == in_channels(),
                   name_ + ": expected input [BxCxHxW] with C=" +
                       std::to_string(in_channels()) + ", got " +
                       shape_str(x.shape()));
    const std::size_t B = x.dim(0), H = x.dim(2), W = x.dim(3), O = out_channels();
    const std::size_t OH = out_extent(H), OW = out_extent(W), P = OH * OW;
    const std::size_t J = patch_size();
    Tensor<T> y({B, O, OH, OW});
    std::vector<T> col(J * P);
    for (std::size_t b = 0; b < B; ++b) {
      im2col(x.data() + b * in_channels() * H * W, H, W, OH, OW, col.data());
      for (std::size_t o = 0; o < O; ++o) {
        T* yp = y.data() + (b * O + o) * P;
        std::fill(yp, yp + P, bias_[o]);
        const T* wp = weight_.data() + o * J;
        for (std::size_t j = 0; j < J; ++j) {
          const T w = wp[j];
          const T* cp = col.data() + j * P;
          for (std::size_t q = 0; q < P; ++q) yp[q] += w * cp[q];
        }
      }
    }
    cache.input = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g, const LayerCache<T>& cache,
                     std::span<Tensor<T>> grads) const {
    const Tensor<T>& x = cache.input;
    const std::size_t B = x.dim(0), H = x.dim(2), W = x.dim(3), O = out_channels();
    const std::size_t OH = g.dim(2), OW = g.dim(3), P = OH * OW;
    const std::size_t J = patch_size(), CHW = in_channels() * H * W;
    Tensor<T> dx(x.shape());
    const bool want_params = !grads.empty();
    std::vector<T> col(J * P), dcol(J * P);
    for (std::size_t b = 0; b < B; ++b) {
      if (want_params) im2col(x.data() + b * CHW, H, W, OH, OW, col.data());
      std::fill(dcol.begin(), dcol.end(), T(0));
      for (std::size_t o = 0; o < O; ++o) {
        const T* gp = g.data() + (b * O + o) * P;
        const T* wp = weight_.data() + o * J;
        if (want_params) {
          T s = 0;
          for (std::size_t q = 0; q < P; ++q) s += gp[q];
          grads[1][o] += s;
          T* dwp = grads[0].data() + o * J;
          for (std::size_t j = 0; j < J; ++j) {
            const T* cp = col.data() + j * P;
            T dw = 0;
            for (std::size_t q = 0; q < P; ++q) dw += gp[q] * cp[q];
            dwp[j] += dw;
          }
        }
        for (std::size_t j = 0; j < J; ++j) {
          const T w = wp[j];
          T* dp = dcol.data() + j * P;
          for (std::size_t q = 0; q < P; ++q) dp[q] += w * gp[q];
        }
      }
      col2im_add(dcol.data(), H, W, OH, OW, dx.data() + b * CHW);
    }
    return dx;
  }

 private:
  std::size_t patch_size() const { return in_channels() * kernel() * kernel(); }

  // Input index for output index o at kernel offset k, or -1 in the padding.
  long source_index(std::size_t o, std::size_t k, std::size_t in) const {
    const long i = static_cast<long>(o * stride_ + k) - static_cast<long>(pad_);
    return i < 0 || i >= static_cast<long>(in) ? -1 : i;
  }

  // col[(c, ky, kx)][(oy, ox)] = x[c][oy * stride + ky - pad][ox * stride + kx - pad].
  void im2col(const T* xp, std::size_t H, std::size_t W, std::size_t OH, std::size_t OW,
              T* col) const {
    const std::size_t K = kernel();
    for (std::size_t c = 0; c < in_channels(); ++c)
      for (std::size_t ky = 0; ky < K; ++ky)
        for (std::size_t kx = 0; kx < K; ++kx) {
          T* row = col + ((c * K + ky) * K + kx) * OH * OW;
          for (std::size_t oy = 0; oy < OH; ++oy) {
            const long iy = source_index(oy, ky, H);
            for (std::size_t ox = 0; ox < OW; ++ox) {
              const long ix = source_index(ox, kx, W);
              row[oy * OW + ox] = iy < 0 || ix < 0 ? T(0) : xp[(c * H + iy) * W + ix];
            }
          }
        }
  }

  void col2im_add(const T* dcol, std::size_t H, std::size_t W, std::size_t OH,
                  std::size_t OW, T* dxp) const {
    const std::size_t K = kernel();
    for (std::size_t c = 0; c < in_channels(); ++c)
      for (std::size_t ky = 0; ky < K; ++ky)
        for (std::size_t kx = 0; kx < K; ++kx) {
          const T* row = dcol + ((c * K + ky) * K + kx) * OH * OW;
          for (std::size_t oy = 0; oy < OH; ++oy) {
            const long iy = source_index(oy, ky, H);
            if (iy < 0) continue;
            for (std::size_t ox = 0; ox < OW; ++ox) {
              const long ix = source_index(ox, kx, W);
              if (ix >= 0) dxp[(c * H + iy) * W + ix] += row[oy * OW + ox];
            }
          }
        }
  }

  std::string name_;
  std::size_t stride_ = 1;
  std::size_t pad_ = 0;
  Tensor<T> weight_;
  Tensor<T> bias_;
};

/// Per-channel batch normalization over [B, C, H, W]. Running statistics are
/// the stored normalization-layer statistics (mean, variance).
template <class T>
class BatchNorm2d {
 public:
  static constexpr T kEps = T(1e-5);
  static constexpr T kMomentum = T(0.1);

  BatchNorm2d() = default;
  BatchNorm2d(std::string name, std::size_t channels)
      : name_(std::move(name)),
        gamma_({channels}, T(1)),
        beta_({channels}, T(0)),
        running_mean_({channels}, T(0)),
        running_var_({channels}, T(1)) {}

  void init(std::mt19937_64&) {}

  std::size_t channels() const { return gamma_.size(); }
  const Tensor<T>& running_mean() const { return running_mean_; }
  const Tensor<T>& running_var() const { return running_var_; }
  Tensor<T>& running_mean() { return running_mean_; }
  Tensor<T>& running_var() { return running_var_; }

  template <class F>
  void visit(F&& f) {
    f(name_ + ".gamma", gamma_, true);
    f(name_ + ".beta", beta_, true);
    f(name_ + ".running_mean", running_mean_, false);
    f(name_ + ".running_var", running_var_, false);
  }
  template <class F>
  void visit(F&& f) const {
    f(name_ + ".gamma", gamma_, true);
    f(name_ + ".beta", beta_, true);
    f(name_ + ".running_mean", running_mean_, false);
    f(name_ + ".running_var", running_var_, false);
  }

  Tensor<T> forward(const Tensor<T>& x, LayerCache<T>& cache,
                    Mode mode) const {
    detail::expect(x.rank() == 4 && x.dim(1) == channels(),
                   name_ + ": expected input [BxCxHxW] with C=" +
                       std::to_string(channels()) + ", got " +
                       shape_str(x.shape()));
    const std::size_t B = x.dim(0), C = channels(),
                      S = x.dim(2) * x.dim(3);
    const T M = static_cast<T>(B * S);
    cache.batch_mean.assign(C, T(0));
    cache.batch_var.assign(C, T(0));
    for (std::size_t c = 0; c < C; ++c) {
      T sum = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = x.data() + (b * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) sum += p[s];
      }
      const T mean = sum / M;
      T sq = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* p = x.data() + (b * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) sq += (p[s] - mean) * (p[s] - mean);
      }
      cache.batch_mean[c] = mean;
      cache.batch_var[c] = sq / M;
    }
    cache.mode = mode;
    cache.inv_std.assign(C, T(0));
    Tensor<T> xhat(x.shape());
    Tensor<T> y(x.shape());
    for (std::size_t c = 0; c < C; ++c) {
      const T mean = mode == Mode::Train ? cache.batch_mean[c] : running_mean_[c];
      const T var = mode == Mode::Train ? cache.batch_var[c] : running_var_[c];
      const T inv = T(1) / std::sqrt(var + kEps);
      cache.inv_std[c] = inv;
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t off = (b * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) {
          const T h = (x[off + s] - mean) * inv;
          xhat[off + s] = h;
          y[off + s] = gamma_[c] * h + beta_[c];
        }
      }
    }
    cache.xhat = std::move(xhat);
    cache.input = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g, const LayerCache<T>& cache,
                     std::span<Tensor<T>> grads) const {
    const Tensor<T>& xhat = cache.xhat;
    const std::size_t B = xhat.dim(0), C = channels(),
                      S = xhat.dim(2) * xhat.dim(3);
    const T M = static_cast<T>(B * S);
    Tensor<T> dx(xhat.shape());
    for (std::size_t c = 0; c < C; ++c) {
      T sum_g = 0, sum_gx = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t off = (b * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) {
          sum_g += g[off + s];
          sum_gx += g[off + s] * xhat[off + s];
        }
      }
      if (!grads.empty()) {
        grads[0][c] += sum_gx;
        grads[1][c] += sum_g;
      }
      const T scale = gamma_[c] * cache.inv_std[c];
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t off = (b * C + c) * S;
        for (std::size_t s = 0; s < S; ++s) {
          if (cache.mode == Mode::Train) {
            dx[off + s] = scale / M *
                          (M * g[off + s] - sum_g - xhat[off + s] * sum_gx);
          } else {
            dx[off + s] = scale * g[off + s];
          }
        }
      }
    }
    return dx;
  }

  void update_running(const LayerCache<T>& cache) {
    for (std::size_t c = 0; c < channels(); ++c) {
      running_mean_[c] = (T(1) - kMomentum) * running_mean_[c] +
                         kMomentum * cache.batch_mean[c];
      running_var_[c] = (T(1) - kMomentum) * running_var_[c] +
                        kMomentum * cache.batch_var[c];
    }
  }

 private:
  std::string name_;
  Tensor<T> gamma_;
  Tensor<T> beta_;
  Tensor<T> running_mean_;
  Tensor<T> running_var_;
};

template <class T>
class Relu {
 public:
  void init(std::mt19937_64&) {}
  template <class F>
  void visit(F&&) const {}

  Tensor<T> forward(const Tensor<T>& x, LayerCache<T>& cache, Mode) const {
    Tensor<T> y = x;
    for (auto& v : y.values()) v = v > T(0) ? v : T(0);
    cache.input = x;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g, const LayerCache<T>& cache,
                     std::span<Tensor<T>>) const {
    Tensor<T> dx = g;
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (!(cache.input[i] > T(0))) dx[i] = T(0);
    return dx;
  }
};

template <class T>
class Flatten {
 public:
  void init(std::mt19937_64&) {}
  template <class F>
  void visit(F&&) const {}

  Tensor<T> forward(const Tensor<T>& x, LayerCache<T>& cache, Mode) const {
    Tensor<T> y = x;
    y.reshape({x.dim(0), x.row_size()});
    cache.input = Tensor<T>(x.shape());  // shape only
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g, const LayerCache<T>& cache,
                     std::span<Tensor<T>>) const {
    Tensor<T> dx = g;
    dx.reshape(cache.input.shape());
    return dx;
  }
};

}  // namespace exml
