// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "exml/tensor.hpp"

namespace exml {

/// Which augmentations to draw for each sample of an image batch.
struct AugmentFlags {
  bool shift = false;
  bool rotate = false;
  bool hflip = false;
  int max_shift = 1;             // pixels
  double max_rotation_deg = 10;  // uniform in [-max, max]

  bool any() const { return shift || rotate || hflip; }
  friend bool operator==(const AugmentFlags&, const AugmentFlags&) = default;
};

/// Geometric transform of one image: out(p) = in(source(p)), sampled
/// bilinearly with zero padding. Composition order: flip, then rotation about
/// the image center, then translation.
struct ImageTransform {
  int shift_y = 0;
  int shift_x = 0;
  double angle_rad = 0.0;
  bool hflip = false;

  bool identity() const { return shift_y == 0 && shift_x == 0 && angle_rad == 0.0 && !hflip; }
};

/// A linear, per-sample augmentation of an image batch with its adjoint, so
/// gradients can flow from the augmented batch back to the raw samples.
template <class T>
class Augmentation {
 public:
  Augmentation() = default;

  /// Same transform for every sample.
  static Augmentation fixed(const ImageTransform& t, std::size_t batch) {
    Augmentation a;
    a.transforms_.assign(batch, t);
    return a;
  }

  /// Independent random transforms, or the identity for vector batches.
  static Augmentation sample(const AugmentFlags& flags, const Shape& batch_shape,
                             std::mt19937_64& rng) {
    Augmentation a;
    if (batch_shape.size() != 4 || !flags.any()) return a;
    std::uniform_int_distribution<int> shift(-flags.max_shift, flags.max_shift);
    std::uniform_real_distribution<double> angle(-flags.max_rotation_deg,
                                                 flags.max_rotation_deg);
    std::bernoulli_distribution coin(0.5);
    a.transforms_.resize(batch_shape[0]);
    for (auto& t : a.transforms_) {
      if (flags.shift) {
        t.shift_y = shift(rng);
        t.shift_x = shift(rng);
      }
      if (flags.rotate) t.angle_rad = angle(rng) * M_PI / 180.0;
      if (flags.hflip) t.hflip = coin(rng);
    }
    return a;
  }

  bool is_identity() const {
    for (const auto& t : transforms_)
      if (!t.identity()) return false;
    return true;
  }

  Tensor<T> apply(const Tensor<T>& x) const { return run(x, false); }
  Tensor<T> adjoint(const Tensor<T>& g) const { return run(g, true); }

 private:
  struct Tap {
    std::size_t src;
    T weight;
  };

  static std::vector<std::vector<Tap>> taps(const ImageTransform& t, long H, long W) {
    std::vector<std::vector<Tap>> out(H * W);
    const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
    const double cs = std::cos(t.angle_rad), sn = std::sin(t.angle_rad);
    for (long i = 0; i < H; ++i)
      for (long j = 0; j < W; ++j) {
        // undo translation, rotation, flip in reverse order
        double y = i - t.shift_y - cy, x = j - t.shift_x - cx;
        const double ry = cs * y - sn * x, rx = sn * y + cs * x;
        y = ry + cy;
        x = rx + cx;
        if (t.hflip) x = (W - 1) - x;
        const double fy = std::floor(y + 1e-9), fx = std::floor(x + 1e-9);
        const double wy = y - fy, wx = x - fx;
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b) {
            const long sy = static_cast<long>(fy) + a, sx = static_cast<long>(fx) + b;
            const double w = (a ? wy : 1 - wy) * (b ? wx : 1 - wx);
            if (w < 1e-12 || sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
            out[i * W + j].push_back({static_cast<std::size_t>(sy * W + sx), static_cast<T>(w)});
          }
      }
    return out;
  }

  Tensor<T> run(const Tensor<T>& x, bool transpose) const {
    if (transforms_.empty() || x.rank() != 4) return x;
    if (transforms_.size() != x.dim(0))
      throw InputContractError("augmentation drawn for a batch of " +
                               std::to_string(transforms_.size()) +
                               ", applied to " + std::to_string(x.dim(0)));
    const std::size_t C = x.dim(1);
    const long H = static_cast<long>(x.dim(2)), W = static_cast<long>(x.dim(3));
    Tensor<T> y(x.shape());
    for (std::size_t b = 0; b < transforms_.size(); ++b) {
      if (transforms_[b].identity()) {
        std::copy(x.data() + b * C * H * W, x.data() + (b + 1) * C * H * W,
                  y.data() + b * C * H * W);
        continue;
      }
      const auto map = taps(transforms_[b], H, W);
      for (std::size_t c = 0; c < C; ++c) {
        const T* in = x.data() + (b * C + c) * H * W;
        T* out = y.data() + (b * C + c) * H * W;
        for (std::size_t p = 0; p < map.size(); ++p)
          for (const Tap& tap : map[p]) {
            if (transpose)
              out[tap.src] += tap.weight * in[p];
            else
              out[p] += tap.weight * in[tap.src];
          }
      }
    }
    return y;
  }

  std::vector<ImageTransform> transforms_;
};

/// Applies independently drawn augmentations to an image batch. With all
/// flags off (or a vector batch) the output equals the input.
template <class T>
Tensor<T> augment(const Tensor<T>& x, const AugmentFlags& flags, std::mt19937_64& rng) {
  return Augmentation<T>::sample(flags, x.shape(), rng).apply(x);
}

}  // namespace exml
