// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "exml/errors.hpp"

namespace exml {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major tensor. The first dimension is the batch dimension
/// wherever a tensor holds a batch of samples.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel(shape_))
      throw InputContractError("tensor data size " +
                               std::to_string(data_.size()) +
                               " does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t r, std::size_t c) noexcept {
    return data_[r * row_size() + c];
  }
  const T& at(std::size_t r, std::size_t c) const noexcept {
    return data_[r * row_size() + c];
  }

  /// Number of scalars per leading-dimension entry.
  std::size_t row_size() const noexcept {
    return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / shape_[0];
  }

  std::span<T> row(std::size_t r) noexcept {
    return {data_.data() + r * row_size(), row_size()};
  }
  std::span<const T> row(std::size_t r) const noexcept {
    return {data_.data() + r * row_size(), row_size()};
  }

  void reshape(Shape shape) {
    if (numel(shape) != data_.size())
      throw InputContractError("cannot reshape " + shape_str(shape_) +
                               " to " + shape_str(shape));
    shape_ = std::move(shape);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  Tensor& operator+=(const Tensor& o) {
    check_same(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_same(const Tensor& o) const {
    if (o.shape_ != shape_)
      throw InputContractError("shape mismatch " + shape_str(shape_) +
                               " vs " + shape_str(o.shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Stacks per-sample tensors (all of shape `sample_shape`) into a batch.
template <class T>
Tensor<T> stack(std::span<const Tensor<T>* const> samples,
                const Shape& sample_shape) {
  Shape shape{samples.size()};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  Tensor<T> out(shape);
  const std::size_t n = numel(sample_shape);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i]->size() != n)
      throw InputContractError("sample " + std::to_string(i) + " has shape " +
                               shape_str(samples[i]->shape()) + ", expected " +
                               shape_str(sample_shape));
    std::copy(samples[i]->data(), samples[i]->data() + n, out.data() + i * n);
  }
  return out;
}

/// Copies rows `indices` of a batch tensor into a new batch.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& batch,
                      std::span<const std::size_t> indices) {
  Shape shape = batch.shape();
  shape[0] = indices.size();
  Tensor<T> out(shape);
  const std::size_t n = batch.row_size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = batch.row(indices[i]);
    std::copy(src.begin(), src.end(), out.data() + i * n);
  }
  return out;
}

/// Extracts one row of a batch as a standalone sample tensor.
template <class T>
Tensor<T> take_row(const Tensor<T>& batch, std::size_t r) {
  Shape shape(batch.shape().begin() + 1, batch.shape().end());
  const auto src = batch.row(r);
  return Tensor<T>(shape, std::vector<T>(src.begin(), src.end()));
}

/// Index of the maximum element; ties resolve to the lowest index.
template <class T>
std::size_t argmax(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

/// FNV-1a over the raw bytes of a tensor; used to assert immutability.
template <class T>
std::uint64_t content_hash(const Tensor<T>& t, std::uint64_t h = 1469598103934665603ull) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
  for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  for (auto d : t.shape()) {
    h ^= d;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace exml
