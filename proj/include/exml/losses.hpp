// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "exml/tensor.hpp"

namespace exml {

/// Row-wise softmax of logits / temperature.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& logits, T temperature = T(1)) {
  Tensor<T> p(logits.shape());
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  for (std::size_t b = 0; b < B; ++b) {
    const T* z = logits.data() + b * K;
    T* pr = p.data() + b * K;
    T mx = z[0] / temperature;
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, z[k] / temperature);
    T sum = 0;
    for (std::size_t k = 0; k < K; ++k) {
      pr[k] = std::exp(z[k] / temperature - mx);
      sum += pr[k];
    }
    for (std::size_t k = 0; k < K; ++k) pr[k] /= sum;
  }
  return p;
}

/// Row-wise log-softmax of logits / temperature.
template <class T>
Tensor<T> log_softmax_rows(const Tensor<T>& logits, T temperature = T(1)) {
  Tensor<T> out(logits.shape());
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  for (std::size_t b = 0; b < B; ++b) {
    const T* z = logits.data() + b * K;
    T* o = out.data() + b * K;
    T mx = z[0] / temperature;
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, z[k] / temperature);
    T sum = 0;
    for (std::size_t k = 0; k < K; ++k) sum += std::exp(z[k] / temperature - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t k = 0; k < K; ++k) o[k] = z[k] / temperature - lse;
  }
  return out;
}

namespace detail {
inline void check_labels(std::span<const int> labels, std::size_t B,
                         std::size_t K) {
  if (labels.size() != B)
    throw InputContractError("label count " + std::to_string(labels.size()) +
                             " does not match batch size " + std::to_string(B));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= K)
      throw InputContractError("label " + std::to_string(y) +
                               " outside output width " + std::to_string(K));
}
}  // namespace detail

/// Mean over the batch of -log softmax(z / tau)[y]. Writes d loss / d z into
/// grad when given.
template <class T>
T cross_entropy(const Tensor<T>& logits, std::span<const int> labels,
                T temperature = T(1), Tensor<T>* grad = nullptr) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  detail::check_labels(labels, B, K);
  const Tensor<T> logp = log_softmax_rows(logits, temperature);
  T loss = 0;
  for (std::size_t b = 0; b < B; ++b) loss -= logp.at(b, labels[b]);
  loss /= static_cast<T>(B);
  if (grad) {
    *grad = Tensor<T>(logits.shape());
    const T scale = T(1) / (temperature * static_cast<T>(B));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k) {
        const T p = std::exp(logp.at(b, k));
        grad->at(b, k) = (p - (static_cast<int>(k) == labels[b] ? T(1) : T(0))) * scale;
      }
  }
  return loss;
}

/// Mean over the batch of -sum_k t_k log softmax(z / tau)_k for soft
/// target rows t (each summing to one).
template <class T>
T soft_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets,
                     T temperature = T(1), Tensor<T>* grad = nullptr) {
  if (logits.shape() != targets.shape())
    throw InputContractError("soft targets " + shape_str(targets.shape()) +
                             " do not match logits " + shape_str(logits.shape()));
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  const Tensor<T> logp = log_softmax_rows(logits, temperature);
  T loss = 0;
  for (std::size_t i = 0; i < logp.size(); ++i) loss -= targets[i] * logp[i];
  loss /= static_cast<T>(B);
  if (grad) {
    *grad = Tensor<T>(logits.shape());
    const T scale = T(1) / (temperature * static_cast<T>(B));
    for (std::size_t b = 0; b < B; ++b) {
      T mass = 0;
      for (std::size_t k = 0; k < K; ++k) mass += targets.at(b, k);
      for (std::size_t k = 0; k < K; ++k)
        grad->at(b, k) =
            (std::exp(logp.at(b, k)) * mass - targets.at(b, k)) * scale;
    }
  }
  return loss;
}

/// Mean over the batch of the squared L2 distance between rows.
template <class T>
T mse_rows(const Tensor<T>& pred, const Tensor<T>& target,
           Tensor<T>* grad = nullptr) {
  if (pred.shape() != target.shape())
    throw InputContractError("mse shapes differ: " + shape_str(pred.shape()) +
                             " vs " + shape_str(target.shape()));
  const T B = static_cast<T>(pred.dim(0));
  T loss = 0;
  if (grad) *grad = Tensor<T>(pred.shape());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T d = pred[i] - target[i];
    loss += d * d;
    if (grad) (*grad)[i] = T(2) * d / B;
  }
  return loss / B;
}

/// Shannon entropy (natural log) of a probability vector; 0 log 0 = 0.
template <class T>
T entropy(std::span<const T> p) {
  T h = 0;
  for (T v : p)
    if (v > T(0)) h -= v * std::log(v);
  return h;
}

}  // namespace exml
