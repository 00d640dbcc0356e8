// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <vector>

#include "exml/dataset.hpp"
#include "exml/errors.hpp"
#include "exml/generators.hpp"

namespace exml {

template <class T>
struct BufferEntry {
  Tensor<T> x;
  int y = 0;
  std::size_t source_experience = 0;  // 1-based
};

/// Fixed-capacity store of labeled surrogate samples.
template <class T>
class SyntheticBuffer {
 public:
  explicit SyntheticBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("buffer capacity must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<BufferEntry<T>>& entries() const { return entries_; }
  const BufferEntry<T>& operator[](std::size_t i) const { return entries_[i]; }

  std::map<std::size_t, std::size_t> count_by_source() const {
    std::map<std::size_t, std::size_t> out;
    for (const auto& e : entries_) ++out[e.source_experience];
    return out;
  }

  std::map<int, std::size_t> count_by_class() const {
    std::map<int, std::size_t> out;
    for (const auto& e : entries_) ++out[e.y];
    return out;
  }

  /// Replaces the contents. Throws if the new contents exceed capacity.
  void assign(std::vector<BufferEntry<T>> entries) {
    if (entries.size() > capacity_)
      throw InputContractError("buffer of capacity " + std::to_string(capacity_) +
                               " cannot hold " + std::to_string(entries.size()) +
                               " entries");
    entries_ = std::move(entries);
  }

  /// Stacks entries [indices] into a batch.
  Tensor<T> inputs(std::span<const std::size_t> indices) const {
    std::vector<const Tensor<T>*> rows;
    rows.reserve(indices.size());
    for (auto i : indices) rows.push_back(&entries_.at(i).x);
    return stack_rows(rows);
  }

  std::vector<int> labels(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(entries_.at(i).y);
    return out;
  }

 private:
  static Tensor<T> stack_rows(const std::vector<const Tensor<T>*>& rows) {
    if (rows.empty()) return Tensor<T>();
    Shape s{rows.size()};
    s.insert(s.end(), rows[0]->shape().begin(), rows[0]->shape().end());
    Tensor<T> out(s);
    const std::size_t n = rows[0]->size();
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy(rows[r]->data(), rows[r]->data() + n, out.data() + r * n);
    return out;
  }

  std::size_t capacity_;
  std::vector<BufferEntry<T>> entries_;
};

/// Number of fresh samples at experience i: round(N / i), halves away from
/// zero.
inline std::size_t buffer_quota(std::size_t capacity, std::size_t i) {
  if (i == 0) throw InputContractError("experience index is 1-based");
  return static_cast<std::size_t>(
      std::llround(static_cast<double>(capacity) / static_cast<double>(i)));
}

/// Splits `total` as evenly as possible over groups with the given
/// availabilities: equal shares, remainders to the lowest-index groups still
/// under capacity, and overflow from exhausted groups redistributed.
inline std::vector<std::size_t> apportion(std::size_t total,
                                          const std::vector<std::size_t>& available) {
  std::vector<std::size_t> out(available.size(), 0);
  std::size_t remaining = std::min(
      total, std::accumulate(available.begin(), available.end(), std::size_t{0}));
  while (remaining > 0) {
    std::vector<std::size_t> open;
    for (std::size_t g = 0; g < available.size(); ++g)
      if (out[g] < available[g]) open.push_back(g);
    const std::size_t share = remaining / open.size();
    std::size_t extra = remaining % open.size();
    for (auto g : open) {
      std::size_t want = share;
      if (extra > 0) {
        ++want;
        --extra;
      }
      const std::size_t give = std::min(want, available[g] - out[g]);
      out[g] += give;
      remaining -= give;
    }
  }
  return out;
}

/// Class-stratified subsample of `n` entries: apportioned over past
/// experiences first, then over classes within each experience.
template <class T>
std::vector<BufferEntry<T>> stratified_subsample(const std::vector<BufferEntry<T>>& entries,
                                                 std::size_t n, std::mt19937_64& rng) {
  std::map<std::size_t, std::map<int, std::vector<std::size_t>>> groups;
  for (std::size_t i = 0; i < entries.size(); ++i)
    groups[entries[i].source_experience][entries[i].y].push_back(i);

  std::vector<std::size_t> per_source_avail;
  for (const auto& [src, by_class] : groups) {
    std::size_t c = 0;
    for (const auto& [y, idx] : by_class) c += idx.size();
    per_source_avail.push_back(c);
  }
  const auto per_source = apportion(n, per_source_avail);

  std::vector<std::size_t> keep;
  std::size_t s = 0;
  for (auto& [src, by_class] : groups) {
    std::vector<std::size_t> avail;
    for (const auto& [y, idx] : by_class) avail.push_back(idx.size());
    const auto per_class = apportion(per_source[s++], avail);
    std::size_t c = 0;
    for (auto& [y, idx] : by_class) {
      std::shuffle(idx.begin(), idx.end(), rng);
      keep.insert(keep.end(), idx.begin(), idx.begin() + per_class[c++]);
    }
  }
  std::sort(keep.begin(), keep.end());
  std::vector<BufferEntry<T>> out;
  out.reserve(keep.size());
  for (auto i : keep) out.push_back(entries[i]);
  return out;
}

/// Produces `count` labeled samples for the current experience.
template <class T>
using SampleSource = std::function<std::vector<LabeledSample<T>>(std::size_t count)>;

struct BufferUpdateReport {
  std::size_t quota = 0;
  std::size_t retained = 0;
};

/// Refreshes the buffer for experience i (1-based): round(N/i) fresh
/// samples from `source`, plus N - round(N/i) retained from the old buffer by
/// stratified subsampling.
template <class T>
BufferUpdateReport buffer_update(SyntheticBuffer<T>& buffer, std::size_t i,
                                 const SampleSource<T>& source, std::mt19937_64& rng) {
  const std::size_t N = buffer.capacity();
  const std::size_t quota = buffer_quota(N, i);
  auto entries = stratified_subsample(buffer.entries(), N - quota, rng);
  const std::size_t retained = entries.size();
  auto fresh = source(quota);
  if (fresh.size() != quota)
    throw InputContractError("sample source returned " + std::to_string(fresh.size()) +
                             " samples, expected " + std::to_string(quota));
  for (auto& s : fresh) entries.push_back({std::move(s.x), s.y, i});
  buffer.assign(std::move(entries));
  return {quota, retained};
}

/// buffer_update with a generator over an expert's class set.
template <class T>
BufferUpdateReport buffer_update(SyntheticBuffer<T>& buffer, const ExpertModel<T>& expert,
                                 std::span<const int> class_set, std::size_t i,
                                 const GeneratorConfig& gen, std::mt19937_64& rng,
                                 const Dataset<T>* aux = nullptr) {
  return buffer_update<T>(
      buffer, i,
      [&](std::size_t count) { return generate(expert, class_set, count, gen, rng, aux); },
      rng);
}

/// Class-balanced random draw of `count` real samples (with replacement only
/// when `count` exceeds the dataset).
template <class T>
std::vector<LabeledSample<T>> real_subsample(const Dataset<T>& data, std::size_t count,
                                             std::mt19937_64& rng) {
  if (data.empty()) throw InputContractError("real-data buffer source is empty");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);
  std::vector<std::size_t> avail;
  for (auto& [y, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    avail.push_back(idx.size());
  }
  const auto per_class = apportion(std::min(count, data.size()), avail);
  std::vector<std::size_t> picked;
  std::size_t c = 0;
  for (auto& [y, idx] : by_class) {
    picked.insert(picked.end(), idx.begin(), idx.begin() + per_class[c++]);
  }
  std::uniform_int_distribution<std::size_t> any(0, data.size() - 1);
  while (picked.size() < count) picked.push_back(any(rng));
  std::sort(picked.begin(), picked.end());
  std::vector<LabeledSample<T>> out;
  out.reserve(count);
  for (auto i : picked) out.push_back({data.sample(i), data.labels[i]});
  return out;
}

}  // namespace exml
