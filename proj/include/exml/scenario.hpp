// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "exml/dataset.hpp"
#include "exml/model.hpp"

namespace exml {

enum class ScenarioKind { NC, NI, MT, Joint };

inline std::string to_string(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::NC: return "NC";
    case ScenarioKind::NI: return "NI";
    case ScenarioKind::MT: return "MT";
    case ScenarioKind::Joint: return "Joint";
  }
  return "?";
}

inline ScenarioKind parse_scenario_kind(const std::string& s) {
  if (s == "NC") return ScenarioKind::NC;
  if (s == "NI") return ScenarioKind::NI;
  if (s == "MT") return ScenarioKind::MT;
  if (s == "Joint") return ScenarioKind::Joint;
  throw ConfigError("unknown scenario kind '" + s + "' (NC, NI, MT, Joint)");
}

/// How a base dataset is split into experiences. For NC/MT a single
/// classes_per_step entry is repeated for every experience.
struct ScenarioSpec {
  ScenarioKind kind = ScenarioKind::NC;
  std::size_t n_experiences = 5;
  std::vector<std::size_t> classes_per_step{2};
  std::uint64_t seed = 0;

  friend bool operator==(const ScenarioSpec&, const ScenarioSpec&) = default;

  std::vector<std::size_t> step_sizes() const {
    if (classes_per_step.size() == 1)
      return std::vector<std::size_t>(n_experiences, classes_per_step[0]);
    return classes_per_step;
  }
};

template <class T>
struct ExperienceData {
  Dataset<T> train;
  Dataset<T> test;
  std::vector<int> class_set;  // sorted
  std::optional<int> task_label;
};

namespace detail {

template <class T>
std::map<int, std::vector<std::size_t>> indices_by_class(const Dataset<T>& d) {
  std::map<int, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < d.size(); ++i) out[d.labels[i]].push_back(i);
  return out;
}

template <class T>
Dataset<T> restrict_to(const Dataset<T>& d, const std::set<int>& classes) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (classes.count(d.labels[i])) idx.push_back(i);
  return d.subset(idx);
}

}  // namespace detail

/// Splits a dataset into a stream of experiences.
template <class T>
std::vector<ExperienceData<T>> build_scenario(const SplitDataset<T>& data,
                                              const ScenarioSpec& spec) {
  const std::size_t K = data.train.num_classes;
  if (spec.n_experiences == 0)
    throw ScenarioError("a scenario needs at least one experience");
  std::set<int> present;
  for (int y : data.train.labels) present.insert(y);
  std::vector<ExperienceData<T>> out;

  switch (spec.kind) {
    case ScenarioKind::Joint: {
      if (spec.n_experiences != 1)
        throw ScenarioError("Joint scenarios have exactly one experience");
      ExperienceData<T> e{data.train, data.test,
                          std::vector<int>(present.begin(), present.end()),
                          std::nullopt};
      out.push_back(std::move(e));
      break;
    }
    case ScenarioKind::NC:
    case ScenarioKind::MT: {
      const auto sizes = spec.step_sizes();
      if (sizes.size() != spec.n_experiences)
        throw ScenarioError("classes_per_step lists " +
                            std::to_string(sizes.size()) + " entries for " +
                            std::to_string(spec.n_experiences) + " experiences");
      const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
      if (total > K)
        throw ScenarioError("scenario needs " + std::to_string(total) +
                            " classes, dataset has " + std::to_string(K));
      std::vector<int> order(K);
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(spec.seed);
      std::shuffle(order.begin(), order.end(), rng);
      std::size_t pos = 0;
      for (std::size_t i = 0; i < sizes.size(); ++i) {
        if (sizes[i] == 0) throw ScenarioError("empty class step");
        std::set<int> cls(order.begin() + pos, order.begin() + pos + sizes[i]);
        pos += sizes[i];
        for (int c : cls)
          if (!present.count(c))
            throw ScenarioError("class " + std::to_string(c) +
                                " has no training samples");
        ExperienceData<T> e{detail::restrict_to(data.train, cls),
                            detail::restrict_to(data.test, cls),
                            std::vector<int>(cls.begin(), cls.end()),
                            std::nullopt};
        if (spec.kind == ScenarioKind::MT) e.task_label = static_cast<int>(i);
        out.push_back(std::move(e));
      }
      break;
    }
    case ScenarioKind::NI: {
      const std::size_t n = spec.n_experiences;
      std::mt19937_64 rng(spec.seed);
      auto split = [&](const Dataset<T>& d) {
        std::vector<std::vector<std::size_t>> parts(n);
        for (auto& [cls, idx] : detail::indices_by_class(d)) {
          if (idx.size() < n)
            throw ScenarioError("class " + std::to_string(cls) + " has " +
                                std::to_string(idx.size()) +
                                " samples, fewer than " + std::to_string(n) +
                                " experiences");
          std::shuffle(idx.begin(), idx.end(), rng);
          for (std::size_t j = 0; j < idx.size(); ++j) parts[j % n].push_back(idx[j]);
        }
        for (auto& p : parts) std::sort(p.begin(), p.end());
        return parts;
      };
      const auto train_parts = split(data.train);
      const auto test_parts = split(data.test);
      for (std::size_t i = 0; i < n; ++i)
        out.push_back({data.train.subset(train_parts[i]),
                       data.test.subset(test_parts[i]),
                       std::vector<int>(present.begin(), present.end()),
                       std::nullopt});
      break;
    }
  }
  return out;
}

/// Correct/total counts per experience test set.
struct StreamEval {
  std::vector<std::size_t> correct;
  std::vector<std::size_t> total;

  std::vector<double> per_experience() const {
    std::vector<double> out;
    for (std::size_t i = 0; i < total.size(); ++i)
      out.push_back(total[i] ? static_cast<double>(correct[i]) / total[i] : 0.0);
    return out;
  }

  /// Test-set-size-weighted accuracy over the stream.
  double stream_accuracy() const {
    const std::size_t n = std::accumulate(total.begin(), total.end(), std::size_t{0});
    if (n == 0) throw MetricError("stream accuracy over empty test sets");
    const std::size_t c = std::accumulate(correct.begin(), correct.end(), std::size_t{0});
    return static_cast<double>(c) / static_cast<double>(n);
  }
};

/// Batch predictor: (inputs, experience) -> predicted labels. The experience
/// lets evaluators use its task label.
template <class T>
using Predictor =
    std::function<std::vector<int>(const Tensor<T>&, const ExperienceData<T>&)>;

template <class T>
StreamEval evaluate_stream(const Predictor<T>& predict,
                           const std::vector<ExperienceData<T>>& experiences,
                           std::size_t chunk = 512) {
  StreamEval ev;
  for (const auto& e : experiences) {
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < e.test.size(); start += chunk) {
      idx.resize(std::min(chunk, e.test.size() - start));
      std::iota(idx.begin(), idx.end(), start);
      const auto pred = predict(gather_rows(e.test.inputs, std::span<const std::size_t>(idx)), e);
      for (std::size_t r = 0; r < idx.size(); ++r)
        correct += pred[r] == e.test.labels[idx[r]];
    }
    ev.correct.push_back(correct);
    ev.total.push_back(e.test.size());
  }
  return ev;
}

/// Argmax over `allowed` classes only (lowest index wins ties).
template <class T>
int masked_argmax(std::span<const T> logits, std::span<const int> allowed) {
  int best = allowed.front();
  for (int c : allowed)
    if (logits[c] > logits[best] || (logits[c] == logits[best] && c < best)) best = c;
  return best;
}

/// Single-head predictor of a model. With `use_task_labels`, experiences that
/// carry a task label are predicted with logits outside their class set
/// masked out.
template <class T>
Predictor<T> model_predictor(const Model<T>& model, bool use_task_labels = false) {
  return [&model, use_task_labels](const Tensor<T>& x, const ExperienceData<T>& e) {
    const Tensor<T> logits = model.forward(x);
    std::vector<int> out;
    for (std::size_t r = 0; r < logits.dim(0); ++r) {
      if (use_task_labels && e.task_label)
        out.push_back(masked_argmax(logits.row(r), std::span<const int>(e.class_set)));
      else
        out.push_back(static_cast<int>(argmax(logits.row(r))));
    }
    return out;
  };
}

template <class T>
double stream_accuracy(const Model<T>& model,
                       const std::vector<ExperienceData<T>>& experiences,
                       bool use_task_labels = false) {
  return evaluate_stream(model_predictor(model, use_task_labels), experiences)
      .stream_accuracy();
}

}  // namespace exml
