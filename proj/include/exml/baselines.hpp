// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "exml/distiller.hpp"
#include "exml/losses.hpp"
#include "exml/model_zoo.hpp"
#include "exml/scenario.hpp"

namespace exml {

/// The full stream of experts with their class sets. Keeping every expert is
/// what makes the ensemble baselines violate the ex-model constraints.
template <class T>
struct EnsembleModel {
  std::vector<ExpertModel<T>> experts;
  std::vector<std::vector<int>> class_sets;
  bool average_probabilities = false;  // predict_avg: softmax before averaging

  void check() const {
    if (experts.empty()) throw InputContractError("empty ensemble");
    if (experts.size() != class_sets.size())
      throw InputContractError("ensemble has " + std::to_string(experts.size()) +
                               " experts but " + std::to_string(class_sets.size()) +
                               " class sets");
  }
};

/// Prediction of the task's own expert with other tasks' classes masked out.
template <class T>
std::vector<int> predict_oracle(const EnsembleModel<T>& ens, const Tensor<T>& x, int task_label) {
  ens.check();
  if (task_label < 0 || static_cast<std::size_t>(task_label) >= ens.experts.size())
    throw InputContractError("task label " + std::to_string(task_label) +
                             " does not index one of " + std::to_string(ens.experts.size()) +
                             " experts");
  const auto& cls = ens.class_sets[task_label];
  const Tensor<T> z = ens.experts[task_label].forward(x);
  std::vector<int> out;
  for (std::size_t r = 0; r < z.dim(0); ++r)
    out.push_back(masked_argmax(z.row(r), std::span<const int>(cls)));
  return out;
}

/// Argmax of the element-wise mean of expert logits (or probabilities).
template <class T>
std::vector<int> predict_avg(const EnsembleModel<T>& ens, const Tensor<T>& x) {
  ens.check();
  Tensor<T> sum;
  for (const auto& e : ens.experts) {
    Tensor<T> z = e.forward(x);
    if (ens.average_probabilities) z = softmax_rows(z);
    if (sum.empty())
      sum = std::move(z);
    else
      sum += z;
  }
  sum *= T(1) / static_cast<T>(ens.experts.size());
  std::vector<int> out;
  for (std::size_t r = 0; r < sum.dim(0); ++r)
    out.push_back(static_cast<int>(argmax(std::as_const(sum).row(r))));
  return out;
}

/// Per sample, the argmax of the expert whose softmax has the lowest entropy
/// (natural log; lowest expert index on ties).
template <class T>
std::vector<int> predict_min_entropy(const EnsembleModel<T>& ens, const Tensor<T>& x) {
  ens.check();
  std::vector<Tensor<T>> probs;
  for (const auto& e : ens.experts) probs.push_back(softmax_rows(e.forward(x)));
  std::vector<int> out;
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    std::size_t best = 0;
    double best_h = 0;
    for (std::size_t j = 0; j < probs.size(); ++j) {
      const double h = entropy(std::as_const(probs[j]).row(r));
      if (j == 0 || h < best_h) {
        best = j;
        best_h = h;
      }
    }
    out.push_back(static_cast<int>(argmax(std::as_const(probs[best]).row(r))));
  }
  return out;
}

enum class EnsembleMode { Oracle, Average, MinEntropy };

/// Stream predictor for an ensemble. The oracle identifies an experience's
/// expert by its task label, or else by its class set.
template <class T>
Predictor<T> ensemble_predictor(const EnsembleModel<T>& ens, EnsembleMode mode) {
  return [&ens, mode](const Tensor<T>& x, const ExperienceData<T>& e) {
    switch (mode) {
      case EnsembleMode::Average: return predict_avg(ens, x);
      case EnsembleMode::MinEntropy: return predict_min_entropy(ens, x);
      case EnsembleMode::Oracle: break;
    }
    int task = e.task_label.value_or(-1);
    if (task < 0) {
      const auto it = std::find(ens.class_sets.begin(), ens.class_sets.end(), e.class_set);
      if (it == ens.class_sets.end())
        throw InputContractError("oracle cannot match an experience to an expert");
      task = static_cast<int>(it - ens.class_sets.begin());
    }
    return predict_oracle(ens, x, task);
  };
}

/// Running element-wise mean of every parameter tensor, normalization
/// statistics included. Consumes experts one at a time; all must share one
/// architecture.
template <class T>
class ParamAverager {
 public:
  void add(const ExpertModel<T>& expert) {
    if (count_ == 0) {
      sum_ = Model<T>::zeros(expert.architecture());
      sum_.visit([](const std::string&, Tensor<T>& t, bool) { t.fill(T(0)); });
    } else if (expert.architecture_id() != sum_.architecture_id()) {
      throw ArchitectureMismatchError("cannot average " + sum_.architecture_id() + " with " +
                                      expert.architecture_id());
    }
    std::vector<Tensor<T>*> dst;
    sum_.visit([&](const std::string&, Tensor<T>& t, bool) { dst.push_back(&t); });
    std::size_t k = 0;
    expert.visit([&](const std::string&, const Tensor<T>& t, bool) { *dst[k++] += t; });
    ++count_;
  }

  std::size_t count() const { return count_; }

  Model<T> mean() const {
    if (count_ == 0) throw InputContractError("cannot average zero experts");
    Model<T> out = sum_;
    out.visit([&](const std::string&, Tensor<T>& t, bool) {
      t *= T(1) / static_cast<T>(count_);
    });
    return out;
  }

 private:
  Model<T> sum_;
  std::size_t count_ = 0;
};

template <class T>
ExModel<T> param_average(std::span<const ExpertModel<T>> experts,
                         std::span<const std::vector<int>> class_sets = {}) {
  ParamAverager<T> avg;
  for (const auto& e : experts) avg.add(e);
  ExModel<T> out{avg.mean(), {}};
  for (const auto& cs : class_sets) out.seen_classes.insert(cs.begin(), cs.end());
  return out;
}

/// Ex-model distillation on real per-experience training data instead of
/// synthetic samples.
template <class T>
ExmlResult<T> replay_ed(const ExpertStream<T>& stream, std::vector<Dataset<T>> real,
                        const ArchitectureSpec& arch, std::size_t buffer_capacity,
                        const DistillConfig& cfg, std::uint64_t seed,
                        const ModelEvaluator<T>& evaluate = {}) {
  if (real.size() != stream.size())
    throw InputContractError("replay needs one real dataset per experience");
  for (const auto& d : real)
    if (d.empty()) throw InputContractError("replay buffer source has zero real samples");
  return run_exml(stream, arch, replay_source(std::move(real)), buffer_capacity, cfg, seed,
                  evaluate);
}

}  // namespace exml
