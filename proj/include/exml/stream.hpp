// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "exml/baselines.hpp"
#include "exml/distiller.hpp"
#include "exml/model_zoo.hpp"
#include "exml/scenario.hpp"

namespace exml {

/// Experiences of a scenario together with one trained expert each.
template <class T>
struct TrainedStream {
  std::vector<ExperienceData<T>> experiences;
  std::vector<ExpertModel<T>> experts;

  std::vector<StreamStep> steps() const {
    std::vector<StreamStep> out;
    for (const auto& e : experiences) out.push_back({e.class_set, e.task_label});
    return out;
  }

  ExpertStream<T> stream() const { return ExpertStream<T>::in_memory(experts, steps()); }

  EnsembleModel<T> ensemble(bool average_probabilities = false) const {
    EnsembleModel<T> ens{experts, {}, average_probabilities};
    for (const auto& e : experiences) ens.class_sets.push_back(e.class_set);
    return ens;
  }

  std::vector<Dataset<T>> train_sets() const {
    std::vector<Dataset<T>> out;
    for (const auto& e : experiences) out.push_back(e.train);
    return out;
  }

  std::vector<std::vector<int>> class_sets() const {
    std::vector<std::vector<int>> out;
    for (const auto& e : experiences) out.push_back(e.class_set);
    return out;
  }
};

/// Seed of the i-th expert of a stream trained under `seed`.
inline std::uint64_t expert_seed(std::uint64_t seed, std::size_t i) {
  return seed * 1000003ull + i;
}

template <class T>
TrainedStream<T> train_stream(std::vector<ExperienceData<T>> experiences,
                              const ArchitectureSpec& arch, const TrainConfig& cfg,
                              std::uint64_t seed) {
  TrainedStream<T> out{std::move(experiences), {}};
  for (std::size_t i = 0; i < out.experiences.size(); ++i)
    out.experts.push_back(train_expert(out.experiences[i].train, arch, cfg, expert_seed(seed, i)));
  return out;
}

}  // namespace exml
