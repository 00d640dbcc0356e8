// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <vector>

#include "exml/augment.hpp"
#include "exml/buffer.hpp"
#include "exml/generators.hpp"
#include "exml/losses.hpp"
#include "exml/model_zoo.hpp"
#include "exml/optim.hpp"
#include "exml/scenario.hpp"

namespace exml {

enum class LogitNormalization { L2, Standardize };

inline std::string to_string(LogitNormalization n) {
  return n == LogitNormalization::L2 ? "l2" : "standardize";
}

/// Distillation hyperparameters (desk-scale defaults; see
/// `digits_reference()` for full-scale MNIST values).
struct DistillConfig {
  double lr = 0.05;
  std::size_t iterations = 1500;
  std::size_t mb_size = 32;
  double lambda_ce = 1.0;
  /// Carried for completeness; the ED loss matches raw logits and does not
  /// use it.
  double temperature = 2.0;
  double momentum = 0.9;
  double weight_decay = 0.0;
  LogitNormalization normalize = LogitNormalization::L2;
  AugmentFlags augment{true, false, false};

  friend bool operator==(const DistillConfig&, const DistillConfig&) = default;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("distill lr must be > 0");
    if (mb_size == 0) throw ConfigError("distill mb_size must be > 0");
    if (lambda_ce < 0) throw ConfigError("distill lambda_ce must be >= 0");
    if (!(temperature > 0)) throw ConfigError("distill temperature must be > 0");
    if (momentum < 0 || momentum >= 1) throw ConfigError("distill momentum must be in [0, 1)");
    if (weight_decay < 0) throw ConfigError("distill weight_decay must be >= 0");
  }

  /// MNIST: lr 0.01, 30000 iterations, mini-batch 32, temperature 2.0.
  static DistillConfig digits_reference() {
    DistillConfig c;
    c.lr = 0.01;
    c.iterations = 30000;
    c.mb_size = 32;
    c.temperature = 2.0;
    return c;
  }
};

/// Row-wise logit normalization: v / ||v||_2, or (v - mean) / std. Zero rows
/// stay zero.
template <class T>
Tensor<T> normalize_logits(const Tensor<T>& z, LogitNormalization mode) {
  Tensor<T> out = z;
  const std::size_t K = z.dim(1);
  for (std::size_t b = 0; b < z.dim(0); ++b) {
    auto r = out.row(b);
    if (mode == LogitNormalization::L2) {
      T s = 0;
      for (T v : r) s += v * v;
      const T n = std::sqrt(s);
      if (n > T(0))
        for (T& v : r) v /= n;
    } else {
      T mean = 0;
      for (T v : r) mean += v;
      mean /= static_cast<T>(K);
      T var = 0;
      for (T v : r) var += (v - mean) * (v - mean);
      const T sd = std::sqrt(var / static_cast<T>(K));
      for (T& v : r) v = sd > T(0) ? (v - mean) / sd : T(0);
    }
  }
  return out;
}

enum class FusionBranch { Previous, Expert, Both };

/// Which teacher(s) a sample with label y takes its target from.
inline FusionBranch fusion_branch(int y, const std::set<int>& prev_classes,
                                  const std::set<int>& expert_classes) {
  const bool in_prev = prev_classes.count(y) > 0;
  const bool in_expert = expert_classes.count(y) > 0;
  if (in_prev && in_expert) return FusionBranch::Both;
  if (in_prev) return FusionBranch::Previous;
  if (in_expert) return FusionBranch::Expert;
  throw UnassignableSampleError("label " + std::to_string(y) +
                                " belongs to neither the ex-model nor the expert");
}

/// Fused targets from precomputed logits: normalized previous logits,
/// normalized expert logits, or their average, chosen per sample by label
/// membership.
template <class T>
Tensor<T> fuse_logits(const Tensor<T>& prev_logits, const Tensor<T>& expert_logits,
                      std::span<const int> labels, const std::set<int>& prev_classes,
                      const std::set<int>& expert_classes,
                      LogitNormalization mode = LogitNormalization::L2) {
  if (prev_logits.shape() != expert_logits.shape())
    throw InputContractError("ex-model and expert logits differ in shape");
  const Tensor<T> p = normalize_logits(prev_logits, mode);
  const Tensor<T> e = normalize_logits(expert_logits, mode);
  Tensor<T> out(p.shape());
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const auto branch = fusion_branch(labels[b], prev_classes, expert_classes);
    for (std::size_t k = 0; k < out.dim(1); ++k) {
      switch (branch) {
        case FusionBranch::Previous: out.at(b, k) = p.at(b, k); break;
        case FusionBranch::Expert: out.at(b, k) = e.at(b, k); break;
        case FusionBranch::Both: out.at(b, k) = (p.at(b, k) + e.at(b, k)) / T(2); break;
      }
    }
  }
  return out;
}

/// Fused distillation targets for a batch (teachers in eval mode).
template <class T>
Tensor<T> fuse_targets(const Tensor<T>& x, std::span<const int> labels, const ExModel<T>& prev,
                       const ExpertModel<T>& expert, const std::set<int>& expert_classes,
                       LogitNormalization mode = LogitNormalization::L2) {
  const Tensor<T> ze = expert.forward(x);
  const Tensor<T> zp = prev.seen_classes.empty() ? Tensor<T>(ze.shape()) : prev.net.forward(x);
  return fuse_logits(zp, ze, labels, prev.seen_classes, expert_classes, mode);
}

template <class T>
struct EdLoss {
  T total = 0;
  T mse = 0;
  T ce = 0;
};

/// ||y - target||^2 (mean over batch) + lambda_ce * CE(y, labels).
template <class T>
EdLoss<T> ed_loss(const Tensor<T>& logits, const Tensor<T>& targets,
                  std::span<const int> labels, T lambda_ce, Tensor<T>* grad = nullptr) {
  EdLoss<T> out;
  Tensor<T> gm, gc;
  out.mse = mse_rows(logits, targets, grad ? &gm : nullptr);
  out.ce = cross_entropy<T>(logits, labels, T(1), grad ? &gc : nullptr);
  out.total = out.mse + lambda_ce * out.ce;
  if (grad) {
    *grad = gm;
    for (std::size_t i = 0; i < grad->size(); ++i) (*grad)[i] += lambda_ce * gc[i];
  }
  return out;
}

/// Optional progress callback: (iteration, loss).
template <class T>
using DistillProgress = std::function<void(std::size_t, const EdLoss<T>&)>;

/// Trains a copy of `prev` for cfg.iterations SGD steps on random buffer
/// mini-batches (with replacement) against fused targets. The returned
/// ex-model has seen_classes = prev.seen_classes U expert_classes.
template <class T>
ExModel<T> distill_experience(const ExModel<T>& prev, const ExpertModel<T>& expert,
                              std::span<const int> expert_classes,
                              const SyntheticBuffer<T>& buffer, const DistillConfig& cfg,
                              std::mt19937_64& rng, const DistillProgress<T>& progress = {}) {
  cfg.validate();
  if (prev.net.num_classes() != expert.num_classes())
    throw ArchitectureMismatchError("ex-model and expert output widths differ");
  const std::set<int> ecls(expert_classes.begin(), expert_classes.end());
  ExModel<T> student = prev;
  student.seen_classes.insert(ecls.begin(), ecls.end());
  if (cfg.iterations == 0) return student;
  if (buffer.empty()) throw InputContractError("cannot distill from an empty buffer");

  Sgd<T> opt(static_cast<T>(cfg.lr), static_cast<T>(cfg.momentum),
             static_cast<T>(cfg.weight_decay));
  auto params = student.net.trainable_parameters();
  std::uniform_int_distribution<std::size_t> pick(0, buffer.size() - 1);
  std::vector<std::size_t> idx(cfg.mb_size);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    for (auto& i : idx) i = pick(rng);
    const Tensor<T> x = augment(buffer.inputs(idx), cfg.augment, rng);
    const std::vector<int> y = buffer.labels(idx);
    const Tensor<T> target = fuse_targets(x, y, prev, expert, ecls, cfg.normalize);

    Tape<T> tape;
    const Tensor<T> logits = student.net.forward(x, Mode::Train, &tape);
    Tensor<T> dlogits;
    const auto loss = ed_loss<T>(logits, target, y, static_cast<T>(cfg.lambda_ce), &dlogits);
    if (!std::isfinite(loss.total))
      throw DivergenceError("distillation loss is not finite", it);
    auto grads = student.net.zero_gradients();
    student.net.backward(tape, dlogits, &grads);
    opt.step(params, grads);
    student.net.update_running_stats(tape);
    if (progress) progress(it, loss);
  }
  return student;
}

/// One experience of a stream: class set and optional task label. The
/// expert itself is fetched on demand.
struct StreamStep {
  std::vector<int> class_set;
  std::optional<int> task_label;
};

/// Ordered sequence of experts, materialized one at a time through `load`.
template <class T>
struct ExpertStream {
  std::vector<StreamStep> steps;
  std::function<ExpertModel<T>(std::size_t)> load;

  std::size_t size() const { return steps.size(); }

  static ExpertStream in_memory(std::vector<ExpertModel<T>> experts,
                                std::vector<StreamStep> steps) {
    if (experts.size() != steps.size())
      throw InputContractError("expert and class-set counts differ");
    auto shared = std::make_shared<std::vector<ExpertModel<T>>>(std::move(experts));
    return {std::move(steps), [shared](std::size_t i) { return shared->at(i); }};
  }
};

/// Counts live models of each kind during run_exml.
struct ResidencyMonitor {
  std::size_t experts = 0;
  std::size_t peak_experts = 0;
  std::size_t exmodels = 0;
  std::size_t peak_exmodels = 0;

  void acquire_expert() { peak_experts = std::max(peak_experts, ++experts); }
  void release_expert() { --experts; }
  void acquire_exmodel() { peak_exmodels = std::max(peak_exmodels, ++exmodels); }
  void release_exmodel() { --exmodels; }
};

/// Fresh samples for experience i (0-based) from the current expert.
template <class T>
using BufferSource = std::function<std::vector<LabeledSample<T>>(
    const ExpertModel<T>&, const StreamStep&, std::size_t i, std::size_t count,
    std::mt19937_64&)>;

template <class T>
BufferSource<T> generator_source(GeneratorConfig cfg, const Dataset<T>* aux = nullptr) {
  return [cfg, aux](const ExpertModel<T>& expert, const StreamStep& step, std::size_t,
                    std::size_t count, std::mt19937_64& rng) {
    return generate(expert, std::span<const int>(step.class_set), count, cfg, rng, aux);
  };
}

/// Real training data of each experience (replay; not data-free).
template <class T>
BufferSource<T> replay_source(std::vector<Dataset<T>> real) {
  auto shared = std::make_shared<std::vector<Dataset<T>>>(std::move(real));
  return [shared](const ExpertModel<T>&, const StreamStep&, std::size_t i, std::size_t count,
                  std::mt19937_64& rng) { return real_subsample(shared->at(i), count, rng); };
}

struct ExperienceRecord {
  std::size_t experience_index = 0;  // 0-based
  StreamEval eval;
  double wall_time_seconds = 0;
};

template <class T>
struct ExmlResult {
  ExModel<T> model;
  std::vector<ExperienceRecord> history;
};

template <class T>
using ModelEvaluator = std::function<StreamEval(const Model<T>&)>;

/// Consolidates an expert stream: per experience, refresh the buffer from the
/// current expert then distill it into the ex-model. Holds at most one
/// stream expert at a time.
template <class T>
ExmlResult<T> run_exml(const ExpertStream<T>& stream, const ArchitectureSpec& arch,
                       const BufferSource<T>& source, std::size_t buffer_capacity,
                       const DistillConfig& cfg, std::uint64_t seed,
                       const ModelEvaluator<T>& evaluate = {},
                       ResidencyMonitor* monitor = nullptr) {
  if (stream.size() == 0) throw ScenarioError("empty expert stream");
  cfg.validate();
  ResidencyMonitor local;
  ResidencyMonitor& mon = monitor ? *monitor : local;
  std::mt19937_64 rng(seed);
  ExmlResult<T> out{ExModel<T>{Model<T>::create(arch, seed), {}}, {}};
  mon.acquire_exmodel();
  SyntheticBuffer<T> buffer(buffer_capacity);
  for (std::size_t i = 0; i < stream.size(); ++i) {
    const auto start = std::chrono::steady_clock::now();
    const StreamStep& step = stream.steps[i];
    ExModel<T> next;
    {
      const ExpertModel<T> expert = stream.load(i);
      mon.acquire_expert();
      buffer_update<T>(
          buffer, i + 1,
          [&](std::size_t count) { return source(expert, step, i, count, rng); }, rng);
      mon.acquire_exmodel();
      next = distill_experience(out.model, expert, std::span<const int>(step.class_set),
                                buffer, cfg, rng);
      mon.release_expert();
    }
    out.model = std::move(next);
    mon.release_exmodel();
    ExperienceRecord rec;
    rec.experience_index = i;
    rec.wall_time_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (evaluate) rec.eval = evaluate(out.model.net);
    out.history.push_back(std::move(rec));
  }
  mon.release_exmodel();
  return out;
}

}  // namespace exml
