// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "exml/augment.hpp"
#include "exml/dataset.hpp"
#include "exml/losses.hpp"
#include "exml/model_zoo.hpp"
#include "exml/optim.hpp"
#include "exml/priors.hpp"
#include "exml/scenario.hpp"

namespace exml {

enum class GenMethod { ModelInversion, DataImpression, Auxiliary };

inline std::string to_string(GenMethod m) {
  switch (m) {
    case GenMethod::ModelInversion: return "model_inversion";
    case GenMethod::DataImpression: return "data_impression";
    case GenMethod::Auxiliary: return "auxiliary";
  }
  return "?";
}

enum class SampleOptimizerKind { Sgd, Adam };

/// How auxiliary samples are drawn from the pool: uniformly at random, or
/// class-balanced by taking the samples the expert labels most confidently.
enum class AuxSelection { Random, Confident };

/// Hyperparameters of synthetic-sample generation. The defaults are a
/// desk-scale profile; `digits_inversion_reference()` carries full-scale
/// MNIST model-inversion values.
struct GeneratorConfig {
  GenMethod method = GenMethod::ModelInversion;
  double lr = 0.05;
  std::size_t iterations = 100;
  double temperature = 2.0;
  double weight_l2 = 0.001;
  double weight_blur = 0.001;
  double weight_bns = 1.0;
  double beta = 10.0;  // data impression only
  std::size_t mb_size = 64;
  AugmentFlags augment{true, false, false};
  SampleOptimizerKind optimizer = SampleOptimizerKind::Adam;
  /// Stop a batch early once every sample's target probability (at
  /// temperature 1, unaugmented) exceeds this value. 0 disables.
  double stop_confidence = 0.0;
  AuxSelection aux_selection = AuxSelection::Confident;

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("generator lr must be > 0");
    if (iterations == 0) throw ConfigError("generator iterations must be > 0");
    if (!(temperature > 0)) throw ConfigError("generator temperature must be > 0");
    if (weight_l2 < 0 || weight_blur < 0 || weight_bns < 0)
      throw ConfigError("generator prior weights must be >= 0");
    if (method == GenMethod::DataImpression && !(beta > 0))
      throw ConfigError("data impression needs beta > 0");
    if (mb_size == 0) throw ConfigError("generator mb_size must be > 0");
  }

  /// Model Inversion on MNIST: lr 0.01, 3000 iterations, blur 0.001, BNS
  /// 1.0, weight decay 0.001, temperature 2.0.
  static GeneratorConfig digits_inversion_reference() {
    GeneratorConfig c;
    c.lr = 0.01;
    c.iterations = 3000;
    c.weight_blur = 0.001;
    c.weight_bns = 1.0;
    c.weight_l2 = 0.001;
    c.temperature = 2.0;
    return c;
  }
};

template <class T>
struct LabeledSample {
  Tensor<T> x;
  int y = 0;
};

/// Plain gradient descent or Adam on a synthetic batch.
template <class T>
class SampleOptimizer {
 public:
  SampleOptimizer(SampleOptimizerKind kind, double lr)
      : kind_(kind), lr_(static_cast<T>(lr)), adam_(static_cast<T>(lr)) {}

  void step(Tensor<T>& x, const Tensor<T>& g) {
    if (kind_ == SampleOptimizerKind::Adam) {
      adam_.step(x, g);
      return;
    }
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= lr_ * g[i];
  }

 private:
  SampleOptimizerKind kind_;
  T lr_;
  Adam<T> adam_;
};

template <class T>
struct GenerationLoss {
  T total = 0;
  T task = 0;  // cross-entropy against the hard or soft target
  PriorValues<T> priors;
};

/// Hard class labels (model inversion) or soft target rows (data impression).
template <class T>
using GenerationTarget = std::variant<std::vector<int>, Tensor<T>>;

/// Generation objective for a batch under a fixed augmentation:
///   CE(f(aug(x)) / tau, target) + w_l2 L_norm(x) + w_blur L_blur(x)
///     + w_bns L_bns(aug(x)).
/// Writes d total / d x into grad when given. The expert is only read.
template <class T>
GenerationLoss<T> generation_objective(const Tensor<T>& x,
                                       const GenerationTarget<T>& target,
                                       const ExpertModel<T>& expert,
                                       const GeneratorConfig& cfg,
                                       const Augmentation<T>& aug,
                                       Tensor<T>* grad = nullptr) {
  const T tau = static_cast<T>(cfg.temperature);
  const Tensor<T> xa = aug.apply(x);
  Tape<T> tape;
  const Tensor<T> logits = expert.forward(xa, Mode::Eval, &tape);
  GenerationLoss<T> out;
  Tensor<T> dlogits;
  Tensor<T>* dl = grad ? &dlogits : nullptr;
  if (const auto* hard = std::get_if<std::vector<int>>(&target))
    out.task = cross_entropy<T>(logits, *hard, tau, dl);
  else
    out.task = soft_cross_entropy<T>(logits, std::get<Tensor<T>>(target), tau, dl);

  const T w_bns = static_cast<T>(cfg.weight_bns);
  std::map<std::size_t, Tensor<T>> injections;
  out.priors.bns = bns_prior(expert, tape, grad ? &injections : nullptr, w_bns);

  Tensor<T> g_norm, g_blur;
  out.priors.norm = norm_prior(x, grad ? &g_norm : nullptr);
  out.priors.blur = blur_prior(x, grad ? &g_blur : nullptr);

  out.total = out.task + static_cast<T>(cfg.weight_l2) * out.priors.norm +
              static_cast<T>(cfg.weight_blur) * out.priors.blur + w_bns * out.priors.bns;

  if (grad) {
    *grad = aug.adjoint(expert.backward(tape, dlogits, nullptr, &injections));
    const T wl = static_cast<T>(cfg.weight_l2), wb = static_cast<T>(cfg.weight_blur);
    for (std::size_t i = 0; i < grad->size(); ++i)
      (*grad)[i] += wl * g_norm[i] + wb * g_blur[i];
  }
  return out;
}

namespace detail {

template <class T>
GenerationLoss<T> generation_step(Tensor<T>& x, const GenerationTarget<T>& target,
                                  const ExpertModel<T>& expert,
                                  const GeneratorConfig& cfg,
                                  SampleOptimizer<T>& opt, std::mt19937_64& rng,
                                  std::size_t iteration) {
  const auto aug = Augmentation<T>::sample(cfg.augment, x.shape(), rng);
  Tensor<T> grad;
  const auto loss = generation_objective(x, target, expert, cfg, aug, &grad);
  if (!std::isfinite(loss.total) || !grad.all_finite())
    throw DivergenceError("synthetic sample optimization diverged", iteration);
  opt.step(x, grad);
  return loss;
}

}  // namespace detail

/// One gradient update of a synthetic batch against hard targets. Only the
/// batch changes; the returned loss is the one evaluated before the update.
template <class T>
GenerationLoss<T> model_inversion_step(Tensor<T>& x, const std::vector<int>& targets,
                                       const ExpertModel<T>& expert,
                                       const GeneratorConfig& cfg,
                                       SampleOptimizer<T>& opt, std::mt19937_64& rng,
                                       std::size_t iteration = 0) {
  return detail::generation_step<T>(x, targets, expert, cfg, opt, rng, iteration);
}

/// One gradient update of a synthetic batch against soft Dirichlet targets.
template <class T>
GenerationLoss<T> data_impression_step(Tensor<T>& x, const Tensor<T>& targets,
                                       const ExpertModel<T>& expert,
                                       const GeneratorConfig& cfg,
                                       SampleOptimizer<T>& opt, std::mt19937_64& rng,
                                       std::size_t iteration = 0) {
  return detail::generation_step<T>(x, targets, expert, cfg, opt, rng, iteration);
}

/// Concentrations are floored here before scaling by beta, because cosine
/// similarities may be zero or negative.
inline constexpr double kSimilarityFloor = 1e-3;

/// C(k, j) = cos(w_k, w_j) over the classifier rows.
template <class T>
Tensor<double> class_similarity(const ExpertModel<T>& expert) {
  const Tensor<T>& W = expert.classifier_weights();
  const std::size_t K = W.dim(0), H = W.dim(1);
  std::vector<double> norms(K);
  for (std::size_t k = 0; k < K; ++k) {
    double s = 0;
    for (std::size_t h = 0; h < H; ++h) s += double(W.at(k, h)) * W.at(k, h);
    norms[k] = std::sqrt(s);
  }
  Tensor<double> C({K, K});
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t j = 0; j < K; ++j) {
      if (norms[k] == 0.0 || norms[j] == 0.0)
        throw SimilarityUndefinedError("classifier row " +
                                       std::to_string(norms[k] == 0.0 ? k : j) +
                                       " is all zero; cosine similarity undefined");
      double dot = 0;
      for (std::size_t h = 0; h < H; ++h) dot += double(W.at(k, h)) * W.at(j, h);
      C.at(k, j) = dot / (norms[k] * norms[j]);
    }
  return C;
}

/// Dirichlet concentration alpha^k = beta * max(C(k, .), floor).
template <class T>
std::vector<double> dirichlet_concentration(const ExpertModel<T>& expert,
                                            std::size_t class_k, double beta) {
  if (!(beta > 0)) throw ConfigError("dirichlet beta must be > 0");
  if (class_k >= expert.num_classes())
    throw InputContractError("class " + std::to_string(class_k) +
                             " outside expert width " +
                             std::to_string(expert.num_classes()));
  const Tensor<double> C = class_similarity(expert);
  std::vector<double> alpha(C.dim(1));
  for (std::size_t j = 0; j < alpha.size(); ++j)
    alpha[j] = beta * std::max(C.at(class_k, j), kSimilarityFloor);
  return alpha;
}

/// Draws one vector from Dir(alpha) via normalized Gamma variates.
inline std::vector<double> sample_dirichlet(const std::vector<double>& alpha,
                                            std::mt19937_64& rng) {
  std::vector<double> y(alpha.size());
  for (;;) {
    double sum = 0;
    for (std::size_t j = 0; j < alpha.size(); ++j) {
      std::gamma_distribution<double> g(alpha[j], 1.0);
      y[j] = g(rng);
      sum += y[j];
    }
    if (sum > 0 && std::isfinite(sum)) {
      for (auto& v : y) v /= sum;
      return y;
    }
  }
}

/// n soft targets y ~ Dir(beta * c_k); rows are probability vectors.
template <class T>
Tensor<T> dirichlet_targets(const ExpertModel<T>& expert, std::size_t class_k,
                            double beta, std::size_t n, std::mt19937_64& rng) {
  const auto alpha = dirichlet_concentration(expert, class_k, beta);
  Tensor<T> out({n, alpha.size()});
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = sample_dirichlet(alpha, rng);
    for (std::size_t j = 0; j < y.size(); ++j) out.at(i, j) = static_cast<T>(y[j]);
  }
  return out;
}

/// Labels each auxiliary sample with the expert's argmax (lowest index on
/// ties). With `allowed`, the argmax runs over those classes only. Inputs are
/// copied unchanged.
template <class T>
std::vector<LabeledSample<T>> relabel_auxiliary(const ExpertModel<T>& expert,
                                                const Tensor<T>& aux,
                                                std::span<const int> allowed = {},
                                                std::size_t chunk = 512) {
  std::vector<LabeledSample<T>> out;
  out.reserve(aux.dim(0));
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < aux.dim(0); start += chunk) {
    idx.resize(std::min(chunk, aux.dim(0) - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<T> logits = expert.forward(gather_rows(aux, std::span<const std::size_t>(idx)));
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const int y = allowed.empty() ? static_cast<int>(argmax(logits.row(r)))
                                    : masked_argmax(logits.row(r), allowed);
      out.push_back({take_row(aux, idx[r]), y});
    }
  }
  return out;
}

/// Balanced label list: class_set[j % |class_set|] for j < count.
inline std::vector<int> balanced_labels(std::span<const int> class_set, std::size_t count) {
  std::vector<int> out(count);
  for (std::size_t j = 0; j < count; ++j) out[j] = class_set[j % class_set.size()];
  return out;
}

namespace detail {

template <class T>
bool confident(const ExpertModel<T>& expert, const Tensor<T>& x,
               const std::vector<int>& labels, double threshold) {
  const Tensor<T> p = softmax_rows(expert.forward(x));
  for (std::size_t r = 0; r < labels.size(); ++r)
    if (!(p.at(r, labels[r]) > threshold)) return false;
  return true;
}

/// Soft target for class k whose argmax is k. Redraws up to a bound, then
/// swaps the largest component into position k.
inline std::vector<double> dirichlet_for_class(const std::vector<double>& alpha,
                                               std::size_t k, std::mt19937_64& rng) {
  std::vector<double> y;
  for (int attempt = 0; attempt < 64; ++attempt) {
    y = sample_dirichlet(alpha, rng);
    if (argmax(std::span<const double>(y)) == k) return y;
  }
  std::swap(y[k], y[argmax(std::span<const double>(y))]);
  return y;
}

/// Relabels the whole pool, ranks each class's samples by the expert's
/// probability for that class, and takes them round-robin over classes.
template <class T>
std::vector<LabeledSample<T>> confident_auxiliary(const ExpertModel<T>& expert,
                                                  std::span<const int> class_set,
                                                  std::size_t count, const Tensor<T>& pool) {
  auto labeled = relabel_auxiliary(expert, pool, class_set);
  std::map<int, std::vector<std::pair<T, std::size_t>>> ranked;
  for (int c : class_set) ranked[c];
  const std::size_t chunk = 512;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < pool.dim(0); start += chunk) {
    idx.resize(std::min(chunk, pool.dim(0) - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<T> p = softmax_rows(expert.forward(gather_rows(pool, std::span<const std::size_t>(idx))));
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const int y = labeled[idx[r]].y;
      ranked[y].push_back({p.at(r, y), idx[r]});
    }
  }
  for (auto& [c, v] : ranked)
    std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<LabeledSample<T>> out;
  out.reserve(count);
  for (std::size_t rank = 0; out.size() < count; ++rank) {
    bool any = false;
    for (auto& [c, v] : ranked) {
      if (v.empty() || out.size() == count) continue;
      out.push_back(labeled[v[rank % v.size()].second]);
      any = true;
    }
    if (!any) throw InputContractError("auxiliary pool is empty");
  }
  return out;
}

}  // namespace detail

/// Produces `count` distillation samples from an expert whose training
/// classes are `class_set`. Synthesis methods allocate labels evenly over
/// class_set; the auxiliary method draws from `aux` and labels by the
/// expert's argmax restricted to class_set.
template <class T>
std::vector<LabeledSample<T>> generate(const ExpertModel<T>& expert,
                                       std::span<const int> class_set,
                                       std::size_t count, const GeneratorConfig& cfg,
                                       std::mt19937_64& rng,
                                       const Dataset<T>* aux = nullptr) {
  cfg.validate();
  if (class_set.empty()) throw InputContractError("generator needs a non-empty class set");
  for (int c : class_set)
    if (c < 0 || static_cast<std::size_t>(c) >= expert.num_classes())
      throw InputContractError("class " + std::to_string(c) + " outside expert width");
  std::vector<LabeledSample<T>> out;
  out.reserve(count);

  if (cfg.method == GenMethod::Auxiliary) {
    if (!aux || aux->empty())
      throw ConfigError("auxiliary generation requires an auxiliary dataset");
    if (cfg.aux_selection == AuxSelection::Confident)
      return detail::confident_auxiliary(expert, class_set, count, aux->inputs);
    std::vector<std::size_t> pool(aux->size());
    std::iota(pool.begin(), pool.end(), 0);
    std::vector<std::size_t> picked;
    while (picked.size() < count) {
      std::shuffle(pool.begin(), pool.end(), rng);
      const std::size_t take = std::min(pool.size(), count - picked.size());
      picked.insert(picked.end(), pool.begin(), pool.begin() + take);
    }
    return relabel_auxiliary(expert, gather_rows(aux->inputs, std::span<const std::size_t>(picked)),
                             class_set);
  }

  const std::vector<int> labels = balanced_labels(class_set, count);
  std::uniform_real_distribution<double> init(-1.0, 1.0);
  std::map<int, std::vector<double>> alphas;
  for (std::size_t start = 0; start < count; start += cfg.mb_size) {
    const std::size_t n = std::min(cfg.mb_size, count - start);
    std::vector<int> y(labels.begin() + start, labels.begin() + start + n);
    Shape shape{n};
    shape.insert(shape.end(), expert.input_shape().begin(), expert.input_shape().end());
    Tensor<T> x(shape);
    for (auto& v : x.values()) v = static_cast<T>(init(rng));

    GenerationTarget<T> target = y;
    if (cfg.method == GenMethod::DataImpression) {
      Tensor<T> soft({n, expert.num_classes()});
      for (std::size_t r = 0; r < n; ++r) {
        auto it = alphas.find(y[r]);
        if (it == alphas.end())
          it = alphas.emplace(y[r], dirichlet_concentration(expert, y[r], cfg.beta)).first;
        const auto s = detail::dirichlet_for_class(it->second, y[r], rng);
        for (std::size_t j = 0; j < s.size(); ++j) soft.at(r, j) = static_cast<T>(s[j]);
      }
      target = std::move(soft);
    }

    SampleOptimizer<T> opt(cfg.optimizer, cfg.lr);
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
      if (cfg.stop_confidence > 0 && it % 10 == 0 && it > 0 &&
          detail::confident(expert, x, y, cfg.stop_confidence))
        break;
      detail::generation_step<T>(x, target, expert, cfg, opt, rng, it);
    }
    for (std::size_t r = 0; r < n; ++r) out.push_back({take_row(x, r), y[r]});
  }
  return out;
}

}  // namespace exml
