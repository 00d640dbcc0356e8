// SPDX-License-Identifier: Apache-2.0
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include "exml/harness/commands.hpp"
#include "../grad_check.hpp"

using namespace exml;
using namespace exml::harness;
using exml::testing::numeric_gradient;
using exml::testing::random_tensor;
using exml::testing::relative_error;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path g_work;

ExperimentConfig preset(const std::string& file, const std::string& tag) {
  auto cfg = load_config(fs::path(EXML_SOURCE_DIR) / "configs" / file);
  cfg.output_dir = g_work / tag;
  return cfg;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::map<std::string, MeanStd> by_strategy(const RunOutput& out) {
  std::map<std::string, MeanStd> m;
  for (const auto& c : out.summary) m[c.strategy] = c.stat;
  return m;
}

// Shared by criteria 2, 3 and 10.
const RunOutput& digits_nc_run() {
  static const RunOutput out = [] {
    const auto cfg = preset("digits_nc.cfg", "nc");
    cmd_train_stream(cfg);
    return cmd_run(cfg);
  }();
  return out;
}

Outcome joint_fidelity() {
  const auto cfg = preset("digits_joint.cfg", "joint");
  cmd_train_stream(cfg);
  const auto s = by_strategy(cmd_run(cfg));
  const double expert = s.at("oracle").mean, ed = s.at("model_inversion_ed").mean;
  const double ratio = ed / expert;
  return {ratio >= 0.85, "expert " + fmt(expert) + ", model inversion ED " + fmt(ed) +
                             ", recovery " + fmt(ratio)};
}

Outcome nc_ordering() {
  const auto s = by_strategy(digits_nc_run());
  const double pavg = s.at("param_avg").mean;
  bool ok = true;
  std::string d = "param_avg " + fmt(pavg);
  for (const char* ed : {"model_inversion_ed", "data_impression_ed", "aux_data_ed"}) {
    const double m = s.at(ed).mean;
    ok = ok && m > 0.10 && m > pavg;
    d += std::string(", ") + ed + " " + fmt(m);
  }
  return {ok, d};
}

Outcome baseline_headroom() {
  const auto s = by_strategy(digits_nc_run());
  const double o = s.at("oracle").mean, me = s.at("min_entropy").mean,
               ea = s.at("ensemble_avg").mean;
  return {o > me && me >= ea,
          "oracle " + fmt(o) + ", min_entropy " + fmt(me) + ", ensemble_avg " + fmt(ea)};
}

Outcome replay_monotonicity() {
  auto cfg = preset("digits_nc.cfg", "nc");
  cfg.ablation_sizes = {10, 50, 250, 1250};
  cfg.ablation_strategies = {Strategy::ReplayEd};
  digits_nc_run();
  const auto out = cmd_ablate_buffer(cfg);
  const auto& s = out.series.at(0);
  bool ok = s.x.size() == 4;
  std::string d;
  for (std::size_t i = 0; i < s.x.size(); ++i) {
    d += (i ? ", " : "") + std::to_string(static_cast<int>(s.x[i])) + ": " + fmt(s.mean[i]) +
         " ± " + fmt(s.std[i]);
    if (i > 0) ok = ok && s.mean[i] >= s.mean[i - 1] - std::max(s.std[i], s.std[i - 1]);
  }
  return {ok, d};
}

Outcome buffer_arithmetic() {
  std::size_t checks = 0;
  for (std::size_t n : {10u, 100u, 5000u})
    for (std::size_t len = 1; len <= 9; ++len) {
      SyntheticBuffer<float> buf(n);
      std::mt19937_64 rng(n * 31 + len);
      for (std::size_t i = 1; i <= len; ++i) {
        const int cls = static_cast<int>(i - 1);
        SampleSource<float> src = [cls](std::size_t count) {
          return std::vector<LabeledSample<float>>(count, {Tensor<float>({1}, 0.f), cls});
        };
        buffer_update(buf, i, src, rng);
        const auto fresh_expected =
            static_cast<std::size_t>(std::llround(static_cast<double>(n) / static_cast<double>(i)));
        std::size_t fresh = 0;
        for (std::size_t k = 0; k < buf.size(); ++k) fresh += buf[k].y == cls;
        if (buf.size() != n || fresh != fresh_expected)
          return {false, "N=" + std::to_string(n) + " i=" + std::to_string(i) + ": size " +
                             std::to_string(buf.size()) + ", fresh " + std::to_string(fresh)};
        ++checks;
      }
    }
  return {true, std::to_string(checks) + " updates exact"};
}

ArchitectureSpec grad_conv() {
  ArchitectureSpec s;
  s.kind = ArchKind::ConvNet;
  s.input_shape = {1, 8, 8};
  s.channels1 = 3;
  s.channels2 = 4;
  s.num_classes = 5;
  return s;
}

Model<double> perturbed_conv(std::uint64_t seed) {
  auto m = Model<double>::create(grad_conv(), seed);
  auto st = m.norm_stats()[0];
  for (std::size_t c = 0; c < st.mean.size(); ++c) {
    st.mean[c] = 0.1 * static_cast<double>(c) - 0.05;
    st.var[c] = 0.5 + 0.3 * static_cast<double>(c);
  }
  m.set_norm_stats(0, st);
  return m;
}

double bns_with_gradient(const Model<double>& m, const Tensor<double>& x, Tensor<double>* grad) {
  Tape<double> tape;
  const auto z = m.forward(x, Mode::Eval, &tape);
  std::map<std::size_t, Tensor<double>> inj;
  const double loss = bns_prior(m, tape, grad ? &inj : nullptr);
  if (grad) *grad = m.backward(tape, Tensor<double>(z.shape()), nullptr, &inj);
  return loss;
}

Outcome gradients() {
  using Fn = std::function<double(const Tensor<double>&, Tensor<double>*)>;
  std::mt19937_64 rng(2024);
  std::map<std::string, double> worst;
  for (int inst = 0; inst < 20; ++inst) {
    const auto expert = perturbed_conv(500 + inst);
    GeneratorConfig gen;
    gen.method = GenMethod::ModelInversion;
    gen.temperature = 2.0;
    gen.weight_l2 = 0.01;
    gen.weight_blur = 0.5;
    gen.weight_bns = 1.0;
    gen.augment = {};
    const auto aug = Augmentation<double>::sample(gen.augment, {4, 1, 8, 8}, rng);
    const std::vector<int> hard{0, 1, 2, 3};
    const auto t = random_tensor({4, 6}, rng);
    std::vector<int> y(4);
    for (auto& v : y) v = static_cast<int>(rng() % 6);

    const std::vector<std::pair<std::string, Fn>> cases{
        {"norm", [](const Tensor<double>& x, Tensor<double>* g) { return norm_prior(x, g); }},
        {"blur", [](const Tensor<double>& x, Tensor<double>* g) { return blur_prior(x, g); }},
        {"bns", [&](const Tensor<double>& x, Tensor<double>* g) {
           return bns_with_gradient(expert, x, g);
         }},
        {"inversion", [&](const Tensor<double>& x, Tensor<double>* g) {
           return generation_objective<double>(x, hard, expert, gen, aug, g).total;
         }},
        {"ed", [&](const Tensor<double>& z, Tensor<double>* g) {
           return ed_loss<double>(z, t, y, 1.0, g).total;
         }}};
    for (const auto& [name, f] : cases) {
      const auto x = name == "ed" ? random_tensor({4, 6}, rng, -3, 3)
                                  : random_tensor({4, 1, 8, 8}, rng);
      Tensor<double> g;
      f(x, &g);
      const auto num =
          numeric_gradient([&](const Tensor<double>& in) { return f(in, nullptr); }, x);
      worst[name] = std::max(worst[name], relative_error(g, num));
    }
  }
  bool ok = true;
  std::string d;
  for (const auto& [name, e] : worst) {
    ok = ok && e < 1e-4;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s%s %.1e", d.empty() ? "" : ", ", name.c_str(), e);
    d += buf;
  }
  return {ok, d + " (max relative error, 20 instances each)"};
}

Outcome fusion_invariance() {
  std::mt19937_64 rng(7);
  double worst = 0;
  for (int inst = 0; inst < 50; ++inst) {
    const auto zp = random_tensor({6, 6}, rng), ze = random_tensor({6, 6}, rng);
    const std::vector<int> y{0, 1, 2, 3, 4, 2};
    const std::set<int> prev{0, 1, 2}, exp{2, 3, 4};
    const auto base = fuse_logits(zp, ze, y, prev, exp);
    std::uniform_real_distribution<double> scale(1e-3, 1e3);
    auto sp = zp, se = ze;
    sp *= scale(rng);
    se *= scale(rng);
    for (std::size_t i = 0; i < base.size(); ++i)
      worst = std::max(worst, std::abs(fuse_logits(sp, se, y, prev, exp)[i] - base[i]));
  }
  // Every assignment of the six classes to {neither, previous, expert, both}.
  const auto zp = random_tensor({6, 6}, rng), ze = random_tensor({6, 6}, rng);
  const auto np = normalize_logits(zp, LogitNormalization::L2);
  const auto ne = normalize_logits(ze, LogitNormalization::L2);
  std::size_t patterns[3] = {0, 0, 0};
  for (int code = 0; code < 4096; ++code) {
    std::set<int> prev, exp;
    for (int c = 0, v = code; c < 6; ++c, v /= 4) {
      if (v % 4 == 1 || v % 4 == 3) prev.insert(c);
      if (v % 4 == 2 || v % 4 == 3) exp.insert(c);
    }
    for (int c = 0; c < 6; ++c) {
      const std::vector<int> label(6, c);
      const bool in_p = prev.count(c), in_e = exp.count(c);
      if (!in_p && !in_e) {
        bool threw = false;
        try {
          fuse_logits(zp, ze, label, prev, exp);
        } catch (const UnassignableSampleError&) {
          threw = true;
        }
        if (!threw) return {false, "class outside both sets was not rejected"};
        continue;
      }
      const auto f = fuse_logits(zp, ze, label, prev, exp);
      ++patterns[in_p && in_e ? 2 : in_p ? 0 : 1];
      for (std::size_t b = 0; b < 6; ++b)
        for (std::size_t k = 0; k < 6; ++k) {
          const double want = in_p && in_e ? (np.at(b, k) + ne.at(b, k)) / 2
                              : in_p       ? np.at(b, k)
                                           : ne.at(b, k);
          if (f.at(b, k) != want) return {false, "wrong branch for class " + std::to_string(c)};
        }
    }
  }
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "max rescaling deviation %.1e; branches previous/expert/both checked %zu/%zu/%zu "
                "times",
                worst, patterns[0], patterns[1], patterns[2]);
  return {worst <= 1e-6 && patterns[0] && patterns[1] && patterns[2], buf};
}

Outcome dirichlet_means() {
  ArchitectureSpec arch;
  arch.kind = ArchKind::Mlp;
  arch.input_shape = {3};
  arch.hidden = 8;
  arch.num_classes = 5;
  const auto expert = Model<double>::create(arch, 17);
  double worst = 0;
  for (double beta : {0.1, 1.0, 10.0})
    for (std::size_t k = 0; k < 5; ++k) {
      std::mt19937_64 rng(100 + k);
      const std::size_t n = 10000;
      const auto alpha = dirichlet_concentration(expert, k, beta);
      double a0 = 0;
      for (double a : alpha) a0 += a;
      const auto y = dirichlet_targets(expert, k, beta, n, rng);
      for (std::size_t j = 0; j < alpha.size(); ++j) {
        double m = 0;
        for (std::size_t i = 0; i < n; ++i) m += y.at(i, j);
        m /= static_cast<double>(n);
        const double mu = alpha[j] / a0;
        const double se = std::sqrt(mu * (1 - mu) / (a0 + 1) / static_cast<double>(n));
        worst = std::max(worst, std::abs(m - mu) / se);
      }
    }
  return {worst < 3.0, "worst deviation " + fmt(worst) + " standard errors"};
}

Outcome min_entropy_oracle() {
  ArchitectureSpec arch;
  arch.kind = ArchKind::Mlp;
  arch.input_shape = {4};
  arch.hidden = 8;
  arch.num_classes = 6;
  std::vector<Model<double>> experts;
  for (int i = 0; i < 4; ++i) experts.push_back(Model<double>::create(arch, 40 + i));
  EnsembleModel<double> ens{experts, {{0}, {1}, {2}, {3}}};
  std::mt19937_64 rng(9);
  const auto x = random_tensor({1000, 4}, rng, -4, 4);
  const auto pred = predict_min_entropy(ens, x);
  std::vector<Tensor<double>> logits;
  for (const auto& e : experts) logits.push_back(e.forward(x));
  std::size_t agree = 0;
  for (std::size_t r = 0; r < 1000; ++r) {
    long double best_h = 0;
    int best = -1;
    for (const auto& z : logits) {
      long double mx = z.at(r, 0);
      for (std::size_t k = 1; k < 6; ++k) mx = std::max<long double>(mx, z.at(r, k));
      long double s = 0;
      for (std::size_t k = 0; k < 6; ++k) s += std::exp(static_cast<long double>(z.at(r, k)) - mx);
      long double h = 0;
      int am = 0;
      for (std::size_t k = 0; k < 6; ++k) {
        const long double p = std::exp(static_cast<long double>(z.at(r, k)) - mx) / s;
        if (p > 0) h -= p * std::log(p);
        if (z.at(r, k) > z.at(r, am)) am = static_cast<int>(k);
      }
      if (best < 0 || h < best_h) {
        best_h = h;
        best = am;
      }
    }
    agree += pred[r] == best;
  }
  return {agree == 1000, std::to_string(agree) + "/1000 predictions identical"};
}

Outcome determinism() {
  const auto& first = digits_nc_run();
  auto cfg = preset("digits_nc.cfg", "nc_repeat");
  cmd_train_stream(cfg);
  const auto second = cmd_run(cfg);
  if (first.records.size() != second.records.size())
    return {false, "record counts differ"};
  double worst = 0;
  for (std::size_t i = 0; i < first.records.size(); ++i)
    worst = std::max(worst, std::abs(first.records[i].stream_accuracy -
                                     second.records[i].stream_accuracy));
  char buf[96];
  std::snprintf(buf, sizeof buf, "%zu records, max difference %.1e", first.records.size(), worst);
  return {worst <= 1e-9, buf};
}

}  // namespace

int main() {
  g_work = fs::temp_directory_path() / "exml_acceptance";
  fs::remove_all(g_work);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"joint distillation fidelity", joint_fidelity},
      {"NC ordering: ED strategies above chance and parameter averaging", nc_ordering},
      {"baseline headroom: oracle > min entropy >= ensemble average", baseline_headroom},
      {"replay ED buffer monotonicity", replay_monotonicity},
      {"buffer arithmetic", buffer_arithmetic},
      {"analytic gradients match finite differences", gradients},
      {"fusion invariance and branch selection", fusion_invariance},
      {"Dirichlet target means", dirichlet_means},
      {"min entropy matches brute force", min_entropy_oracle},
      {"run determinism", determinism}};
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::printf("%s [%zu] %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", i + 1,
                criteria[i].first.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  fs::remove_all(g_work);
  return failed ? 1 : 0;
}
