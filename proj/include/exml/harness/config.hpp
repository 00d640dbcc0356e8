// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "exml/dataset.hpp"
#include "exml/distiller.hpp"
#include "exml/generators.hpp"
#include "exml/model_zoo.hpp"
#include "exml/scenario.hpp"

namespace exml::harness {

enum class Strategy {
  ModelInversionEd,
  DataImpressionEd,
  AuxDataEd,
  ReplayEd,
  Oracle,
  EnsembleAvg,
  MinEntropy,
  ParamAvg
};

inline constexpr Strategy kAllStrategies[] = {
    Strategy::ModelInversionEd, Strategy::DataImpressionEd, Strategy::AuxDataEd,
    Strategy::ReplayEd,         Strategy::Oracle,           Strategy::EnsembleAvg,
    Strategy::MinEntropy,       Strategy::ParamAvg};

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::ModelInversionEd: return "model_inversion_ed";
    case Strategy::DataImpressionEd: return "data_impression_ed";
    case Strategy::AuxDataEd: return "aux_data_ed";
    case Strategy::ReplayEd: return "replay_ed";
    case Strategy::Oracle: return "oracle";
    case Strategy::EnsembleAvg: return "ensemble_avg";
    case Strategy::MinEntropy: return "min_entropy";
    case Strategy::ParamAvg: return "param_avg";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& s) {
  for (Strategy k : kAllStrategies)
    if (to_string(k) == s) return k;
  throw ConfigError("unknown strategy '" + s + "'");
}

/// Whether a strategy respects the ex-model constraints: no stored raw data
/// and no more than one expert held at a time.
inline bool exml_compliant(Strategy s) {
  switch (s) {
    case Strategy::ModelInversionEd:
    case Strategy::DataImpressionEd:
    case Strategy::AuxDataEd:
    case Strategy::ParamAvg:
      return true;
    default:
      return false;
  }
}

/// Strategies that fill the buffer through a generator.
inline bool is_synthesis(Strategy s) {
  return s == Strategy::ModelInversionEd || s == Strategy::DataImpressionEd ||
         s == Strategy::AuxDataEd;
}

inline GenMethod generator_method(Strategy s) {
  switch (s) {
    case Strategy::ModelInversionEd: return GenMethod::ModelInversion;
    case Strategy::DataImpressionEd: return GenMethod::DataImpression;
    case Strategy::AuxDataEd: return GenMethod::Auxiliary;
    default: throw ConfigError("strategy " + to_string(s) + " has no generator");
  }
}

/// Network family for the experts and the ex-model. Input shape and class
/// count come from the dataset.
struct ModelSection {
  ArchKind kind = ArchKind::Mlp;
  std::size_t hidden = 32;
  std::size_t channels1 = 8;
  std::size_t channels2 = 16;

  friend bool operator==(const ModelSection&, const ModelSection&) = default;

  ArchitectureSpec architecture(const Shape& input_shape, std::size_t num_classes) const {
    ArchitectureSpec a;
    a.kind = kind;
    a.input_shape = input_shape;
    a.hidden = hidden;
    a.channels1 = channels1;
    a.channels2 = channels2;
    a.num_classes = num_classes;
    return a;
  }
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetOptions dataset;
  ModelSection model;
  TrainConfig train;
  ScenarioSpec scenario;
  std::vector<Strategy> strategies{Strategy::ModelInversionEd};
  GeneratorConfig generator;
  double di_temperature = 20.0;  // replaces generator.temperature for data impression
  DistillConfig distill;
  std::size_t buffer_capacity = 5000;
  std::vector<std::uint64_t> seeds{1};
  std::filesystem::path output_dir = "results";
  std::optional<std::string> aux_dataset_path;
  std::size_t aux_pool_size = 5000;
  std::vector<std::size_t> ablation_sizes{10, 50, 250, 1250};
  std::vector<Strategy> ablation_strategies{Strategy::ReplayEd};
  std::size_t dump_experience = 0;
  std::size_t dump_per_class = 8;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

  /// Structural checks that need no filesystem access.
  void validate() const {
    if (name.empty() || name.find_first_of("/\\ ") != std::string::npos)
      throw ConfigError("name must be a non-empty identifier without '/', '\\' or spaces");
    if (seeds.empty()) throw ConfigError("seeds must list at least one seed");
    if (strategies.empty()) throw ConfigError("strategy must list at least one strategy");
    if (scenario.n_experiences == 0) throw ConfigError("scenario.n_experiences must be > 0");
    if (scenario.kind == ScenarioKind::Joint && scenario.n_experiences != 1)
      throw ConfigError("Joint scenarios have scenario.n_experiences = 1");
    if (buffer_capacity == 0) throw ConfigError("buffer_capacity must be > 0");
    const bool aux = std::count(strategies.begin(), strategies.end(), Strategy::AuxDataEd) ||
                     std::count(ablation_strategies.begin(), ablation_strategies.end(),
                                Strategy::AuxDataEd);
    if (aux && !aux_dataset_path)
      throw ConfigError("strategy aux_data_ed requires aux.path");
    if (aux_pool_size == 0) throw ConfigError("aux.pool_size must be > 0");
    if (dump_per_class == 0) throw ConfigError("dump.per_class must be > 0");
    if (!(di_temperature > 0)) throw ConfigError("generator.di_temperature must be > 0");
    generator.validate();
    distill.validate();
  }
};

/// Generator settings for synthesis strategy `s`.
inline GeneratorConfig generator_for(const ExperimentConfig& cfg, Strategy s) {
  GeneratorConfig g = cfg.generator;
  g.method = generator_method(s);
  if (s == Strategy::DataImpressionEd) g.temperature = cfg.di_temperature;
  return g;
}

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');)
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

template <class N>
std::string join_numbers(const std::vector<N>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? ", " : "") + std::to_string(xs[i]);
  return out;
}

inline std::string join_strategies(const std::vector<Strategy>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? ", " : "") + to_string(xs[i]);
  return out;
}

inline std::string arch_kind_name(ArchKind k) {
  switch (k) {
    case ArchKind::Linear: return "linear";
    case ArchKind::Mlp: return "mlp";
    case ArchKind::ConvNet: return "convnet";
  }
  return "?";
}

/// Reader and writer of one config key.
struct Field {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> read;
  std::function<std::string(const ExperimentConfig&)> write;
};

#define EXML_NUM_FIELD(KEY, MEMBER)                                                      \
  Field{KEY,                                                                             \
        [](ExperimentConfig& c, const std::string& v) {                                  \
          c.MEMBER = parse_number<std::decay_t<decltype(c.MEMBER)>>(KEY, v);             \
        },                                                                               \
        [](const ExperimentConfig& c) {                                                  \
          if constexpr (std::is_floating_point_v<std::decay_t<decltype(c.MEMBER)>>)      \
            return format_double(c.MEMBER);                                              \
          else                                                                           \
            return std::to_string(c.MEMBER);                                             \
        }}

#define EXML_BOOL_FIELD(KEY, MEMBER)                                                         \
  Field{KEY, [](ExperimentConfig& c, const std::string& v) { c.MEMBER = parse_bool(KEY, v); }, \
        [](const ExperimentConfig& c) { return std::string(c.MEMBER ? "true" : "false"); }}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back({"name", [](ExperimentConfig& c, const std::string& v) { c.name = v; },
                 [](const ExperimentConfig& c) { return c.name; }});
    f.push_back({"output_dir",
                 [](ExperimentConfig& c, const std::string& v) { c.output_dir = v; },
                 [](const ExperimentConfig& c) { return c.output_dir.string(); }});
    f.push_back({"dataset.path",
                 [](ExperimentConfig& c, const std::string& v) { c.dataset.path = v; },
                 [](const ExperimentConfig& c) { return c.dataset.path; }});
    f.push_back(EXML_NUM_FIELD("dataset.train_per_class", dataset.train_per_class));
    f.push_back(EXML_NUM_FIELD("dataset.test_per_class", dataset.test_per_class));
    f.push_back(EXML_NUM_FIELD("dataset.seed", dataset.seed));
    f.push_back({"model.kind",
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "linear") c.model.kind = ArchKind::Linear;
                   else if (v == "mlp") c.model.kind = ArchKind::Mlp;
                   else if (v == "convnet") c.model.kind = ArchKind::ConvNet;
                   else throw ConfigError("model.kind must be linear, mlp or convnet, got '" + v + "'");
                 },
                 [](const ExperimentConfig& c) { return arch_kind_name(c.model.kind); }});
    f.push_back(EXML_NUM_FIELD("model.hidden", model.hidden));
    f.push_back(EXML_NUM_FIELD("model.channels1", model.channels1));
    f.push_back(EXML_NUM_FIELD("model.channels2", model.channels2));
    f.push_back(EXML_NUM_FIELD("train.lr", train.lr));
    f.push_back(EXML_NUM_FIELD("train.momentum", train.momentum));
    f.push_back(EXML_NUM_FIELD("train.weight_decay", train.weight_decay));
    f.push_back(EXML_NUM_FIELD("train.batch_size", train.batch_size));
    f.push_back(EXML_NUM_FIELD("train.epochs", train.epochs));
    f.push_back(EXML_NUM_FIELD("train.accuracy_floor", train.accuracy_floor));
    f.push_back({"scenario.kind",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.scenario.kind = parse_scenario_kind(v);
                 },
                 [](const ExperimentConfig& c) { return to_string(c.scenario.kind); }});
    f.push_back(EXML_NUM_FIELD("scenario.n_experiences", scenario.n_experiences));
    f.push_back({"scenario.classes_per_step",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.scenario.classes_per_step.clear();
                   for (const auto& s : split_list(v))
                     c.scenario.classes_per_step.push_back(
                         parse_number<std::size_t>("scenario.classes_per_step", s));
                 },
                 [](const ExperimentConfig& c) { return join_numbers(c.scenario.classes_per_step); }});
    f.push_back(EXML_NUM_FIELD("scenario.seed", scenario.seed));
    f.push_back({"strategy",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.strategies.clear();
                   for (const auto& s : split_list(v)) c.strategies.push_back(parse_strategy(s));
                 },
                 [](const ExperimentConfig& c) { return join_strategies(c.strategies); }});
    f.push_back(EXML_NUM_FIELD("buffer_capacity", buffer_capacity));
    f.push_back({"seeds",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.seeds.clear();
                   for (const auto& s : split_list(v))
                     c.seeds.push_back(parse_number<std::uint64_t>("seeds", s));
                 },
                 [](const ExperimentConfig& c) { return join_numbers(c.seeds); }});
    f.push_back(EXML_NUM_FIELD("generator.lr", generator.lr));
    f.push_back(EXML_NUM_FIELD("generator.iterations", generator.iterations));
    f.push_back(EXML_NUM_FIELD("generator.temperature", generator.temperature));
    f.push_back(EXML_NUM_FIELD("generator.di_temperature", di_temperature));
    f.push_back(EXML_NUM_FIELD("generator.weight_l2", generator.weight_l2));
    f.push_back(EXML_NUM_FIELD("generator.weight_blur", generator.weight_blur));
    f.push_back(EXML_NUM_FIELD("generator.weight_bns", generator.weight_bns));
    f.push_back(EXML_NUM_FIELD("generator.beta", generator.beta));
    f.push_back(EXML_NUM_FIELD("generator.mb_size", generator.mb_size));
    f.push_back({"generator.optimizer",
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "sgd") c.generator.optimizer = SampleOptimizerKind::Sgd;
                   else if (v == "adam") c.generator.optimizer = SampleOptimizerKind::Adam;
                   else throw ConfigError("generator.optimizer must be sgd or adam, got '" + v + "'");
                 },
                 [](const ExperimentConfig& c) {
                   return std::string(c.generator.optimizer == SampleOptimizerKind::Sgd ? "sgd" : "adam");
                 }});
    f.push_back(EXML_NUM_FIELD("generator.stop_confidence", generator.stop_confidence));
    f.push_back({"generator.aux_selection",
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "random") c.generator.aux_selection = AuxSelection::Random;
                   else if (v == "confident") c.generator.aux_selection = AuxSelection::Confident;
                   else throw ConfigError("generator.aux_selection must be random or confident, got '" + v + "'");
                 },
                 [](const ExperimentConfig& c) {
                   return std::string(c.generator.aux_selection == AuxSelection::Random ? "random" : "confident");
                 }});
    f.push_back(EXML_BOOL_FIELD("generator.augment.shift", generator.augment.shift));
    f.push_back(EXML_BOOL_FIELD("generator.augment.rotate", generator.augment.rotate));
    f.push_back(EXML_BOOL_FIELD("generator.augment.hflip", generator.augment.hflip));
    f.push_back(EXML_NUM_FIELD("generator.augment.max_shift", generator.augment.max_shift));
    f.push_back(EXML_NUM_FIELD("generator.augment.max_rotation_deg", generator.augment.max_rotation_deg));
    f.push_back(EXML_NUM_FIELD("distill.lr", distill.lr));
    f.push_back(EXML_NUM_FIELD("distill.iterations", distill.iterations));
    f.push_back(EXML_NUM_FIELD("distill.mb_size", distill.mb_size));
    f.push_back(EXML_NUM_FIELD("distill.lambda_ce", distill.lambda_ce));
    f.push_back(EXML_NUM_FIELD("distill.temperature", distill.temperature));
    f.push_back(EXML_NUM_FIELD("distill.momentum", distill.momentum));
    f.push_back(EXML_NUM_FIELD("distill.weight_decay", distill.weight_decay));
    f.push_back({"distill.normalize",
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "l2") c.distill.normalize = LogitNormalization::L2;
                   else if (v == "standardize") c.distill.normalize = LogitNormalization::Standardize;
                   else throw ConfigError("distill.normalize must be l2 or standardize, got '" + v + "'");
                 },
                 [](const ExperimentConfig& c) {
                   return std::string(c.distill.normalize == LogitNormalization::L2 ? "l2" : "standardize");
                 }});
    f.push_back(EXML_BOOL_FIELD("distill.augment.shift", distill.augment.shift));
    f.push_back(EXML_BOOL_FIELD("distill.augment.rotate", distill.augment.rotate));
    f.push_back(EXML_BOOL_FIELD("distill.augment.hflip", distill.augment.hflip));
    f.push_back(EXML_NUM_FIELD("distill.augment.max_shift", distill.augment.max_shift));
    f.push_back(EXML_NUM_FIELD("distill.augment.max_rotation_deg", distill.augment.max_rotation_deg));
    f.push_back({"aux.path",
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v.empty()) c.aux_dataset_path.reset();
                   else c.aux_dataset_path = v;
                 },
                 [](const ExperimentConfig& c) { return c.aux_dataset_path.value_or(""); }});
    f.push_back(EXML_NUM_FIELD("aux.pool_size", aux_pool_size));
    f.push_back({"ablation.sizes",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.ablation_sizes.clear();
                   for (const auto& s : split_list(v))
                     c.ablation_sizes.push_back(parse_number<std::size_t>("ablation.sizes", s));
                 },
                 [](const ExperimentConfig& c) { return join_numbers(c.ablation_sizes); }});
    f.push_back({"ablation.strategy",
                 [](ExperimentConfig& c, const std::string& v) {
                   c.ablation_strategies.clear();
                   for (const auto& s : split_list(v))
                     c.ablation_strategies.push_back(parse_strategy(s));
                 },
                 [](const ExperimentConfig& c) { return join_strategies(c.ablation_strategies); }});
    f.push_back(EXML_NUM_FIELD("dump.experience", dump_experience));
    f.push_back(EXML_NUM_FIELD("dump.per_class", dump_per_class));
    return f;
  }();
  return all;
}

#undef EXML_NUM_FIELD
#undef EXML_BOOL_FIELD

}  // namespace detail

/// Parses `key = value` lines. Blank lines and lines starting with '#' are
/// ignored; unknown or repeated keys are errors. Missing keys keep defaults.
inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::map<std::string, const detail::Field*> by_key;
  for (const auto& f : detail::fields()) by_key[f.key] = &f;
  std::map<std::string, std::size_t> seen;
  std::stringstream ss(text);
  std::size_t lineno = 0;
  for (std::string line; std::getline(ss, line);) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + " is not 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto it = by_key.find(key);
    if (it == by_key.end())
      throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (auto [prev, fresh] = seen.emplace(key, lineno); !fresh)
      throw ConfigError("config key '" + key + "' repeated on lines " +
                        std::to_string(prev->second) + " and " + std::to_string(lineno));
    it->second->read(cfg, value);
  }
  return cfg;
}

inline std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& f : detail::fields()) out += f.key + " = " + f.write(cfg) + "\n";
  return out;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace exml::harness
