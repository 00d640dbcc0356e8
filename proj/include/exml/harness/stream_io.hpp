// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "exml/harness/config.hpp"
#include "exml/stream.hpp"

namespace exml::harness {

namespace fs = std::filesystem;

inline constexpr const char* kStreamFormat = "exml-stream/1";

/// `<output_dir>/stream/<name>/seed<k>`
inline fs::path stream_dir(const ExperimentConfig& cfg, std::uint64_t seed) {
  return cfg.output_dir / "stream" / cfg.name / ("seed" + std::to_string(seed));
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Scenario seed used for run seed `seed`.
inline ScenarioSpec scenario_for_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  ScenarioSpec s = cfg.scenario;
  s.seed = cfg.scenario.seed + seed;
  return s;
}

template <class T>
nlohmann::json stream_manifest(const ExperimentConfig& cfg, std::uint64_t seed,
                               const TrainedStream<T>& ts) {
  nlohmann::json m;
  m["format"] = kStreamFormat;
  m["name"] = cfg.name;
  m["seed"] = seed;
  const ScenarioSpec sc = scenario_for_seed(cfg, seed);
  m["scenario"] = {{"kind", to_string(sc.kind)},
                   {"n_experiences", sc.n_experiences},
                   {"classes_per_step", sc.classes_per_step},
                   {"seed", sc.seed}};
  m["dataset"] = {{"path", cfg.dataset.path},
                  {"train_per_class", cfg.dataset.train_per_class},
                  {"test_per_class", cfg.dataset.test_per_class},
                  {"seed", cfg.dataset.seed}};
  m["architecture_id"] = ts.experts.empty() ? "" : ts.experts[0].architecture_id();
  m["experiences"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ts.experiences.size(); ++i) {
    const auto& e = ts.experiences[i];
    nlohmann::json x;
    x["index"] = i;
    x["class_set"] = e.class_set;
    x["task_label"] = e.task_label ? nlohmann::json(*e.task_label) : nlohmann::json(nullptr);
    x["expert_dir"] = "expert_" + std::to_string(i);
    x["parameter_hash"] = hex64(ts.experts[i].parameter_hash());
    m["experiences"].push_back(std::move(x));
  }
  return m;
}

/// Writes the stream into a sibling temporary directory and renames it into
/// place; a failure leaves no partial stream behind.
template <class T>
void save_stream(const TrainedStream<T>& ts, const nlohmann::json& manifest,
                 const fs::path& dir) {
  const fs::path tmp = dir.parent_path() / (dir.filename().string() + ".partial");
  std::error_code ec;
  fs::remove_all(tmp, ec);
  try {
    fs::create_directories(tmp);
    for (std::size_t i = 0; i < ts.experts.size(); ++i) {
      save_expert(ts.experts[i], tmp / ("expert_" + std::to_string(i)));
      const fs::path cp = tmp / ("classes_" + std::to_string(i) + ".txt");
      std::ofstream out(cp);
      for (int c : ts.experiences[i].class_set) out << c << "\n";
      if (!out) throw IoError("failed writing " + cp.string());
    }
    const fs::path mp = tmp / "manifest.json";
    std::ofstream out(mp);
    out << manifest.dump(2) << "\n";
    if (!out) throw IoError("failed writing " + mp.string());
    out.close();
    fs::remove_all(dir);
    fs::rename(tmp, dir);
  } catch (const fs::filesystem_error& e) {
    fs::remove_all(tmp, ec);
    throw IoError(std::string("cannot write expert stream: ") + e.what());
  } catch (...) {
    fs::remove_all(tmp, ec);
    throw;
  }
}

inline nlohmann::json read_stream_manifest(const fs::path& dir) {
  const fs::path mp = dir / "manifest.json";
  if (!fs::is_regular_file(mp))
    throw MissingFileError("no expert stream at " + dir.string() +
                           "; run `exml train-stream` with this config first");
  std::ifstream in(mp);
  try {
    auto m = nlohmann::json::parse(in);
    if (m.value("format", "") != kStreamFormat)
      throw CorruptTensorError("stream manifest " + mp.string() + " has unknown format");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptTensorError("unreadable stream manifest " + mp.string() + ": " + e.what());
  }
}

/// Lazily loading view of a persisted stream. Every step is checked against
/// `expected` (class sets and task labels rebuilt from the config).
template <class T>
ExpertStream<T> open_stream(const fs::path& dir, const std::string& architecture_id,
                            const std::vector<ExperienceData<T>>& expected) {
  const auto m = read_stream_manifest(dir);
  if (m.at("architecture_id").get<std::string>() != architecture_id)
    throw ArchitectureMismatchError("stream at " + dir.string() + " holds " +
                                    m.at("architecture_id").get<std::string>() +
                                    " experts, config asks for " + architecture_id +
                                    "; rerun `exml train-stream`");
  ExpertStream<T> s;
  std::vector<fs::path> dirs;
  for (const auto& x : m.at("experiences")) {
    StreamStep step;
    step.class_set = x.at("class_set").get<std::vector<int>>();
    if (!x.at("task_label").is_null()) step.task_label = x.at("task_label").get<int>();
    dirs.push_back(dir / x.at("expert_dir").get<std::string>());
    s.steps.push_back(std::move(step));
  }
  bool match = s.steps.size() == expected.size();
  for (std::size_t i = 0; match && i < expected.size(); ++i)
    match = s.steps[i].class_set == expected[i].class_set &&
            s.steps[i].task_label == expected[i].task_label;
  if (!match)
    throw ScenarioError("stream at " + dir.string() +
                        " was trained for a different scenario; rerun `exml train-stream`");
  s.load = [dirs, architecture_id](std::size_t i) {
    return load_expert<T>(dirs.at(i), architecture_id);
  };
  return s;
}

}  // namespace exml::harness
