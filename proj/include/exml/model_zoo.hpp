// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "exml/dataset.hpp"
#include "exml/losses.hpp"
#include "exml/model.hpp"
#include "exml/optim.hpp"

namespace exml {

/// An independently trained classifier from the stream. Output width always
/// spans the full class universe.
template <class T>
using ExpertModel = Model<T>;

/// Expert training recipe. Defaults: SGD, lr 0.1, momentum 0.9, weight decay
/// 5e-4, batch 32, with a desk-scale epoch count.
struct TrainConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  double accuracy_floor = 0.9;  // 0 disables the check

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Fraction of samples whose argmax logit equals the label.
template <class T>
double accuracy(const Model<T>& model, const Dataset<T>& data,
                std::size_t chunk = 256) {
  if (data.empty()) throw MetricError("accuracy of an empty dataset");
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    idx.resize(std::min(chunk, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<T> logits = model.forward(gather_rows(data.inputs, std::span<const std::size_t>(idx)));
    for (std::size_t r = 0; r < idx.size(); ++r)
      correct += static_cast<int>(argmax(logits.row(r))) == data.labels[idx[r]];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Trains an expert with minibatch cross-entropy. Reproducible from `seed`
/// (initialization and shuffling).
template <class T>
ExpertModel<T> train_expert(const Dataset<T>& data, const ArchitectureSpec& arch,
                            const TrainConfig& cfg, std::uint64_t seed,
                            double* train_accuracy = nullptr) {
  if (data.empty())
    throw ScenarioError("cannot train an expert on an empty dataset");
  for (int y : data.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= arch.num_classes)
      throw ScenarioError("label " + std::to_string(y) +
                          " outside the expert output width " +
                          std::to_string(arch.num_classes));
  if (data.sample_shape != arch.input_shape)
    throw InputContractError("dataset sample shape " +
                             shape_str(data.sample_shape) +
                             " does not match architecture " + arch.id());

  ExpertModel<T> model = ExpertModel<T>::create(arch, seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  Sgd<T> opt(static_cast<T>(cfg.lr), static_cast<T>(cfg.momentum),
             static_cast<T>(cfg.weight_decay));
  auto params = model.trainable_parameters();
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = std::max<std::size_t>(1, cfg.batch_size);
  std::size_t iteration = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t n = std::min(bs, order.size() - start);
      // a single-sample batch would make batch statistics degenerate
      if (n < 2 && order.size() >= 2) continue;
      std::span<const std::size_t> idx(order.data() + start, n);
      const Tensor<T> x = gather_rows(data.inputs, idx);
      std::vector<int> y;
      for (auto i : idx) y.push_back(data.labels[i]);
      Tape<T> tape;
      const Tensor<T> logits = model.forward(x, Mode::Train, &tape);
      Tensor<T> dlogits;
      const T loss = cross_entropy<T>(logits, y, T(1), &dlogits);
      if (!std::isfinite(loss))
        throw DivergenceError("expert training loss is not finite", iteration);
      auto grads = model.zero_gradients();
      model.backward(tape, dlogits, &grads);
      opt.step(params, grads);
      model.update_running_stats(tape);
      ++iteration;
    }
  }
  const double acc = accuracy(model, data);
  if (train_accuracy) *train_accuracy = acc;
  if (cfg.accuracy_floor > 0 && acc < cfg.accuracy_floor)
    throw TrainingFloorError("expert training accuracy " + std::to_string(acc) +
                             " is below the floor " +
                             std::to_string(cfg.accuracy_floor));
  return model;
}

// ---------------------------------------------------------------------------
// Persistence: <dir>/manifest.json plus one little-endian float32 file per
// tensor.

inline constexpr const char* kExpertFormat = "exml-expert/1";

namespace detail {

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big)
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) |
           (v >> 24);
  return v;
}

inline std::string tensor_file_name(std::size_t index, const std::string& name) {
  std::string clean = name;
  for (auto& c : clean)
    if (c == '/' || c == '\\') c = '_';
  return std::to_string(index) + "_" + clean + ".f32";
}

}  // namespace detail

template <class T>
void save_expert(const ExpertModel<T>& model, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir))
    throw IoError("cannot create expert directory " + dir.string() + ": " +
                  ec.message());
  nlohmann::json manifest;
  manifest["format"] = kExpertFormat;
  manifest["architecture_id"] = model.architecture_id();
  manifest["num_classes"] = model.num_classes();
  manifest["tensors"] = nlohmann::json::array();
  std::size_t index = 0;
  model.visit([&](const std::string& name, const Tensor<T>& t, bool trainable) {
    const std::string file = detail::tensor_file_name(index++, name);
    const fs::path p = dir / file;
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write tensor file " + p.string());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const float f = static_cast<float>(t[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      bits = detail::to_le(bits);
      out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
    if (!out) throw IoError("failed writing tensor file " + p.string());
    manifest["tensors"].push_back({{"name", name},
                                   {"shape", t.shape()},
                                   {"file", file},
                                   {"trainable", trainable},
                                   {"dtype", "float32le"}});
  });
  const fs::path mp = dir / "manifest.json";
  std::ofstream out(mp, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + mp.string());
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError("failed writing manifest " + mp.string());
}

/// Loads an expert. When `expected_architecture` is given, a manifest naming
/// a different architecture is rejected.
template <class T>
ExpertModel<T> load_expert(
    const std::filesystem::path& dir,
    const std::optional<std::string>& expected_architecture = std::nullopt) {
  namespace fs = std::filesystem;
  const fs::path mp = dir / "manifest.json";
  if (!fs::is_regular_file(mp))
    throw MissingFileError("expert manifest not found: " + mp.string());
  nlohmann::json manifest;
  try {
    std::ifstream in(mp);
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptTensorError("unreadable manifest " + mp.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != kExpertFormat)
    throw CorruptTensorError("manifest " + mp.string() + " has unknown format");
  const std::string arch_id = manifest.at("architecture_id").get<std::string>();
  if (expected_architecture && *expected_architecture != arch_id)
    throw ArchitectureMismatchError("expert at " + dir.string() +
                                    " has architecture '" + arch_id +
                                    "', expected '" + *expected_architecture + "'");
  const ArchitectureSpec spec = ArchitectureSpec::parse_id(arch_id);
  ExpertModel<T> model = ExpertModel<T>::zeros(spec);
  const auto& entries = manifest.at("tensors");
  std::size_t index = 0;
  model.visit([&](const std::string& name, Tensor<T>& t, bool) {
    if (index >= entries.size())
      throw CorruptTensorError("manifest " + mp.string() + " lists " +
                               std::to_string(entries.size()) + " tensors, model needs more");
    const auto& e = entries[index++];
    if (e.at("name").get<std::string>() != name)
      throw CorruptTensorError("tensor '" + e.at("name").get<std::string>() +
                               "' found where '" + name + "' was expected");
    if (e.at("shape").get<Shape>() != t.shape())
      throw CorruptTensorError("tensor '" + name + "' has shape " +
                               shape_str(e.at("shape").get<Shape>()) +
                               ", architecture requires " + shape_str(t.shape()));
    const fs::path p = dir / e.at("file").get<std::string>();
    std::ifstream in(p, std::ios::binary);
    if (!in) throw MissingFileError("tensor file not found: " + p.string());
    std::error_code ec;
    const auto bytes = fs::file_size(p, ec);
    if (ec || bytes != t.size() * sizeof(std::uint32_t))
      throw CorruptTensorError("tensor file " + p.string() + " holds " +
                               std::to_string(bytes) + " bytes, expected " +
                               std::to_string(t.size() * 4));
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::uint32_t bits;
      in.read(reinterpret_cast<char*>(&bits), sizeof bits);
      bits = detail::to_le(bits);
      float f;
      std::memcpy(&f, &bits, sizeof f);
      t[i] = static_cast<T>(f);
    }
  });
  if (index != entries.size())
    throw CorruptTensorError("manifest " + mp.string() + " lists " +
                             std::to_string(entries.size()) +
                             " tensors, model has " + std::to_string(index));
  for (const auto& s : model.norm_stats())
    for (std::size_t i = 0; i < s.var.size(); ++i)
      if (!(s.var[i] >= T(0)))
        throw CorruptTensorError("negative normalization variance in " + dir.string());
  return model;
}

}  // namespace exml
