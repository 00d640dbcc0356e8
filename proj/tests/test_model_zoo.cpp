// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "exml/model_zoo.hpp"

using namespace exml;
namespace fs = std::filesystem;

namespace {

ArchitectureSpec mlp(std::size_t classes = 10) {
  ArchitectureSpec s;
  s.kind = ArchKind::Mlp;
  s.input_shape = {2};
  s.hidden = 16;
  s.num_classes = classes;
  return s;
}

ArchitectureSpec convnet() {
  ArchitectureSpec s;
  s.kind = ArchKind::ConvNet;
  s.input_shape = {1, 8, 8};
  s.channels1 = 4;
  s.channels2 = 8;
  s.num_classes = 10;
  return s;
}

Tensor<float> uniform_batch(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-2, 2);
  Tensor<float> t(std::move(shape));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// Two Gaussian clusters at (-3, -3) and (3, 3), labels 0 and 1.
Dataset<float> two_blobs(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0, 0.8);
  std::vector<double> xs;
  std::vector<int> ys;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    const double c = y ? 3.0 : -3.0;
    xs.push_back(c + noise(rng));
    xs.push_back(c + noise(rng));
    ys.push_back(y);
  }
  return detail::make_dataset<float>({2}, 10, xs, ys);
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("exml_zoo_" + name);
  fs::remove_all(p);
  return p;
}

TEST(ForwardLogits, ShapesAndSoftmaxRows) {
  for (const auto& arch : {mlp(), convnet()}) {
    const auto m = Model<float>::create(arch, 3);
    Shape shape{7};
    shape.insert(shape.end(), arch.input_shape.begin(), arch.input_shape.end());
    const auto z = m.forward(uniform_batch(shape, 1));
    ASSERT_EQ(z.shape(), (Shape{7, 10}));
    EXPECT_TRUE(z.all_finite());
    const auto p = softmax_rows(z);
    for (std::size_t r = 0; r < 7; ++r) {
      double s = 0;
      for (float v : p.row(r)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
    EXPECT_EQ(m.classifier_weights().dim(0), arch.num_classes);
  }
}

TEST(ForwardLogits, DuplicatedRowsGiveIdenticalLogits) {
  const auto m = Model<float>::create(convnet(), 4);
  auto x = uniform_batch({4, 1, 8, 8}, 2);
  const auto r0 = x.row(0);
  std::copy(r0.begin(), r0.end(), x.row(2).begin());
  const auto z = m.forward(x);
  for (std::size_t k = 0; k < 10; ++k) EXPECT_EQ(z.at(0, k), z.at(2, k));
}

TEST(ForwardLogits, ZeroLinearModelGivesZeroLogits) {
  ArchitectureSpec lin;
  lin.kind = ArchKind::Linear;
  lin.input_shape = {5};
  lin.num_classes = 3;
  const auto z = Model<float>::zeros(lin).forward(uniform_batch({6, 5}, 3));
  for (float v : z.values()) EXPECT_EQ(v, 0.0f);
}

TEST(ForwardLogits, ShapeMismatchIsAnInputContractError) {
  const auto m = Model<float>::create(mlp(), 1);
  EXPECT_THROW(m.forward(uniform_batch({3, 3}, 1)), InputContractError);
  EXPECT_THROW(Model<float>::create(convnet(), 1).forward(uniform_batch({3, 2}, 1)),
               InputContractError);
}

TEST(ForwardLogits, ForwardIsPure) {
  const auto m = Model<float>::create(convnet(), 5);
  const auto before = m.parameter_hash();
  m.forward(uniform_batch({8, 1, 8, 8}, 4));
  EXPECT_EQ(m.parameter_hash(), before);
}

TEST(ExpertModel, NormStatsOnePerNormalizationLayer) {
  const auto m = Model<float>::create(convnet(), 6);
  const auto stats = m.norm_stats();
  EXPECT_EQ(stats.size(), m.norm_layer_indices().size());
  EXPECT_GE(stats.size(), 1u);
  for (const auto& s : stats)
    for (float v : s.var.values()) EXPECT_GE(v, 0.0f);
  EXPECT_TRUE(Model<float>::create(mlp(), 1).norm_stats().empty());
}

// Independent oracle: batch gradient-descent logistic regression in double.
double logistic_regression_accuracy(const Dataset<float>& d) {
  double w0 = 0, w1 = 0, b = 0;
  for (int it = 0; it < 500; ++it) {
    double g0 = 0, g1 = 0, gb = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double x0 = d.inputs.at(i, 0), x1 = d.inputs.at(i, 1);
      const double p = 1.0 / (1.0 + std::exp(-(w0 * x0 + w1 * x1 + b)));
      const double e = p - d.labels[i];
      g0 += e * x0;
      g1 += e * x1;
      gb += e;
    }
    w0 -= 0.1 * g0 / d.size();
    w1 -= 0.1 * g1 / d.size();
    b -= 0.1 * gb / d.size();
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i)
    correct += ((w0 * d.inputs.at(i, 0) + w1 * d.inputs.at(i, 1) + b) > 0) == (d.labels[i] == 1);
  return static_cast<double>(correct) / d.size();
}

TEST(TrainExpert, SeparableBlobsReachFloorLikeLogisticRegression) {
  const auto d = two_blobs(200, 11);
  ASSERT_GE(logistic_regression_accuracy(d), 0.99);
  double acc = 0;
  train_expert(d, mlp(), TrainConfig{}, 1, &acc);
  EXPECT_GE(acc, 0.99);
}

TEST(TrainExpert, SingleClassDatasetPredictsThatClass) {
  auto d = two_blobs(60, 12);
  for (auto& y : d.labels) y = 7;
  double acc = 0;
  const auto m = train_expert(d, mlp(), TrainConfig{}, 2, &acc);
  EXPECT_EQ(acc, 1.0);
  const auto z = m.forward(uniform_batch({20, 2}, 9));
  for (std::size_t r = 0; r < 20; ++r) EXPECT_EQ(argmax(z.row(r)), 7u);
}

TEST(TrainExpert, SeededTrainingIsBitIdentical) {
  const auto d = two_blobs(100, 13);
  const auto a = train_expert(d, mlp(), TrainConfig{}, 5);
  const auto b = train_expert(d, mlp(), TrainConfig{}, 5);
  EXPECT_TRUE(same_parameters(a, b));
  EXPECT_EQ(a.parameter_hash(), b.parameter_hash());
  const auto c = train_expert(d, mlp(), TrainConfig{}, 6);
  EXPECT_NE(a.parameter_hash(), c.parameter_hash());
}

TEST(TrainExpert, ContractErrors) {
  const auto d = two_blobs(40, 14);
  EXPECT_THROW(train_expert(Dataset<float>::empty_like(d), mlp(), TrainConfig{}, 1),
               ScenarioError);
  auto bad = d;
  bad.labels[3] = 10;
  EXPECT_THROW(train_expert(bad, mlp(), TrainConfig{}, 1), ScenarioError);
  TrainConfig explode;
  explode.lr = 1e30;
  explode.accuracy_floor = 0;
  try {
    train_expert(d, mlp(), explode, 1);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_GT(e.iteration(), 0u);
    EXPECT_LT(e.iteration(), 20u);
  }
  auto noisy = d;
  std::mt19937_64 rng(3);
  for (auto& y : noisy.labels) y = static_cast<int>(rng() % 2);
  TrainConfig strict;
  strict.epochs = 1;
  strict.accuracy_floor = 0.999;
  EXPECT_THROW(train_expert(noisy, mlp(), strict, 1), TrainingFloorError);
}

TEST(Persistence, RoundTripPreservesLogits) {
  const auto d = two_blobs(60, 15);
  TrainConfig tc;
  tc.epochs = 2;
  tc.accuracy_floor = 0;
  for (const auto& arch : {mlp(), convnet()}) {
    Dataset<float> data = d;
    if (arch.kind == ArchKind::ConvNet) {
      data.sample_shape = {1, 8, 8};
      data.inputs = uniform_batch({60, 1, 8, 8}, 7);
    }
    const auto m = train_expert(data, arch, tc, 3);
    const auto dir = scratch(arch.kind == ArchKind::Mlp ? "mlp" : "conv");
    save_expert(m, dir);
    const auto back = load_expert<float>(dir, arch.id());
    EXPECT_EQ(back.architecture_id(), m.architecture_id());
    Shape shape{16};
    shape.insert(shape.end(), arch.input_shape.begin(), arch.input_shape.end());
    const auto probe = uniform_batch(shape, 8);
    const auto za = m.forward(probe), zb = back.forward(probe);
    for (std::size_t i = 0; i < za.size(); ++i) EXPECT_LE(std::abs(za[i] - zb[i]), 1e-6f);
    fs::remove_all(dir);
  }
}

TEST(Persistence, DistinctErrorsPerFailure) {
  const auto m = Model<float>::create(convnet(), 1);
  const auto dir = scratch("errors");
  save_expert(m, dir);
  EXPECT_THROW(load_expert<float>(dir, mlp().id()), ArchitectureMismatchError);
  EXPECT_THROW(load_expert<float>(dir / "nope"), MissingFileError);

  // truncate the first tensor file
  std::string first;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().filename().string().rfind("0_", 0) == 0) first = e.path().string();
  ASSERT_FALSE(first.empty());
  fs::resize_file(first, 4);
  EXPECT_THROW(load_expert<float>(dir), CorruptTensorError);
  fs::remove(first);
  EXPECT_THROW(load_expert<float>(dir), MissingFileError);

  const auto blocker = scratch("blocker");
  std::ofstream(blocker) << "file";
  try {
    save_expert(m, blocker / "expert");
    FAIL() << "expected an I/O error";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find(blocker.string()), std::string::npos);
  }
  fs::remove_all(dir);
  fs::remove(blocker);
}

}  // namespace
