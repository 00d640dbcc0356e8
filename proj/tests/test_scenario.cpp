// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>

#include "exml/model_zoo.hpp"
#include "exml/scenario.hpp"

using namespace exml;

namespace {

SplitDataset<float> blobs() { return load_dataset<float>({"builtin:blobs", 30, 12, 5}); }

// Dataset whose inputs encode a unique sample id, so instances can be traced.
SplitDataset<float> tagged(std::size_t classes, std::size_t per_class) {
  std::vector<double> tx, vx;
  std::vector<int> ty, vy;
  double id = 0;
  for (std::size_t i = 0; i < per_class; ++i)
    for (std::size_t c = 0; c < classes; ++c) {
      tx.push_back(id++);
      ty.push_back(static_cast<int>(c));
      vx.push_back(id++);
      vy.push_back(static_cast<int>(c));
    }
  SplitDataset<float> d;
  d.train = detail::make_dataset<float>({1}, classes, tx, ty);
  d.test = detail::make_dataset<float>({1}, classes, vx, vy);
  return d;
}

std::set<float> ids(const Dataset<float>& d) {
  return {d.inputs.values().begin(), d.inputs.values().end()};
}

void expect_labels_in_class_set(const ExperienceData<float>& e) {
  for (const auto* d : {&e.train, &e.test})
    for (int y : d->labels)
      EXPECT_TRUE(std::binary_search(e.class_set.begin(), e.class_set.end(), y));
}

TEST(BuildScenario, NcFiveStepsOfTwoDisjointClasses) {
  const auto data = blobs();
  const auto exps = build_scenario(data, {ScenarioKind::NC, 5, {2}, 7});
  ASSERT_EQ(exps.size(), 5u);
  std::set<int> seen;
  std::size_t test_total = 0;
  for (const auto& e : exps) {
    EXPECT_EQ(e.class_set.size(), 2u);
    EXPECT_FALSE(e.task_label.has_value());
    for (int c : e.class_set) EXPECT_TRUE(seen.insert(c).second) << "class " << c;
    expect_labels_in_class_set(e);
    test_total += e.test.size();
  }
  EXPECT_EQ(seen.size(), 10u);
  EXPECT_EQ(test_total, data.test.size());
}

TEST(BuildScenario, NcTestSetsPartitionTheCoveredTestData) {
  const auto data = tagged(10, 6);
  const auto exps = build_scenario(data, {ScenarioKind::NC, 3, {3}, 1});
  std::set<int> covered;
  std::multiset<float> joined;
  for (const auto& e : exps) {
    covered.insert(e.class_set.begin(), e.class_set.end());
    for (float v : e.test.inputs.values()) joined.insert(v);
  }
  std::multiset<float> expected;
  for (std::size_t i = 0; i < data.test.size(); ++i)
    if (covered.count(data.test.labels[i])) expected.insert(data.test.inputs[i]);
  EXPECT_EQ(joined, expected);
}

TEST(BuildScenario, VariableStepSizesAndSeededAssignment) {
  const auto data = blobs();
  ScenarioSpec spec{ScenarioKind::NC, 3, {1, 4, 2}, 3};
  const auto a = build_scenario(data, spec);
  EXPECT_EQ(a[0].class_set.size(), 1u);
  EXPECT_EQ(a[1].class_set.size(), 4u);
  EXPECT_EQ(a[2].class_set.size(), 2u);
  const auto b = build_scenario(data, spec);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a[i].class_set, b[i].class_set);
  spec.seed = 4;
  const auto c = build_scenario(data, spec);
  bool differs = false;
  for (std::size_t i = 0; i < 3; ++i) differs |= a[i].class_set != c[i].class_set;
  EXPECT_TRUE(differs);
}

TEST(BuildScenario, MultiTaskCarriesTaskLabels) {
  const auto exps = build_scenario(blobs(), {ScenarioKind::MT, 5, {2}, 2});
  for (std::size_t i = 0; i < exps.size(); ++i) EXPECT_EQ(exps[i].task_label, static_cast<int>(i));
}

TEST(BuildScenario, JointHasOneExperienceWithAllClasses) {
  const auto data = blobs();
  const auto exps = build_scenario(data, {ScenarioKind::Joint, 1, {2}, 0});
  ASSERT_EQ(exps.size(), 1u);
  EXPECT_EQ(exps[0].class_set.size(), 10u);
  EXPECT_EQ(exps[0].train.size(), data.train.size());
  EXPECT_THROW(build_scenario(data, {ScenarioKind::Joint, 2, {2}, 0}), ScenarioError);
}

TEST(BuildScenario, NiStepsShareClassesWithDisjointInstances) {
  const auto data = tagged(4, 9);
  const auto exps = build_scenario(data, {ScenarioKind::NI, 3, {}, 11});
  ASSERT_EQ(exps.size(), 3u);
  std::set<float> train_seen, test_seen;
  std::size_t train_total = 0;
  for (const auto& e : exps) {
    EXPECT_EQ(e.class_set, (std::vector<int>{0, 1, 2, 3}));
    std::set<int> labels(e.train.labels.begin(), e.train.labels.end());
    EXPECT_EQ(labels.size(), 4u);
    for (float v : ids(e.train)) EXPECT_TRUE(train_seen.insert(v).second);
    for (float v : ids(e.test)) EXPECT_TRUE(test_seen.insert(v).second);
    for (float v : ids(e.test)) EXPECT_FALSE(ids(e.train).count(v));
    train_total += e.train.size();
  }
  EXPECT_EQ(train_total, data.train.size());
}

TEST(BuildScenario, ConstructionErrors) {
  const auto data = blobs();
  EXPECT_THROW(build_scenario(data, {ScenarioKind::NC, 6, {2}, 0}), ScenarioError);
  EXPECT_THROW(build_scenario(data, {ScenarioKind::NC, 0, {2}, 0}), ScenarioError);
  EXPECT_THROW(build_scenario(data, {ScenarioKind::NC, 2, {1, 2, 3}, 0}), ScenarioError);
  EXPECT_THROW(build_scenario(tagged(4, 2), {ScenarioKind::NI, 3, {}, 0}), ScenarioError);
  auto missing = tagged(4, 3);
  missing.train.num_classes = 6;
  EXPECT_THROW(build_scenario(missing, {ScenarioKind::NC, 1, {6}, 0}), ScenarioError);
}

TEST(StreamEval, WeightedByTestSetSize) {
  StreamEval equal{{80, 60}, {100, 100}};
  EXPECT_DOUBLE_EQ(equal.stream_accuracy(), 0.7);
  StreamEval skewed{{100, 0}, {100, 300}};
  EXPECT_DOUBLE_EQ(skewed.stream_accuracy(), 0.25);
  EXPECT_THROW((StreamEval{{0}, {0}}).stream_accuracy(), MetricError);
  EXPECT_THROW(StreamEval{}.stream_accuracy(), MetricError);
}

TEST(StreamEval, PerfectClassifierAndPermutationInvariance) {
  const auto data = blobs();
  auto exps = build_scenario(data, {ScenarioKind::NC, 5, {2}, 3});
  const Predictor<float> truth = [](const Tensor<float>& x, const ExperienceData<float>& e) {
    std::vector<int> out;
    for (std::size_t r = 0; r < x.dim(0); ++r) {
      for (std::size_t i = 0; i < e.test.size(); ++i)
        if (e.test.inputs.at(i, 0) == x.at(r, 0) && e.test.inputs.at(i, 1) == x.at(r, 1)) {
          out.push_back(e.test.labels[i]);
          break;
        }
    }
    return out;
  };
  EXPECT_EQ(evaluate_stream(truth, exps).stream_accuracy(), 1.0);

  ArchitectureSpec arch;
  arch.input_shape = {2};
  TrainConfig tc;
  tc.epochs = 2;
  tc.accuracy_floor = 0;
  const auto m = train_expert(data.train, arch, tc, 1);
  const double a = stream_accuracy(m, exps);
  std::reverse(exps.begin(), exps.end());
  std::swap(exps[1], exps[3]);
  EXPECT_DOUBLE_EQ(stream_accuracy(m, exps), a);
}

TEST(StreamEval, TaskMaskingNeverLowersPerExperienceAccuracy) {
  const auto data = blobs();
  const auto exps = build_scenario(data, {ScenarioKind::MT, 5, {2}, 4});
  ArchitectureSpec arch;
  arch.input_shape = {2};
  TrainConfig tc;
  tc.epochs = 1;
  tc.accuracy_floor = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto m = train_expert(exps[0].train, arch, tc, seed);
    const auto plain = evaluate_stream(model_predictor(m, false), exps).per_experience();
    const auto masked = evaluate_stream(model_predictor(m, true), exps).per_experience();
    for (std::size_t i = 0; i < exps.size(); ++i) EXPECT_GE(masked[i], plain[i]);
  }
}

TEST(Datasets, BuiltinsAreDeterministicAndNormalized) {
  const auto a = load_dataset<float>({"builtin:digits", 20, 10, 9});
  const auto b = load_dataset<float>({"builtin:digits", 20, 10, 9});
  EXPECT_EQ(a.train.inputs, b.train.inputs);
  EXPECT_EQ(a.train.sample_shape, (Shape{1, 8, 8}));
  EXPECT_EQ(a.train.size(), 200u);
  EXPECT_EQ(a.test.size(), 100u);
  double mean = 0;
  for (float v : a.train.inputs.values()) mean += v;
  EXPECT_NEAR(mean / a.train.inputs.size(), 0.0, 1e-4);
}

TEST(Datasets, FilesResolveAgainstTheDataDirectory) {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "exml_scenario_data";
  fs::create_directories(dir);
  write_dataset_file(dir / "tiny.csv", tagged(3, 4));
  ::setenv(kDataDirEnv, dir.c_str(), 1);
  const auto d = load_dataset<float>({"tiny.csv", 0, 0, 0});
  EXPECT_EQ(d.train.size(), 12u);
  EXPECT_EQ(d.train.num_classes, 3u);
  EXPECT_THROW(load_dataset<float>({"absent.csv", 0, 0, 0}), ConfigError);
  ::unsetenv(kDataDirEnv);
  EXPECT_THROW(load_dataset<float>({"tiny.csv", 0, 0, 0}), ConfigError);
  EXPECT_THROW(load_dataset<float>({"builtin:nothing", 1, 1, 0}), ConfigError);
  fs::remove_all(dir);
}

}  // namespace
