// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "exml/harness/commands.hpp"

using namespace exml;
using namespace exml::harness;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("exml_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig tiny_blobs(const std::string& name) {
  ExperimentConfig c;
  c.name = name;
  c.output_dir = scratch(name);
  c.dataset = {"builtin:blobs", 30, 15, 7};
  c.model.kind = ArchKind::Mlp;
  c.model.hidden = 16;
  c.train.epochs = 15;
  c.scenario = {ScenarioKind::NC, 5, {2}, 0};
  c.strategies = {Strategy::Oracle, Strategy::ParamAvg, Strategy::ReplayEd};
  c.seeds = {1, 2, 3};
  c.buffer_capacity = 50;
  c.distill.iterations = 40;
  c.distill.augment = {};
  c.generator.iterations = 5;
  c.generator.augment = {};
  return c;
}

ExperimentConfig tiny_digits(const std::string& name) {
  ExperimentConfig c;
  c.name = name;
  c.output_dir = scratch(name);
  c.dataset = {"builtin:digits", 20, 5, 7};
  c.model.kind = ArchKind::ConvNet;
  c.model.channels1 = 4;
  c.model.channels2 = 4;
  c.train.epochs = 3;
  c.train.accuracy_floor = 0;
  c.scenario = {ScenarioKind::NC, 5, {2}, 0};
  c.strategies = {Strategy::ModelInversionEd};
  c.seeds = {4};
  c.generator.iterations = 3;
  c.generator.mb_size = 8;
  c.dump_per_class = 8;
  return c;
}

// ---------------------------------------------------------------------------
// Config

TEST(Config, RoundTripOfDefaultsAndEveryKey) {
  const ExperimentConfig d;
  EXPECT_EQ(parse_config(serialize_config(d)), d);

  ExperimentConfig c = tiny_digits("roundtrip");
  c.model.hidden = 7;
  c.train.lr = 0.123456789012345;
  c.train.weight_decay = 1e-7;
  c.scenario = {ScenarioKind::MT, 3, {1, 4, 2}, 99};
  c.strategies = {Strategy::AuxDataEd, Strategy::DataImpressionEd, Strategy::MinEntropy};
  c.generator.optimizer = SampleOptimizerKind::Sgd;
  c.generator.aux_selection = AuxSelection::Random;
  c.generator.augment = {false, true, true, 2, 12.5};
  c.generator.stop_confidence = 0.95;
  c.di_temperature = 3.3;
  c.distill.normalize = LogitNormalization::Standardize;
  c.distill.lambda_ce = 0.1 + 0.2;
  c.aux_dataset_path = "aux/pool.csv";
  c.aux_pool_size = 17;
  c.ablation_sizes = {12, 34};
  c.ablation_strategies = {Strategy::ReplayEd, Strategy::ModelInversionEd};
  c.dump_experience = 2;
  c.seeds = {18446744073709551615ull, 0};
  const auto back = parse_config(serialize_config(c));
  EXPECT_EQ(back, c);
  EXPECT_EQ(serialize_config(back), serialize_config(c));
}

TEST(Config, PresetsParseValidateAndRoundTrip) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(fs::path(EXML_SOURCE_DIR) / "configs")) {
    if (e.path().extension() != ".cfg") continue;
    SCOPED_TRACE(e.path().string());
    const auto c = load_config(e.path());
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(parse_config(serialize_config(c)), c);
    ++n;
  }
  EXPECT_GE(n, 3u);
}

TEST(Config, SyntaxErrorsAreConfigErrors) {
  EXPECT_EQ(parse_config("# comment\n\n  seeds = 4 , 5\n").seeds,
            (std::vector<std::uint64_t>{4, 5}));
  EXPECT_THROW(parse_config("generator.lr = fast\n"), ConfigError);
  EXPECT_THROW(parse_config("generator.lrr = 0.1\n"), ConfigError);
  EXPECT_THROW(parse_config("seeds = 1\nseeds = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("just words\n"), ConfigError);
  EXPECT_THROW(parse_config("strategy = magic\n"), ConfigError);
  EXPECT_THROW(parse_config("scenario.kind = NIC\n"), ConfigError);
  EXPECT_THROW(parse_config("generator.augment.shift = maybe\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/exml.cfg"), ConfigError);
}

TEST(Config, ValidationRequiresSeedsStrategiesAndAuxPath) {
  auto c = tiny_blobs("validate");
  c.seeds.clear();
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_blobs("validate");
  c.strategies = {Strategy::AuxDataEd};
  EXPECT_THROW(c.validate(), ConfigError);
  c.aux_dataset_path = "builtin:uniform";
  EXPECT_NO_THROW(c.validate());
  c.scenario = {ScenarioKind::Joint, 2, {2}, 0};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Strategies, ComplianceFlags) {
  std::map<Strategy, bool> expected{
      {Strategy::ModelInversionEd, true}, {Strategy::DataImpressionEd, true},
      {Strategy::AuxDataEd, true},        {Strategy::ParamAvg, true},
      {Strategy::ReplayEd, false},        {Strategy::Oracle, false},
      {Strategy::EnsembleAvg, false},     {Strategy::MinEntropy, false}};
  for (auto [s, flag] : expected) {
    EXPECT_EQ(exml_compliant(s), flag) << to_string(s);
    EXPECT_EQ(parse_strategy(to_string(s)), s);
  }
}

// ---------------------------------------------------------------------------
// Aggregation

TEST(Summary, SampleStandardDeviation) {
  const auto m = mean_std({0.4, 0.6});
  EXPECT_DOUBLE_EQ(m.mean, 0.5);
  EXPECT_NEAR(m.std, 0.1414213562373095, 1e-15);
  EXPECT_EQ(mean_std({0.7}).std, 0.0);
  EXPECT_EQ(format_cell(m), "0.500 ± 0.141");
}

TEST(Summary, UsesTheFinalExperiencePerSeed) {
  auto row = [](std::string s, std::uint64_t seed, std::size_t i, double a) {
    ResultRecord r;
    r.strategy = std::move(s);
    r.scenario = "x";
    r.seed = seed;
    r.experience_index = i;
    r.stream_accuracy = a;
    return r;
  };
  const auto cells = summarize({row("a", 1, 0, 0.9), row("a", 1, 1, 0.4), row("a", 2, 1, 0.6),
                                row("a", 2, 0, 0.1), row("b", 1, 0, 1.0)});
  ASSERT_EQ(cells.size(), 2u);
  EXPECT_EQ(cells[0].strategy, "a");
  EXPECT_DOUBLE_EQ(cells[0].stat.mean, 0.5);
  EXPECT_EQ(cells[0].stat.n, 2u);
  EXPECT_EQ(cells[1].stat.n, 1u);
}

// ---------------------------------------------------------------------------
// train-stream

TEST(TrainStream, LayoutAndIdempotentManifests) {
  const auto cfg = tiny_blobs("layout");
  const auto dirs = cmd_train_stream(cfg);
  ASSERT_EQ(dirs.size(), 3u);
  std::size_t experts = 0;
  std::vector<std::string> manifests;
  for (const auto& d : dirs) {
    EXPECT_EQ(d.parent_path(), cfg.output_dir / "stream" / cfg.name);
    for (std::size_t i = 0; i < 5; ++i) {
      experts += fs::is_regular_file(d / ("expert_" + std::to_string(i)) / "manifest.json");
      std::ifstream cls(d / ("classes_" + std::to_string(i) + ".txt"));
      int a = -1, b = -1, extra = -1;
      cls >> a >> b;
      EXPECT_GE(a, 0);
      EXPECT_GT(b, a);
      EXPECT_FALSE(cls >> extra);
    }
    manifests.push_back(slurp(d / "manifest.json"));
  }
  EXPECT_EQ(experts, 15u);
  cmd_train_stream(cfg);
  for (std::size_t k = 0; k < dirs.size(); ++k)
    EXPECT_EQ(slurp(dirs[k] / "manifest.json"), manifests[k]);
  for (const auto& e : fs::directory_iterator(cfg.output_dir / "stream" / cfg.name))
    EXPECT_EQ(e.path().extension(), "") << e.path();
  fs::remove_all(cfg.output_dir);
}

TEST(TrainStream, MissingDatasetFailsBeforeTraining) {
  auto cfg = tiny_blobs("missing_data");
  cfg.dataset.path = "no/such/dataset.csv";
  EXPECT_THROW(cmd_train_stream(cfg), ConfigError);
  EXPECT_FALSE(fs::exists(cfg.output_dir));
}

TEST(TrainStream, FailedWriteLeavesPriorStreamIntact) {
  auto cfg = tiny_blobs("partial");
  cfg.seeds = {1};
  const auto dir = cmd_train_stream(cfg).at(0);
  const auto before = slurp(dir / "manifest.json");
  const auto data = load_dataset<float>(cfg.dataset);
  const auto ctx = seed_context(cfg, data, 1);
  TrainConfig quick = cfg.train;
  quick.epochs = 1;
  quick.accuracy_floor = 0;
  const auto ts = train_stream(ctx.experiences, ctx.arch, quick, 1);
  nlohmann::json bad = stream_manifest(cfg, 1, ts);
  bad["name"] = std::string("\xff\xfe");  // not UTF-8: serialization throws
  EXPECT_ANY_THROW(save_stream(ts, bad, dir));
  EXPECT_EQ(slurp(dir / "manifest.json"), before);
  EXPECT_FALSE(fs::exists(dir.parent_path() / "seed1.partial"));
  fs::remove_all(cfg.output_dir);
}

// ---------------------------------------------------------------------------
// run

TEST(Run, MissingStreamNamesTrainStream) {
  const auto cfg = tiny_blobs("no_stream");
  try {
    cmd_run(cfg);
    FAIL() << "expected a missing-stream error";
  } catch (const MissingFileError& e) {
    EXPECT_NE(std::string(e.what()).find("train-stream"), std::string::npos);
  }
  fs::remove_all(cfg.output_dir);
}

TEST(Run, StreamMustMatchTheConfig) {
  auto cfg = tiny_blobs("mismatch");
  cfg.seeds = {1};
  cmd_train_stream(cfg);
  auto other = cfg;
  other.scenario.seed = 5;
  EXPECT_THROW(cmd_run(other), ScenarioError);
  other = cfg;
  other.model.hidden = 8;
  EXPECT_THROW(cmd_run(other), ArchitectureMismatchError);
  fs::remove_all(cfg.output_dir);
}

// Independent re-aggregation from the raw CSV files.
TEST(Run, CsvRowsRecomputeAndAppendOnly) {
  const auto cfg = tiny_blobs("run_rows");
  cmd_train_stream(cfg);
  const auto first = cmd_run(cfg);
  EXPECT_EQ(first.run_id, "run-0001");
  EXPECT_EQ(first.records.size(), 3u * 3u * 5u);

  std::ifstream res(cfg.output_dir / "results.csv");
  std::string header;
  std::getline(res, header);
  EXPECT_EQ(header,
            "run_id,strategy,scenario,seed,experience_index,stream_accuracy,wall_time_seconds,"
            "exml_compliant");

  std::map<std::string, std::pair<std::size_t, std::size_t>> counts;
  {
    std::ifstream pe(cfg.output_dir / "per_experience.csv");
    std::string line;
    std::getline(pe, line);
    while (std::getline(pe, line)) {
      const auto f = split_csv_line(line);
      const std::string key = f[0] + "|" + f[1] + "|" + f[3] + "|" + f[4];
      counts[key].first += std::stoul(f[6]);
      counts[key].second += std::stoul(f[7]);
    }
  }
  std::map<std::pair<std::string, std::string>, std::map<std::string, std::pair<std::size_t, double>>>
      finals;
  for (const auto& r : read_results(cfg.output_dir / "results.csv")) {
    const std::string key = r.run_id + "|" + r.strategy + "|" + std::to_string(r.seed) + "|" +
                            std::to_string(r.experience_index);
    const auto [c, t] = counts.at(key);
    EXPECT_NEAR(r.stream_accuracy, static_cast<double>(c) / t, 1e-9) << key;
    EXPECT_GE(r.stream_accuracy, 0.0);
    EXPECT_LE(r.stream_accuracy, 1.0);
    EXPECT_EQ(r.exml_compliant, exml_compliant(parse_strategy(r.strategy)));
    auto& slot = finals[{r.strategy, r.scenario}][std::to_string(r.seed)];
    if (r.experience_index >= slot.first) slot = {r.experience_index, r.stream_accuracy};
  }

  std::ifstream sum(cfg.output_dir / "summary.csv");
  std::string line;
  std::getline(sum, line);
  std::size_t cells = 0;
  while (std::getline(sum, line)) {
    const auto f = split_csv_line(line);
    const auto& seeds = finals.at({f[1], f[2]});
    double mean = 0;
    for (const auto& [s, v] : seeds) mean += v.second;
    mean /= seeds.size();
    double ss = 0;
    for (const auto& [s, v] : seeds) ss += (v.second - mean) * (v.second - mean);
    EXPECT_NEAR(std::stod(f[4]), mean, 1e-9);
    EXPECT_NEAR(std::stod(f[5]), std::sqrt(ss / (seeds.size() - 1)), 1e-9);
    ++cells;
  }
  EXPECT_EQ(cells, 3u);

  for (const auto& c : first.summary)
    if (c.strategy == "oracle") {
      EXPECT_EQ(format_cell(c.stat), "1.000 ± 0.000");
    }

  const std::string before = slurp(cfg.output_dir / "results.csv");
  const auto second = cmd_run(cfg);
  EXPECT_EQ(second.run_id, "run-0002");
  const std::string after = slurp(cfg.output_dir / "results.csv");
  EXPECT_EQ(after.substr(0, before.size()), before);
  EXPECT_EQ(read_results(cfg.output_dir / "results.csv").size(), 2 * first.records.size());
  fs::remove_all(cfg.output_dir);
}

TEST(Run, RefusesToAppendToAForeignFile) {
  const auto cfg = tiny_blobs("foreign");
  cmd_train_stream(cfg);
  std::ofstream(cfg.output_dir / "results.csv") << "a,b,c\n1,2,3\n";
  EXPECT_THROW(cmd_run(cfg), IoError);
  EXPECT_EQ(slurp(cfg.output_dir / "results.csv"), "a,b,c\n1,2,3\n");
  fs::remove_all(cfg.output_dir);
}

TEST(Run, SeedFilterAndOutputDirOverride) {
  auto cfg = tiny_blobs("filter");
  const auto elsewhere = scratch("filter_override");
  CommandOptions opt;
  opt.seed_filter = {2};
  opt.output_dir = elsewhere;
  cmd_train_stream(cfg, opt);
  EXPECT_TRUE(fs::exists(elsewhere / "stream" / cfg.name / "seed2"));
  EXPECT_FALSE(fs::exists(elsewhere / "stream" / cfg.name / "seed1"));
  EXPECT_FALSE(fs::exists(cfg.output_dir));
  const auto out = cmd_run(cfg, opt);
  for (const auto& r : out.records) EXPECT_EQ(r.seed, 2u);
  opt.seed_filter = {42};
  EXPECT_THROW(cmd_run(cfg, opt), ConfigError);
  fs::remove_all(elsewhere);
}

TEST(Run, RepeatedRunsReproduceAccuracies) {
  auto a = tiny_blobs("determinism_a");
  a.strategies = {Strategy::ModelInversionEd, Strategy::ReplayEd};
  a.seeds = {3};
  auto b = a;
  b.output_dir = scratch("determinism_b");
  cmd_train_stream(a);
  cmd_train_stream(b);
  const auto ra = cmd_run(a), rb = cmd_run(b);
  ASSERT_EQ(ra.records.size(), rb.records.size());
  for (std::size_t i = 0; i < ra.records.size(); ++i)
    EXPECT_EQ(ra.records[i].stream_accuracy, rb.records[i].stream_accuracy);
  fs::remove_all(a.output_dir);
  fs::remove_all(b.output_dir);
}

// ---------------------------------------------------------------------------
// ablate-buffer

TEST(AblateBuffer, RowsPerSeedAndExactPlotTicks) {
  auto cfg = tiny_blobs("ablate");
  cfg.seeds = {1, 2};
  cfg.ablation_sizes = {10, 100, 1000};
  cmd_train_stream(cfg);
  const auto out = cmd_ablate_buffer(cfg);
  EXPECT_EQ(out.rows.size(), 3u * 2u);
  for (auto seed : cfg.seeds) {
    std::size_t n = 0;
    for (const auto& r : out.rows) n += r.seed == seed;
    EXPECT_EQ(n, 3u);
  }
  const std::string svg = slurp(cfg.output_dir / "ablation.svg");
  std::vector<std::string> ticks;
  for (std::size_t pos = 0; (pos = svg.find("data-value=\"", pos)) != std::string::npos;) {
    pos += 12;
    ticks.push_back(svg.substr(pos, svg.find('"', pos) - pos));
  }
  EXPECT_EQ(ticks, (std::vector<std::string>{"10", "100", "1000"}));
  EXPECT_TRUE(fs::exists(cfg.output_dir / "ablation_summary.csv"));

  cfg.ablation_sizes = {9, 100};
  EXPECT_THROW(cmd_ablate_buffer(cfg), ConfigError);
  fs::remove_all(cfg.output_dir);
}

// ---------------------------------------------------------------------------
// dump-buffer

TEST(DumpBuffer, ImageGridIsDeterministic) {
  const auto cfg = tiny_digits("dump");
  cmd_train_stream(cfg);
  CommandOptions opt;
  opt.experience = 1;
  const auto a = cmd_dump_buffer(cfg, opt);
  ASSERT_EQ(a.size(), 1u);
  ASSERT_TRUE(a[0].image);
  const std::string first = slurp(a[0].file);
  std::istringstream header(first);
  std::string magic;
  std::size_t w = 0, h = 0;
  header >> magic >> w >> h;
  EXPECT_EQ(magic, "P5");
  EXPECT_EQ(w, 8u * 9u + 1u);  // 8 samples of width 8 with 1-pixel gaps
  EXPECT_EQ(h, 2u * 9u + 1u);  // 2 classes
  const auto b = cmd_dump_buffer(cfg, opt);
  EXPECT_EQ(slurp(b[0].file), first);
  opt.experience = 5;
  EXPECT_THROW(cmd_dump_buffer(cfg, opt), ConfigError);
  fs::remove_all(cfg.output_dir);
}

TEST(DumpBuffer, VectorDataFallsBackToCsv) {
  auto cfg = tiny_blobs("dump_csv");
  cfg.seeds = {1};
  cfg.strategies = {Strategy::ModelInversionEd};
  cfg.dump_per_class = 4;
  cmd_train_stream(cfg);
  std::ostringstream log;
  CommandOptions opt;
  opt.log = &log;
  const auto out = cmd_dump_buffer(cfg, opt);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_FALSE(out[0].image);
  EXPECT_EQ(out[0].file.extension(), ".csv");
  EXPECT_NE(log.str().find("not images"), std::string::npos);
  std::ifstream in(out[0].file);
  std::string line;
  std::size_t rows = 0;
  std::getline(in, line);
  EXPECT_EQ(line, "class,slot,x0,x1");
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 2u * 4u);
  cfg.strategies = {Strategy::ReplayEd};
  EXPECT_THROW(cmd_dump_buffer(cfg), ConfigError);
  fs::remove_all(cfg.output_dir);
}

}  // namespace
