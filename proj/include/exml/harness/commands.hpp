// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "exml/harness/config.hpp"
#include "exml/harness/results.hpp"
#include "exml/harness/stream_io.hpp"
#include "exml/stream.hpp"

namespace exml::harness {

/// Command-line overrides shared by every subcommand.
struct CommandOptions {
  std::vector<std::uint64_t> seed_filter;  // empty: all configured seeds
  std::optional<fs::path> output_dir;
  std::optional<std::size_t> experience;  // dump-buffer only
  std::ostream* log = nullptr;
};

/// Applies overrides and checks the config, including that every dataset it
/// names exists.
inline ExperimentConfig resolve(ExperimentConfig cfg, const CommandOptions& opt) {
  if (opt.output_dir) cfg.output_dir = *opt.output_dir;
  if (!opt.seed_filter.empty()) {
    for (auto s : opt.seed_filter)
      if (std::find(cfg.seeds.begin(), cfg.seeds.end(), s) == cfg.seeds.end())
        throw ConfigError("--seed-filter names seed " + std::to_string(s) +
                          ", which the config does not list");
    std::vector<std::uint64_t> kept;
    for (auto s : cfg.seeds)
      if (std::find(opt.seed_filter.begin(), opt.seed_filter.end(), s) != opt.seed_filter.end())
        kept.push_back(s);
    cfg.seeds = kept;
  }
  cfg.validate();
  require_dataset(cfg.dataset.path);
  if (cfg.aux_dataset_path) require_dataset(*cfg.aux_dataset_path);
  return cfg;
}

namespace detail {

inline std::ostream& log_of(const CommandOptions& opt) {
  static std::ostream null(nullptr);
  return opt.log ? *opt.log : null;
}

inline std::vector<std::uint64_t> parse_seed_list(const std::string& v) {
  std::vector<std::uint64_t> out;
  for (const auto& s : split_list(v)) out.push_back(parse_number<std::uint64_t>("--seed-filter", s));
  return out;
}

}  // namespace detail

/// Dataset, experiences and architecture for one run seed.
struct SeedContext {
  const SplitDataset<float>* data = nullptr;
  std::vector<ExperienceData<float>> experiences;
  ArchitectureSpec arch;
  std::uint64_t seed = 0;
};

inline SeedContext seed_context(const ExperimentConfig& cfg, const SplitDataset<float>& data,
                                std::uint64_t seed) {
  SeedContext c;
  c.data = &data;
  c.experiences = build_scenario(data, scenario_for_seed(cfg, seed));
  c.arch = cfg.model.architecture(data.train.sample_shape, data.train.num_classes);
  c.seed = seed;
  return c;
}

/// Trains and persists one expert stream per seed. Returns the stream
/// directories.
inline std::vector<fs::path> cmd_train_stream(const ExperimentConfig& config,
                                              const CommandOptions& opt = {}) {
  const ExperimentConfig cfg = resolve(config, opt);
  auto& log = detail::log_of(opt);
  const auto data = load_dataset<float>(cfg.dataset);
  std::vector<fs::path> out;
  for (auto seed : cfg.seeds) {
    const auto ctx = seed_context(cfg, data, seed);
    log << "train-stream " << cfg.name << " seed " << seed << ": " << ctx.experiences.size()
        << " experts (" << ctx.arch.id() << ")\n";
    const auto ts = train_stream(ctx.experiences, ctx.arch, cfg.train, seed);
    const fs::path dir = stream_dir(cfg, seed);
    save_stream(ts, stream_manifest(cfg, seed, ts), dir);
    out.push_back(dir);
  }
  return out;
}

namespace detail {

inline StreamEval evaluate_model(const Model<float>& m, const SeedContext& ctx,
                                 bool task_labels) {
  return evaluate_stream(model_predictor(m, task_labels), ctx.experiences);
}

/// Each experience predicted by its own expert, restricted to that
/// experience's classes; experiences without an expert yet count as errors.
inline StreamEval evaluate_oracle(const EnsembleModel<float>& ens, const SeedContext& ctx) {
  StreamEval ev;
  for (std::size_t j = 0; j < ctx.experiences.size(); ++j) {
    const auto& test = ctx.experiences[j].test;
    std::size_t correct = 0;
    if (j < ens.experts.size() && !test.empty()) {
      const auto pred = predict_oracle(ens, test.inputs, static_cast<int>(j));
      for (std::size_t r = 0; r < pred.size(); ++r) correct += pred[r] == test.labels[r];
    }
    ev.correct.push_back(correct);
    ev.total.push_back(test.size());
  }
  return ev;
}

inline ResultRecord make_record(const ExperimentConfig& cfg, Strategy s, std::uint64_t seed,
                                std::size_t i, const StreamEval& ev, double seconds) {
  ResultRecord r;
  r.strategy = to_string(s);
  r.scenario = cfg.name;
  r.seed = seed;
  r.experience_index = i;
  r.correct = ev.correct;
  r.total = ev.total;
  r.stream_accuracy = ev.stream_accuracy();
  r.wall_time_seconds = seconds;
  r.exml_compliant = exml_compliant(s);
  return r;
}

}  // namespace detail

/// Runs one strategy on one seed's persisted stream. One record per
/// experience, each evaluated on the full test stream.
inline std::vector<ResultRecord> run_strategy(const ExperimentConfig& cfg, Strategy s,
                                              const SeedContext& ctx,
                                              const ExpertStream<float>& stream,
                                              std::size_t buffer_capacity) {
  using clock = std::chrono::steady_clock;
  const bool task_labels = cfg.scenario.kind == ScenarioKind::MT;
  std::vector<ResultRecord> out;

  if (is_synthesis(s) || s == Strategy::ReplayEd) {
    std::optional<Dataset<float>> aux;
    BufferSource<float> source;
    if (s == Strategy::ReplayEd) {
      std::vector<Dataset<float>> real;
      for (const auto& e : ctx.experiences) real.push_back(e.train);
      source = replay_source(std::move(real));
    } else {
      const GeneratorConfig g = generator_for(cfg, s);
      if (s == Strategy::AuxDataEd)
        aux = load_auxiliary<float>(*cfg.aux_dataset_path, ctx.data->train.sample_shape,
                                    ctx.data->norm, cfg.aux_pool_size, ctx.seed);
      source = generator_source<float>(g, aux ? &*aux : nullptr);
    }
    const auto res = run_exml<float>(
        stream, ctx.arch, source, buffer_capacity, cfg.distill, ctx.seed,
        [&](const Model<float>& m) { return detail::evaluate_model(m, ctx, task_labels); });
    for (const auto& h : res.history)
      out.push_back(detail::make_record(cfg, s, ctx.seed, h.experience_index, h.eval,
                                        h.wall_time_seconds));
    return out;
  }

  if (s == Strategy::ParamAvg) {
    ParamAverager<float> avg;
    for (std::size_t i = 0; i < stream.size(); ++i) {
      const auto start = clock::now();
      avg.add(stream.load(i));
      const Model<float> m = avg.mean();
      const auto ev = detail::evaluate_model(m, ctx, task_labels);
      const double t = std::chrono::duration<double>(clock::now() - start).count();
      out.push_back(detail::make_record(cfg, s, ctx.seed, i, ev, t));
    }
    return out;
  }

  EnsembleModel<float> ens;
  for (std::size_t i = 0; i < stream.size(); ++i) {
    const auto start = clock::now();
    ens.experts.push_back(stream.load(i));
    ens.class_sets.push_back(stream.steps[i].class_set);
    StreamEval ev;
    if (s == Strategy::Oracle) {
      ev = detail::evaluate_oracle(ens, ctx);
    } else {
      const EnsembleMode mode =
          s == Strategy::EnsembleAvg ? EnsembleMode::Average : EnsembleMode::MinEntropy;
      ev = evaluate_stream(ensemble_predictor(ens, mode), ctx.experiences);
    }
    const double t = std::chrono::duration<double>(clock::now() - start).count();
    out.push_back(detail::make_record(cfg, s, ctx.seed, i, ev, t));
  }
  return out;
}

struct RunOutput {
  std::string run_id;
  std::vector<ResultRecord> records;
  std::vector<SummaryCell> summary;
};

/// Runs every configured strategy on every seed's stream, appending to
/// results.csv and per_experience.csv and writing the summary.
inline RunOutput cmd_run(const ExperimentConfig& config, const CommandOptions& opt = {}) {
  const ExperimentConfig cfg = resolve(config, opt);
  auto& log = detail::log_of(opt);
  const auto data = load_dataset<float>(cfg.dataset);
  std::vector<SeedContext> contexts;
  std::vector<ExpertStream<float>> streams;
  for (auto seed : cfg.seeds) {
    contexts.push_back(seed_context(cfg, data, seed));
    streams.push_back(
        open_stream<float>(stream_dir(cfg, seed), contexts.back().arch.id(), contexts.back().experiences));
  }
  ResultsWriter writer(cfg.output_dir);
  RunOutput out;
  out.run_id = writer.run_id();
  for (Strategy s : cfg.strategies)
    for (std::size_t k = 0; k < cfg.seeds.size(); ++k) {
      auto records = run_strategy(cfg, s, contexts[k], streams[k], cfg.buffer_capacity);
      for (auto& r : records) {
        writer.append(r);
        out.records.push_back(r);
      }
      char acc[32];
      std::snprintf(acc, sizeof acc, "%.4f", records.back().stream_accuracy);
      log << out.run_id << " " << to_string(s) << " seed " << cfg.seeds[k]
          << ": stream accuracy " << acc << "\n";
    }
  out.summary = summarize(out.records);
  write_summary(cfg.output_dir, out.run_id, out.summary);
  for (const auto& c : out.summary)
    log << c.strategy << " / " << c.scenario << ": " << format_cell(c.stat) << "\n";
  return out;
}

struct AblationRow {
  std::string run_id;
  std::string strategy;
  std::uint64_t seed = 0;
  std::size_t buffer_size = 0;
  double stream_accuracy = 0;
  double wall_time_seconds = 0;
};

struct AblationOutput {
  std::string run_id;
  std::vector<AblationRow> rows;
  std::vector<PlotSeries> series;
};

/// Final stream accuracy for every (strategy, buffer size, seed), written to
/// ablation.csv with a summary CSV and a log-x SVG plot.
inline AblationOutput cmd_ablate_buffer(const ExperimentConfig& config,
                                        const CommandOptions& opt = {}) {
  const ExperimentConfig cfg = resolve(config, opt);
  auto& log = detail::log_of(opt);
  const auto data = load_dataset<float>(cfg.dataset);
  if (cfg.ablation_sizes.empty()) throw ConfigError("ablation.sizes is empty");
  if (cfg.ablation_strategies.empty()) throw ConfigError("ablation.strategy is empty");
  for (auto n : cfg.ablation_sizes)
    if (n < data.train.num_classes)
      throw ConfigError("buffer size " + std::to_string(n) + " is below the " +
                        std::to_string(data.train.num_classes) +
                        "-class minimum of one sample per class");
  std::vector<SeedContext> contexts;
  std::vector<ExpertStream<float>> streams;
  for (auto seed : cfg.seeds) {
    contexts.push_back(seed_context(cfg, data, seed));
    streams.push_back(
        open_stream<float>(stream_dir(cfg, seed), contexts.back().arch.id(), contexts.back().experiences));
  }
  fs::create_directories(cfg.output_dir);
  const fs::path csv_path = cfg.output_dir / "ablation.csv";
  const std::string header =
      "run_id,strategy,scenario,seed,buffer_size,stream_accuracy,wall_time_seconds,exml_compliant";
  std::string run_id = "run-0001";
  if (fs::exists(csv_path)) {
    int last = 0;
    std::ifstream in(csv_path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line))
      if (line.rfind("run-", 0) == 0) last = std::max(last, std::stoi(line.substr(4, line.find(',') - 4)));
    char buf[32];
    std::snprintf(buf, sizeof buf, "run-%04d", last + 1);
    run_id = buf;
  }
  auto csv = detail::open_append(csv_path, header);
  AblationOutput out;
  out.run_id = run_id;
  for (Strategy s : cfg.ablation_strategies) {
    PlotSeries series{to_string(s), {}, {}, {}};
    for (auto n : cfg.ablation_sizes) {
      std::vector<double> accs;
      for (std::size_t k = 0; k < cfg.seeds.size(); ++k) {
        const auto start = std::chrono::steady_clock::now();
        const auto records = run_strategy(cfg, s, contexts[k], streams[k], n);
        const double t =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        AblationRow row{run_id, to_string(s), cfg.seeds[k], n, records.back().stream_accuracy, t};
        csv << run_id << ',' << row.strategy << ',' << cfg.name << ',' << row.seed << ',' << n
            << ',' << detail::format_double(row.stream_accuracy) << ','
            << detail::format_double(t) << ',' << (exml_compliant(s) ? "true" : "false") << "\n";
        csv.flush();
        accs.push_back(row.stream_accuracy);
        out.rows.push_back(row);
        char acc[32];
        std::snprintf(acc, sizeof acc, "%.4f", row.stream_accuracy);
        log << run_id << " " << row.strategy << " buffer " << n << " seed " << row.seed
            << ": stream accuracy " << acc << "\n";
      }
      const auto m = mean_std(accs);
      series.x.push_back(static_cast<double>(n));
      series.mean.push_back(m.mean);
      series.std.push_back(m.std);
    }
    out.series.push_back(std::move(series));
  }
  {
    std::ofstream sum(cfg.output_dir / "ablation_summary.csv");
    sum << "strategy,scenario,buffer_size,n_seeds,mean,std\n";
    for (const auto& sr : out.series)
      for (std::size_t i = 0; i < sr.x.size(); ++i)
        sum << sr.label << ',' << cfg.name << ',' << static_cast<std::size_t>(sr.x[i]) << ','
            << cfg.seeds.size() << ',' << detail::format_double(sr.mean[i]) << ','
            << detail::format_double(sr.std[i]) << "\n";
    if (!sum) throw IoError("failed writing ablation_summary.csv");
  }
  std::vector<double> ticks(cfg.ablation_sizes.begin(), cfg.ablation_sizes.end());
  std::ofstream svg(cfg.output_dir / "ablation.svg");
  svg << log_x_svg(out.series, ticks, cfg.name + ": stream accuracy vs buffer size",
                   "buffer size", "stream accuracy");
  if (!svg) throw IoError("failed writing ablation.svg");
  return out;
}

struct DumpOutput {
  fs::path file;
  bool image = false;
};

/// Generates the first `dump.per_class` samples per class of one experience
/// and writes them as a PGM grid (one row per class), or as CSV for vector
/// data. One file per seed.
inline std::vector<DumpOutput> cmd_dump_buffer(const ExperimentConfig& config,
                                               const CommandOptions& opt = {}) {
  const ExperimentConfig cfg = resolve(config, opt);
  auto& log = detail::log_of(opt);
  const auto it = std::find_if(cfg.strategies.begin(), cfg.strategies.end(), is_synthesis);
  if (it == cfg.strategies.end())
    throw ConfigError(
        "dump-buffer needs a generator strategy (model_inversion_ed, data_impression_ed or "
        "aux_data_ed) in 'strategy'");
  const Strategy s = *it;
  const std::size_t i = opt.experience.value_or(cfg.dump_experience);
  const std::size_t k = cfg.dump_per_class;
  const auto data = load_dataset<float>(cfg.dataset);
  const GeneratorConfig g = generator_for(cfg, s);
  const Shape& shape = data.train.sample_shape;
  const bool image = shape.size() == 3 && shape[0] == 1;
  std::vector<DumpOutput> out;
  for (auto seed : cfg.seeds) {
    const auto ctx = seed_context(cfg, data, seed);
    if (i >= ctx.experiences.size())
      throw ConfigError("experience " + std::to_string(i) + " is out of range; the stream has " +
                        std::to_string(ctx.experiences.size()));
    const auto stream = open_stream<float>(stream_dir(cfg, seed), ctx.arch.id(), ctx.experiences);
    const auto& classes = stream.steps[i].class_set;
    std::optional<Dataset<float>> aux;
    if (s == Strategy::AuxDataEd)
      aux = load_auxiliary<float>(*cfg.aux_dataset_path, shape, data.norm, cfg.aux_pool_size, seed);
    std::mt19937_64 rng(expert_seed(seed, i));
    const auto samples = generate(stream.load(i), std::span<const int>(classes),
                                  k * classes.size(), g, rng, aux ? &*aux : nullptr);
    std::map<int, std::vector<const Tensor<float>*>> by_class;
    for (const auto& smp : samples)
      if (by_class[smp.y].size() < k) by_class[smp.y].push_back(&smp.x);

    const fs::path dir = cfg.output_dir / "dump";
    fs::create_directories(dir);
    const std::string stem = cfg.name + "_" + to_string(s) + "_seed" + std::to_string(seed) +
                             "_exp" + std::to_string(i);
    DumpOutput d;
    d.image = image;
    if (image) {
      const std::size_t h = shape[1], w = shape[2], gap = 1;
      const std::size_t H = classes.size() * (h + gap) + gap, W = k * (w + gap) + gap;
      std::vector<unsigned char> px(H * W, 128);
      for (std::size_t r = 0; r < classes.size(); ++r) {
        const auto& row = by_class[classes[r]];
        for (std::size_t c = 0; c < row.size(); ++c)
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
              const double v = std::clamp(data.norm.invert((*row[c])[y * w + x], y * w + x), 0.0, 1.0);
              px[(gap + r * (h + gap) + y) * W + gap + c * (w + gap) + x] =
                  static_cast<unsigned char>(std::lround(v * 255.0));
            }
      }
      d.file = dir / (stem + ".pgm");
      std::ofstream f(d.file, std::ios::binary);
      f << "P5\n" << W << " " << H << "\n255\n";
      f.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
      if (!f) throw IoError("failed writing " + d.file.string());
    } else {
      log << "dump-buffer: samples of shape " << shape_str(shape)
          << " are not images; writing numeric CSV instead of an image grid\n";
      d.file = dir / (stem + ".csv");
      std::ofstream f(d.file);
      f << "class,slot";
      for (std::size_t j = 0; j < numel(shape); ++j) f << ",x" << j;
      f << "\n";
      for (int c : classes) {
        const auto& row = by_class[c];
        for (std::size_t slot = 0; slot < row.size(); ++slot) {
          f << c << ',' << slot;
          for (std::size_t j = 0; j < row[slot]->size(); ++j)
            f << ',' << detail::format_double(data.norm.invert((*row[slot])[j], j));
          f << "\n";
        }
      }
      if (!f) throw IoError("failed writing " + d.file.string());
    }
    log << "dump-buffer " << to_string(s) << " seed " << seed << " experience " << i << " -> "
        << d.file.string() << "\n";
    out.push_back(d);
  }
  return out;
}

}  // namespace exml::harness
