// SPDX-License-Identifier: Apache-2.0
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "exml/harness/commands.hpp"

namespace {

struct CommonArgs {
  std::string config;
  std::string seed_filter;
  std::string output_dir;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "Experiment config file (key = value lines)")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed-filter", a.seed_filter,
                  "Comma-separated subset of the configured seeds to process");
  cmd->add_option("--output-dir", a.output_dir, "Overrides output_dir from the config");
}

exml::harness::CommandOptions options_of(const CommonArgs& a) {
  exml::harness::CommandOptions o;
  if (!a.seed_filter.empty()) o.seed_filter = exml::harness::detail::parse_seed_list(a.seed_filter);
  if (!a.output_dir.empty()) o.output_dir = a.output_dir;
  o.log = &std::cerr;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace exml::harness;
  CLI::App app{"Ex-model continual learning: distill a stream of trained experts"};
  app.require_subcommand(1);

  CommonArgs train_args, run_args, ablate_args, dump_args;
  auto* train = app.add_subcommand("train-stream", "Train and save one expert per experience");
  add_common(train, train_args);
  auto* run = app.add_subcommand("run", "Run the configured strategies on saved streams");
  add_common(run, run_args);
  auto* ablate = app.add_subcommand("ablate-buffer", "Sweep the buffer size");
  add_common(ablate, ablate_args);
  std::vector<std::size_t> sizes;
  ablate->add_option("--sizes", sizes, "Buffer sizes (overrides ablation.sizes)")->delimiter(',');
  auto* dump = app.add_subcommand("dump-buffer", "Write generated samples as an image grid");
  add_common(dump, dump_args);
  std::optional<std::size_t> experience;
  dump->add_option("--experience", experience, "Experience index (overrides dump.experience)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const auto dirs = cmd_train_stream(load_config(train_args.config), options_of(train_args));
      for (const auto& d : dirs) std::cout << d.string() << "\n";
    } else if (*run) {
      const auto cfg = load_config(run_args.config);
      const auto out = cmd_run(cfg, options_of(run_args));
      std::cout << out.run_id << "\n";
      for (const auto& c : out.summary)
        std::cout << c.strategy << "\t" << c.scenario << "\t" << format_cell(c.stat) << "\n";
    } else if (*ablate) {
      auto cfg = load_config(ablate_args.config);
      if (!sizes.empty()) cfg.ablation_sizes = sizes;
      const auto out = cmd_ablate_buffer(cfg, options_of(ablate_args));
      std::cout << out.run_id << "\n";
      for (const auto& s : out.series)
        for (std::size_t i = 0; i < s.x.size(); ++i)
          std::cout << s.label << "\t" << s.x[i] << "\t" << format_cell({0, s.mean[i], s.std[i]})
                    << "\n";
    } else if (*dump) {
      auto opt = options_of(dump_args);
      opt.experience = experience;
      for (const auto& d : cmd_dump_buffer(load_config(dump_args.config), opt))
        std::cout << d.file.string() << "\n";
    }
  } catch (const exml::ConfigError& e) {
    std::cerr << "exml: configuration error: " << e.what() << "\n";
    return 2;
  } catch (const exml::Error& e) {
    std::cerr << "exml: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "exml: unexpected error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
