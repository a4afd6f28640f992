// Copyright (c) 2026 The classched Authors
// SPDX-License-Identifier: Apache-2.0
//
// classched train | suite | eval | dump-state

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "classched/classched.hpp"

namespace h = classched::harness;
namespace fs = std::filesystem;

namespace {

int cmd_train(const std::string& config, std::optional<std::uint64_t> seed, fs::path out, const fs::path& resume,
              std::size_t checkpoint_every) {
  auto cfg = h::load_config(config);
  if (seed) cfg.seed = *seed;
  cfg.validate();
  if (out.empty()) out = fs::path("runs") / (cfg.scheduler + "-seed" + std::to_string(cfg.seed));
  const auto rep = h::run_training(cfg, out, resume, checkpoint_every);
  std::cout << h::report_json(rep).dump(2) << '\n';
  std::cerr << "run written to " << out.string() << '\n';
  return 0;
}

int cmd_suite(const std::string& config, const std::string& seeds, const std::string& schedulers, const fs::path& out,
              unsigned threads) {
  const auto cfg = h::load_config(config);
  const auto res = h::run_baseline_suite(cfg, h::detail::parse_list<std::uint64_t>(seeds, "--seeds"),
                                         h::detail::parse_list<std::string>(schedulers, "--schedulers"),
                                         {.out_dir = out, .threads = threads});
  std::cout << h::suite_table(res);
  std::size_t failed = 0;
  for (const auto& r : res.rows) {
    if (!r.ok) {
      ++failed;
      std::cerr << "run " << r.scheduler << " seed " << r.seed << " failed: " << r.error << '\n';
    }
  }
  return failed ? 1 : 0;
}

std::unique_ptr<h::Trainer> load_trainer(const std::string& config, const fs::path& checkpoint, h::MetricsSink& sink) {
  auto cfg = h::load_config(config);
  const auto [sched, seed] = h::Trainer::checkpoint_identity(checkpoint);
  cfg.scheduler = sched;
  cfg.seed = seed;
  return h::Trainer::resume(cfg, sink, checkpoint);
}

int cmd_eval(const std::string& config, const fs::path& checkpoint) {
  h::MetricsSink sink;
  auto t = load_trainer(config, checkpoint, sink);
  std::cout << h::report_json(t->finish()).dump(2) << '\n';
  return 0;
}

int cmd_dump_state(const fs::path& run) {
  h::MetricsSink sink;
  auto t = load_trainer((run / "config.ini").string(), run / "checkpoint", sink);
  const auto& corpus = t->pretrain_corpus();
  const std::size_t cn = t->config().env.classes;
  std::string line;
  for (std::size_t c = 0; c < cn; ++c) {
    for (const char* f : classched::kStatFieldNames) {
      line += (line.empty() ? "" : ",") + std::string(f) + "." + std::to_string(c);
    }
  }
  std::cout << line << '\n';
  for (const auto& s : corpus) {
    line.clear();
    for (double v : s.values) line += (line.empty() ? "" : ",") + h::format_double(v);
    std::cout << line << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"classched: class-scheduled cross-domain mixing on a toy segmentation world"};
  app.require_subcommand(1);

  std::string config, seeds, schedulers;
  fs::path out, resume, checkpoint, run;
  std::optional<std::uint64_t> seed;
  std::size_t checkpoint_every = 0;
  unsigned threads = 1;

  auto* train = app.add_subcommand("train", "Run one training configuration");
  train->add_option("--config", config, "INI config file")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "Override run.seed");
  train->add_option("--out", out, "Run directory (default runs/<scheduler>-seed<N>)");
  train->add_option("--resume", resume, "Checkpoint base path to continue from");
  train->add_option("--checkpoint-every", checkpoint_every, "Rewrite the checkpoint every N steps");

  auto* suite = app.add_subcommand("suite", "Compare schedulers over several seeds");
  suite->add_option("--config", config, "INI config file")->required()->check(CLI::ExistingFile);
  suite->add_option("--seeds", seeds, "Comma-separated seeds (at least 5)")->required();
  suite->add_option("--schedulers", schedulers, "Comma-separated scheduler names")->required();
  suite->add_option("--out", out, "Output directory for suite.tsv, summary.json and run dirs");
  suite->add_option("--threads", threads, "Concurrent runs")->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on held-out scenes");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint base path (without .manifest/.bin)")->required();
  eval->add_option("--config", config, "INI config file the run used")->required()->check(CLI::ExistingFile);

  auto* dump = app.add_subcommand("dump-state", "Print a run's encoder pretraining states as CSV");
  dump->add_option("--run", run, "Run directory")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(config, seed, out, resume, checkpoint_every);
    if (*suite) return cmd_suite(config, seeds, schedulers, out, threads);
    if (*eval) return cmd_eval(config, checkpoint);
    if (*dump) return cmd_dump_state(run);
  } catch (const h::RunError& e) {
    std::cerr << "classched: run failed at " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "classched: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
