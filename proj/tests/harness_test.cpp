// Copyright (c) 2026 The classched Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "classched/harness/config.hpp"
#include "classched/harness/metrics.hpp"
#include "classched/harness/suite.hpp"
#include "classched/harness/trainer.hpp"

namespace cs = classched;
namespace h = classched::harness;
namespace fs = std::filesystem;

namespace {

h::RunConfig tiny(const std::string& scheduler = "heuscm", std::uint64_t seed = 3) {
  h::RunConfig c;
  c.seed = seed;
  c.scheduler = scheduler;
  c.steps = 40;
  c.warmup = 12;
  c.agent_period = 4;
  c.agent_iters = 2;
  c.agent_batch = 6;
  c.scenes_per_step = 2;
  c.eval_scenes = 6;
  c.flush_period = 7;
  c.env.classes = 4;
  c.env.height = 8;
  c.env.width = 8;
  c.skfen = {.channels = 4, .expanded = 8, .groups = 2, .height = 2, .width = 2};
  c.gmvae_hidden = 8;
  c.gmvae_components = 2;
  c.pretrain_steps = 10;
  c.pretrain_batch = 8;
  return c;
}

std::vector<h::MetricsEvent> run_events(const h::RunConfig& cfg) {
  std::vector<h::MetricsEvent> ev;
  h::MetricsSink sink;
  sink.capture_to(&ev);
  h::Trainer t(cfg, sink);
  t.run();
  t.finish();
  return ev;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("classched_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Config, DefaultsRoundTripThroughText) {
  const h::RunConfig a = tiny();
  std::istringstream in(h::format_config(a));
  const auto b = h::parse_config(in);
  EXPECT_EQ(h::format_config(a), h::format_config(b));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  auto parse = [](const std::string& text) {
    std::istringstream in(text);
    return h::parse_config(in);
  };
  EXPECT_NO_THROW(parse("[run]\nseed = 4\n"));
  EXPECT_THROW(parse("[run]\nsede = 4\n"), std::invalid_argument);
  EXPECT_THROW(parse("[run]\nscheduler = greedy\n"), std::invalid_argument);
  EXPECT_THROW(parse("[agent]\ngamma = 1.0\n"), std::invalid_argument);
  EXPECT_THROW(parse("[run]\nsteps = 5\nwarmup = 9\n"), std::invalid_argument);
  EXPECT_THROW(parse("[run]\nscheduler = fixed_order\nfixed_order = 0,1,1,2,3,4,5,6\n"), std::invalid_argument);
  EXPECT_THROW(parse("[run]\nwarmup = 0\n"), std::invalid_argument);
  EXPECT_NO_THROW(parse("[run]\nwarmup = 0\nscheduler = random\n"));
}

TEST(Config, EnvSeedFollowsRunSeedUnlessSet) {
  std::istringstream a("[run]\nseed = 11\n");
  EXPECT_EQ(h::parse_config(a).env_config().seed, 11u);
  std::istringstream b("[run]\nseed = 11\n[env]\nseed = 2\n");
  EXPECT_EQ(h::parse_config(b).env_config().seed, 2u);
}

TEST(Metrics, EventRoundTripIsBitExact) {
  h::MetricsEvent e{17, "reward", {{"r.0", 0.1 + 0.2}, {"r.1", -1e-300}, {"x", 1.0 / 3.0}}};
  const auto line = h::format_event(e);
  EXPECT_EQ(line.rfind("kind=reward", 0), 0u) << line;
  EXPECT_EQ(h::parse_event(line), e);
  EXPECT_THROW(h::format_event({0, "bad kind", {}}), std::invalid_argument);
  EXPECT_THROW(h::parse_event("kind=x"), std::runtime_error);
}

TEST(Metrics, ZeroStepRunLeavesHeaderOnly) {
  const auto dir = scratch("empty");
  { h::MetricsSink sink(dir / "m.txt"); }
  std::ifstream in(dir / "m.txt");
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_EQ(ss.str(), std::string(h::kMetricsHeader) + "\n");
  EXPECT_TRUE(h::read_metrics(dir / "m.txt").empty());
  fs::remove_all(dir);
}

TEST(Metrics, StepMayNotDecrease) {
  h::MetricsSink sink;
  sink.emit({3, "a", {}});
  EXPECT_THROW(sink.emit({2, "a", {}}), std::logic_error);
}

TEST(Trainer, RunsAreDeterministic) {
  const auto a = run_events(tiny());
  const auto b = run_events(tiny());
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]) << i;
  const auto c = run_events(tiny("heuscm", 4));
  EXPECT_NE(a.back(), c.back());
}

TEST(Trainer, StageOrderPerStep) {
  const auto cfg = tiny();
  const auto ev = run_events(cfg);
  const std::vector<std::string> warm{"state", "rank", "mix", "seg_update", "reward", "record"};
  const std::vector<std::string> act{"state", "encode", "distill", "rank", "mix", "seg_update", "reward", "record"};
  std::map<std::uint64_t, std::vector<std::string>> by_step;
  std::size_t pretrains = 0, updates = 0;
  for (const auto& e : ev) {
    if (e.kind == "pretrain") ++pretrains;
    if (e.kind == "agent_update") ++updates;
    if (e.kind == "setup" || e.kind == "eval" || e.kind == "pretrain" || e.kind == "agent_update") continue;
    by_step[e.step].push_back(e.kind);
  }
  ASSERT_EQ(by_step.size(), cfg.steps);
  for (const auto& [t, kinds] : by_step) EXPECT_EQ(kinds, t < cfg.warmup ? warm : act) << "step " << t;
  EXPECT_EQ(pretrains, 1u);
  EXPECT_GT(updates, 0u);
  EXPECT_EQ(ev.front().kind, "setup");
  EXPECT_EQ(ev.back().kind, "eval");
}

TEST(Trainer, BaselinesLeaveAgentUntouched) {
  for (const char* s : {"random", "easy_to_hard", "hard_only", "fixed_order"}) {
    h::MetricsSink sink;
    h::Trainer t(tiny(s), sink);
    const auto before = t.agent_fingerprint();
    t.run();
    EXPECT_EQ(t.agent_fingerprint(), before) << s;
    EXPECT_EQ(t.replay().transitions.size(), 0u) << s;
    EXPECT_EQ(t.agent_updates(), 0u) << s;
  }
  h::MetricsSink sink;
  h::Trainer t(tiny(), sink);
  const auto before = t.agent_fingerprint();
  t.run();
  EXPECT_NE(t.agent_fingerprint(), before);
}

TEST(Trainer, WarmupOnlyRunSkipsPretraining) {
  auto cfg = tiny();
  cfg.steps = cfg.warmup;
  const auto ev = run_events(cfg);
  for (const auto& e : ev) {
    EXPECT_NE(e.kind, "pretrain");
    EXPECT_NE(e.kind, "agent_update");
    EXPECT_NE(e.kind, "encode");
  }
  EXPECT_EQ(ev.back().kind, "eval");
}

TEST(Trainer, FixedOrderPastesSameLowHalf) {
  auto cfg = tiny("fixed_order");
  cfg.fixed_order = {3, 1, 0, 2};
  cfg.env.frequency_weights = {1, 1, 1, 1};
  for (const auto& e : run_events(cfg)) {
    if (e.kind == "rank") {
      EXPECT_EQ(e.fields.at("rank.0"), 3.0);
      EXPECT_EQ(e.fields.at("rank.3"), 2.0);
    }
  }
}

TEST(Trainer, EasyToHardSortsByAccuracyField) {
  std::vector<h::MetricsEvent> ev = run_events(tiny("easy_to_hard"));
  const h::MetricsEvent* state = nullptr;
  for (const auto& e : ev) {
    if (e.kind == "state") state = &e;
    if (e.kind != "rank") continue;
    ASSERT_NE(state, nullptr);
    for (int i = 0; i + 1 < 4; ++i) {
      const int a = int(e.fields.at("rank." + std::to_string(i)));
      const int b = int(e.fields.at("rank." + std::to_string(i + 1)));
      const double fa = state->fields.at("acc." + std::to_string(a)), fb = state->fields.at("acc." + std::to_string(b));
      EXPECT_TRUE(fa > fb || (fa == fb && a < b)) << "step " << e.step;
    }
  }
}

TEST(Trainer, ResumeReproducesUninterruptedRun) {
  const auto cfg = tiny();
  const auto full = run_events(cfg);
  const auto dir = scratch("resume");
  {
    h::MetricsSink sink;
    h::Trainer t(cfg, sink);
    t.advance(20);
    t.save_checkpoint(dir / "ck");
  }
  std::vector<h::MetricsEvent> tail;
  h::MetricsSink sink;
  sink.capture_to(&tail);
  auto t = h::Trainer::resume(cfg, sink, dir / "ck");
  EXPECT_EQ(t->step(), 20u);
  t->run();
  t->finish();
  std::vector<h::MetricsEvent> ref;
  for (const auto& e : full) {
    if (e.step >= 20 && e.kind != "setup") ref.push_back(e);
  }
  ASSERT_EQ(tail.size(), ref.size());
  ASSERT_GE(tail.size(), 50u);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_EQ(tail[i], ref[i]) << i;
  fs::remove_all(dir);
}

TEST(Trainer, ResumeRejectsMismatchAndTruncation) {
  const auto cfg = tiny();
  const auto dir = scratch("trunc");
  {
    h::MetricsSink sink;
    h::Trainer t(cfg, sink);
    t.advance(15);
    t.save_checkpoint(dir / "ck");
  }
  h::MetricsSink sink;
  EXPECT_THROW(h::Trainer::resume(tiny("heuscm", 9), sink, dir / "ck"), std::runtime_error);
  EXPECT_THROW(h::Trainer::resume(tiny("random"), sink, dir / "ck"), std::runtime_error);
  fs::resize_file(dir / "ck.bin", fs::file_size(dir / "ck.bin") - 8);
  EXPECT_THROW(h::Trainer::resume(cfg, sink, dir / "ck"), std::runtime_error);
  fs::remove_all(dir);
}

TEST(Trainer, StageFailureNamesStepAndStage) {
  auto cfg = tiny("random");
  h::MetricsSink sink;
  h::Trainer t(cfg, sink);
  t.advance(2);
  // Force a bad reward coefficient after validation to trip the reward stage.
  const_cast<h::RunConfig&>(t.config()).reward_lambda = -1.0;
  try {
    t.advance(1);
    FAIL();
  } catch (const h::RunError& e) {
    EXPECT_EQ(e.step(), 2u);
    EXPECT_EQ(e.stage(), "reward");
  }
}

TEST(Trainer, RunTrainingWritesArtifacts) {
  const auto dir = scratch("artifacts");
  const auto rep = h::run_training(tiny(), dir);
  for (const char* f : {"config.ini", "metrics.txt", "checkpoint.manifest", "checkpoint.bin", "report.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const auto ev = h::read_metrics(dir / "metrics.txt");
  EXPECT_EQ(ev.back().kind, "eval");
  EXPECT_EQ(ev.back().fields.at("mean_accuracy"), rep.eval.mean_accuracy);
  fs::remove_all(dir);
}

TEST(Suite, AggregatesAreMeansOfRows) {
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  const auto res = h::run_baseline_suite(tiny(), seeds, {"random"});
  ASSERT_EQ(res.rows.size(), 5u);
  double acc = 0.0, sd = 0.0;
  for (auto s : seeds) {
    h::MetricsSink sink;
    auto cfg = tiny("random", s);
    h::Trainer t(cfg, sink);
    t.run();
    const auto rep = t.finish();
    EXPECT_EQ(res.row("random", s).report.eval.mean_accuracy, rep.eval.mean_accuracy);
    acc += rep.eval.mean_accuracy / 5.0;
    sd += rep.eval.accuracy_std / 5.0;
  }
  const auto& a = res.aggregate("random");
  EXPECT_EQ(a.completed, 5u);
  EXPECT_NEAR(a.mean_accuracy, acc, 1e-15);
  EXPECT_NEAR(a.mean_std, sd, 1e-15);
  EXPECT_EQ(a.std_wins, 5u);
}

TEST(Suite, RepeatedSuitesMatchAndFailuresAreKept) {
  auto base = tiny();
  base.fixed_order = {0, 0, 1, 2};  // only the fixed_order runs reject this
  const std::vector<std::uint64_t> seeds{7, 8, 9, 10, 11};
  const auto dir = scratch("suite");
  const auto a = h::run_baseline_suite(base, seeds, {"random", "hard_only", "fixed_order"}, {.out_dir = dir, .threads = 2});
  const auto b = h::run_baseline_suite(base, seeds, {"random", "hard_only", "fixed_order"});
  for (const auto& r : a.rows) EXPECT_EQ(r.report.eval.accuracy_std, b.row(r.scheduler, r.seed).report.eval.accuracy_std);
  const auto& f = a.aggregate("fixed_order");
  EXPECT_EQ(f.completed, 0u);
  EXPECT_EQ(f.failed, 5u);
  EXPECT_NE(a.row("fixed_order", 7).error.find("fixed_order"), std::string::npos);
  std::size_t wins = 0;
  for (const auto& g : a.aggregates) wins += g.std_wins;
  EXPECT_GE(wins, 5u);
  EXPECT_EQ(a.beats.at("random").at("hard_only") + a.beats.at("hard_only").at("random") <= 5, true);
  EXPECT_TRUE(fs::exists(dir / "suite.tsv"));
  EXPECT_TRUE(fs::exists(dir / "summary.json"));
  EXPECT_TRUE(fs::exists(dir / "random" / "seed-7" / "metrics.txt"));
  fs::remove_all(dir);
}

TEST(Suite, RejectsTooFewSeedsAndUnknownSchedulers) {
  EXPECT_THROW(h::run_baseline_suite(tiny(), {1, 2, 3, 4}, {"random"}), std::invalid_argument);
  EXPECT_THROW(h::run_baseline_suite(tiny(), {1, 2, 3, 4, 5}, {"greedy"}), std::invalid_argument);
  EXPECT_THROW(h::run_baseline_suite(tiny(), {1, 2, 3, 4, 4}, {"random"}), std::invalid_argument);
}
