// Copyright (c) 2026 The classched Authors
// SPDX-License-Identifier: Apache-2.0
//
// Multi-seed comparison of schedulers. One run per (scheduler, seed); failed runs are
// recorded with their error and left out of the aggregates.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "classched/harness/trainer.hpp"

namespace classched::harness {

struct SuiteRow {
  std::string scheduler;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  RunReport report;
};

struct SuiteAggregate {
  std::string scheduler;
  std::size_t completed = 0;
  std::size_t failed = 0;
  double mean_accuracy = 0.0;  // mean over seeds of the per-run mean accuracy
  double mean_std = 0.0;       // mean over seeds of the across-class accuracy std
  std::size_t std_wins = 0;    // seeds where this scheduler had the lowest std (ties count for each)
};

struct SuiteResult {
  std::vector<SuiteRow> rows;  // scheduler-major, seeds in the given order
  std::vector<SuiteAggregate> aggregates;
  // beats[a][b]: seeds where a had strictly lower std than b, both runs complete
  std::map<std::string, std::map<std::string, std::size_t>> beats;

  const SuiteRow& row(const std::string& scheduler, std::uint64_t seed) const {
    for (const auto& r : rows) {
      if (r.scheduler == scheduler && r.seed == seed) return r;
    }
    throw std::out_of_range("suite: no row for " + scheduler + ", seed " + std::to_string(seed));
  }
  const SuiteAggregate& aggregate(const std::string& scheduler) const {
    for (const auto& a : aggregates) {
      if (a.scheduler == scheduler) return a;
    }
    throw std::out_of_range("suite: no aggregate for " + scheduler);
  }
};

struct SuiteOptions {
  std::filesystem::path out_dir;  // empty: no files
  unsigned threads = 1;
  bool keep_run_dirs = true;      // per-run metrics/checkpoints under out_dir/<scheduler>/seed-<n>
};

inline void aggregate_suite(SuiteResult& res, const std::vector<std::string>& schedulers,
                            const std::vector<std::uint64_t>& seeds) {
  res.aggregates.clear();
  res.beats.clear();
  for (const auto& s : schedulers) {
    SuiteAggregate a;
    a.scheduler = s;
    for (auto seed : seeds) {
      const auto& r = res.row(s, seed);
      if (!r.ok) {
        ++a.failed;
        continue;
      }
      ++a.completed;
      a.mean_accuracy += r.report.eval.mean_accuracy;
      a.mean_std += r.report.eval.accuracy_std;
    }
    if (a.completed) {
      a.mean_accuracy /= double(a.completed);
      a.mean_std /= double(a.completed);
    }
    res.aggregates.push_back(a);
  }
  for (auto seed : seeds) {
    double best = INFINITY;
    for (const auto& s : schedulers) {
      const auto& r = res.row(s, seed);
      if (r.ok) best = std::min(best, r.report.eval.accuracy_std);
    }
    for (auto& a : res.aggregates) {
      const auto& r = res.row(a.scheduler, seed);
      if (r.ok && r.report.eval.accuracy_std == best) ++a.std_wins;
    }
    for (const auto& x : schedulers) {
      for (const auto& y : schedulers) {
        if (x == y) continue;
        const auto &rx = res.row(x, seed), &ry = res.row(y, seed);
        auto& n = res.beats[x][y];
        if (rx.ok && ry.ok && rx.report.eval.accuracy_std < ry.report.eval.accuracy_std) ++n;
      }
    }
  }
}

inline nlohmann::json suite_json(const SuiteResult& res) {
  nlohmann::json j;
  j["runs"] = nlohmann::json::array();
  for (const auto& r : res.rows) {
    nlohmann::json row{{"scheduler", r.scheduler}, {"seed", r.seed}, {"ok", r.ok}};
    if (r.ok) {
      row["report"] = report_json(r.report);
    } else {
      row["error"] = r.error;
    }
    j["runs"].push_back(row);
  }
  j["aggregates"] = nlohmann::json::array();
  for (const auto& a : res.aggregates) {
    j["aggregates"].push_back({{"scheduler", a.scheduler},
                               {"completed", a.completed},
                               {"failed", a.failed},
                               {"mean_accuracy", a.mean_accuracy},
                               {"mean_accuracy_std", a.mean_std},
                               {"std_wins", a.std_wins}});
  }
  j["beats"] = res.beats;
  return j;
}

inline std::string suite_table(const SuiteResult& res) {
  std::string out = "scheduler\tseed\tstatus\tmean_accuracy\taccuracy_std\twall_seconds\n";
  char buf[160];
  for (const auto& r : res.rows) {
    if (r.ok) {
      std::snprintf(buf, sizeof buf, "%s\t%llu\tok\t%.6f\t%.6f\t%.2f\n", r.scheduler.c_str(),
                    static_cast<unsigned long long>(r.seed), r.report.eval.mean_accuracy, r.report.eval.accuracy_std,
                    r.report.wall_seconds);
      out += buf;
    } else {
      out += r.scheduler + '\t' + std::to_string(r.seed) + "\tfailed\t-\t-\t-\n";
    }
  }
  out += "\nscheduler\tcompleted\tfailed\tmean_accuracy\tmean_accuracy_std\tstd_wins\n";
  for (const auto& a : res.aggregates) {
    std::snprintf(buf, sizeof buf, "%s\t%zu\t%zu\t%.6f\t%.6f\t%zu\n", a.scheduler.c_str(), a.completed, a.failed,
                  a.mean_accuracy, a.mean_std, a.std_wins);
    out += buf;
  }
  return out;
}

/// Runs every scheduler on every seed from `base` (only seed and scheduler are overridden).
inline SuiteResult run_baseline_suite(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                                      const std::vector<std::string>& schedulers, const SuiteOptions& opt = {}) {
  if (seeds.size() < 5) throw std::invalid_argument("suite: need at least 5 seeds");
  if (schedulers.empty()) throw std::invalid_argument("suite: need at least one scheduler");
  for (const auto& s : schedulers) Scheduler::parse(s);
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw std::invalid_argument("suite: duplicate seed");
  }
  if (std::set<std::string>(schedulers.begin(), schedulers.end()).size() != schedulers.size()) {
    throw std::invalid_argument("suite: duplicate scheduler");
  }

  SuiteResult res;
  for (const auto& s : schedulers) {
    for (auto seed : seeds) res.rows.push_back({s, seed, false, "not run", {}});
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < res.rows.size();) {
      auto& row = res.rows[i];
      RunConfig cfg = base;
      cfg.seed = row.seed;
      cfg.scheduler = row.scheduler;
      std::filesystem::path dir;
      if (!opt.out_dir.empty() && opt.keep_run_dirs) {
        dir = opt.out_dir / row.scheduler / ("seed-" + std::to_string(row.seed));
      }
      try {
        row.report = run_training(cfg, dir);
        row.ok = true;
        row.error.clear();
      } catch (const std::exception& e) {
        row.error = e.what();
      }
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(opt.threads, unsigned(res.rows.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  aggregate_suite(res, schedulers, seeds);

  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    std::ofstream(opt.out_dir / "suite.tsv") << suite_table(res);
    std::ofstream(opt.out_dir / "summary.json") << suite_json(res).dump(2) << '\n';
  }
  return res;
}

}  // namespace classched::harness
