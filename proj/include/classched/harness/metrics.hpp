// Copyright (c) 2026 The classched Authors
// SPDX-License-Identifier: Apache-2.0
//
// Metrics stream. File layout:
//
//   #classched-metrics v1
//   kind=<name> <field>=<value> ... step=<n>
//
// One event per line, every key (including kind and step) in byte-wise sorted order,
// floats printed with 17 significant digits so a re-parse is bit-exact.

#pragma once

#include <cerrno>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace classched::harness {

inline constexpr const char* kMetricsHeader = "#classched-metrics v1";

struct MetricsEvent {
  std::uint64_t step = 0;
  std::string kind;
  std::map<std::string, double> fields;

  bool operator==(const MetricsEvent& o) const {
    if (step != o.step || kind != o.kind || fields.size() != o.fields.size()) return false;
    for (auto a = fields.begin(), b = o.fields.begin(); a != fields.end(); ++a, ++b) {
      // bitwise, so NaN payloads compare equal to themselves
      if (a->first != b->first || std::memcmp(&a->second, &b->second, sizeof(double)) != 0) return false;
    }
    return true;
  }
};

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_event(const MetricsEvent& e) {
  for (const auto& [k, _] : e.fields) {
    if (k.empty() || k == "kind" || k == "step" || k.find_first_of("= \t\n") != std::string::npos) {
      throw std::invalid_argument("metrics: invalid field name '" + k + "'");
    }
  }
  if (e.kind.empty() || e.kind.find_first_of("= \t\n") != std::string::npos) {
    throw std::invalid_argument("metrics: invalid event kind '" + e.kind + "'");
  }
  std::map<std::string, std::string> all;
  for (const auto& [k, v] : e.fields) all[k] = format_double(v);
  all["kind"] = e.kind;
  all["step"] = std::to_string(e.step);
  std::string line;
  for (const auto& [k, v] : all) {
    if (!line.empty()) line += ' ';
    line += k + '=' + v;
  }
  return line;
}

inline MetricsEvent parse_event(const std::string& line) {
  MetricsEvent e;
  bool have_kind = false, have_step = false;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos || eq == 0) throw std::runtime_error("metrics: malformed token '" + tok + "'");
    const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    if (key == "kind") {
      e.kind = val;
      have_kind = true;
    } else if (key == "step") {
      e.step = std::stoull(val);
      have_step = true;
    } else {
      errno = 0;
      char* end = nullptr;
      const double v = std::strtod(val.c_str(), &end);
      if (end == val.c_str() || *end != '\0') throw std::runtime_error("metrics: bad value in '" + tok + "'");
      e.fields[key] = v;
    }
  }
  if (!have_kind || !have_step) throw std::runtime_error("metrics: event without kind/step: '" + line + "'");
  return e;
}

inline std::vector<MetricsEvent> parse_metrics(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw std::runtime_error("metrics: missing header line");
  std::vector<MetricsEvent> out;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(parse_event(line));
  }
  return out;
}

inline std::vector<MetricsEvent> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("metrics: cannot open " + path.string());
  return parse_metrics(in);
}

/// Appends events to a file and/or an in-memory capture. Writes are buffered and reach
/// the file on flush() (called by the trainer at period boundaries) or close().
class MetricsSink {
 public:
  MetricsSink() = default;

  explicit MetricsSink(const std::filesystem::path& path) : path_(path) {
    file_.open(path, std::ios::trunc);
    if (!file_) throw std::runtime_error("metrics: cannot write " + path.string());
    file_ << kMetricsHeader << '\n';
    file_.flush();
    if (!file_) throw std::runtime_error("metrics: cannot write " + path.string());
  }

  MetricsSink(const MetricsSink&) = delete;
  MetricsSink& operator=(const MetricsSink&) = delete;
  ~MetricsSink() {
    try {
      close();
    } catch (...) {
    }
  }

  void capture_to(std::vector<MetricsEvent>* events) { capture_ = events; }

  void emit(const MetricsEvent& e) {
    if (e.step < last_step_) throw std::logic_error("metrics: step index went backwards");
    last_step_ = e.step;
    if (capture_) capture_->push_back(e);
    if (file_.is_open()) {
      pending_ += format_event(e);
      pending_ += '\n';
    }
    ++emitted_;
  }

  void flush() {
    if (!file_.is_open()) return;
    file_ << pending_;
    file_.flush();
    pending_.clear();
    if (!file_) throw std::runtime_error("metrics: write failed for " + path_.string());
  }

  void close() {
    if (!file_.is_open()) return;
    flush();
    file_.close();
  }

  std::uint64_t emitted() const { return emitted_; }

 private:
  std::filesystem::path path_;
  std::ofstream file_;
  std::string pending_;
  std::vector<MetricsEvent>* capture_ = nullptr;
  std::uint64_t last_step_ = 0;
  std::uint64_t emitted_ = 0;
};

}  // namespace classched::harness
