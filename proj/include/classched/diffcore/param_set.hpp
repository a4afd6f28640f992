// Copyright (c) 2026 The classched Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "classched/diffcore/tensor.hpp"

namespace classched::diff {

/// Named collection of trainable leaves with a step counter.
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor>;

  Tensor& add(const std::string& path, Tensor init) {
    if (path.empty() || path.find_first_of("=\n") != std::string::npos) {
      throw std::invalid_argument("ParamSet: invalid parameter path '" + path + "'");
    }
    if (params_.count(path)) throw std::invalid_argument("ParamSet: duplicate parameter path '" + path + "'");
    Tensor leaf = init.clone_leaf();
    leaf.set_requires_grad(true);
    return params_.emplace(path, std::move(leaf)).first->second;
  }

  bool contains(const std::string& path) const { return params_.count(path) != 0; }

  const Tensor& at(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) throw std::out_of_range("ParamSet: no parameter '" + path + "'");
    return it->second;
  }
  Tensor& at(const std::string& path) {
    return const_cast<Tensor&>(std::as_const(*this).at(path));
  }

  std::size_t size() const { return params_.size(); }
  bool empty() const { return params_.empty(); }
  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }
  Map::iterator begin() { return params_.begin(); }
  Map::iterator end() { return params_.end(); }

  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }
  void advance_step() { ++step_; }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }
  void clear_grad() {
    for (auto& [_, t] : params_) t.clear_grad();
  }

  /// Deep copy with fresh leaves (no shared storage, no gradients).
  ParamSet clone() const {
    ParamSet out;
    for (const auto& [path, t] : params_) out.add(path, t.detach());
    out.step_ = step_;
    return out;
  }

  /// Square root of the summed squared gradient entries (absent grads count as zero).
  double grad_norm() const {
    double s = 0.0;
    for (const auto& [_, t] : params_) {
      for (double g : t.grad()) s += g * g;
    }
    return std::sqrt(s);
  }

  /// FNV-1a over the raw value bits, in path order.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](std::uint64_t v) {
      for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xffU;
        h *= 1099511628211ULL;
      }
    };
    for (const auto& [path, t] : params_) {
      for (char ch : path) mix(static_cast<unsigned char>(ch));
      for (double v : t.values()) mix(std::bit_cast<std::uint64_t>(v));
    }
    return h;
  }

 private:
  Map params_;
  std::uint64_t step_ = 0;
};

/// p ← p − lr·(grad + weight_decay·p); gradients cleared; step counter advanced.
inline void sgd_step(ParamSet& params, double learning_rate, double weight_decay) {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("sgd_step: learning rate must be positive");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("sgd_step: weight decay must be nonnegative");
  for (const auto& [path, t] : params) {
    if (!t.has_grad()) throw std::logic_error("sgd_step: missing gradient for parameter '" + path + "'");
  }
  for (auto& [_, t] : params) {
    auto v = t.mutable_values();
    const auto g = t.grad();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= learning_rate * (g[i] + weight_decay * v[i]);
    t.clear_grad();
  }
  params.advance_step();
}

// ---------------------------------------------------------------------------
// Tensor archives: "<base>.manifest" (text, path=shape per line, in payload
// order) plus "<base>.bin" (little-endian float64 values, concatenated).
// ---------------------------------------------------------------------------

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct Archive {
  std::map<std::string, std::string> header;  // "# key=value" lines
  NamedTensors tensors;

  const Tensor* find(const std::string& path) const {
    for (const auto& [p, t] : tensors) {
      if (p == path) return &t;
    }
    return nullptr;
  }
};

namespace detail {

inline Shape parse_shape(const std::string& text, const std::string& path) {
  Shape s;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(tok, &used);
      if (used != tok.size() || v == 0) throw std::invalid_argument(tok);
      s.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw std::runtime_error("archive: bad shape '" + text + "' for '" + path + "'");
    }
  }
  if (s.empty()) throw std::runtime_error("archive: empty shape for '" + path + "'");
  return s;
}

}  // namespace detail

inline void save_archive(const std::filesystem::path& base, const Archive& archive) {
  const std::filesystem::path manifest = base.string() + ".manifest";
  const std::filesystem::path payload = base.string() + ".bin";
  std::ofstream man(manifest, std::ios::trunc);
  std::ofstream bin(payload, std::ios::binary | std::ios::trunc);
  if (!man || !bin) throw std::runtime_error("archive: cannot write " + base.string());
  man << "#classched-archive v1\n";
  for (const auto& [k, v] : archive.header) man << "# " << k << '=' << v << '\n';
  for (const auto& [path, t] : archive.tensors) {
    man << path << '=';
    for (std::size_t i = 0; i < t.rank(); ++i) man << (i ? "," : "") << t.dim(i);
    man << '\n';
    for (double v : t.values()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      char bytes[8];
      for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffU);
      bin.write(bytes, 8);
    }
  }
  man.flush();
  bin.flush();
  if (!man || !bin) throw std::runtime_error("archive: write failed for " + base.string());
}

/// Reads a whole archive; nothing is returned unless manifest and payload agree exactly.
inline Archive load_archive(const std::filesystem::path& base) {
  const std::filesystem::path manifest = base.string() + ".manifest";
  const std::filesystem::path payload = base.string() + ".bin";
  std::ifstream man(manifest);
  if (!man) throw std::runtime_error("archive: cannot open " + manifest.string());
  std::ifstream bin(payload, std::ios::binary);
  if (!bin) throw std::runtime_error("archive: cannot open " + payload.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  Archive out;
  std::string line;
  std::size_t offset = 0;
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (line.rfind("# ", 0) == 0 && eq != std::string::npos) out.header[line.substr(2, eq - 2)] = line.substr(eq + 1);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("archive: malformed manifest line '" + line + "'");
    std::string path = line.substr(0, eq);
    Shape shape = detail::parse_shape(line.substr(eq + 1), path);
    const std::size_t n = shape_numel(shape);
    if (offset + 8 * n > bytes.size()) {
      throw std::runtime_error("archive: payload truncated at '" + path + "' (" + payload.string() + ")");
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + 8 * i + b])) << (8 * b);
      }
      values[i] = std::bit_cast<double>(bits);
    }
    offset += 8 * n;
    out.tensors.emplace_back(std::move(path), Tensor::from(std::move(shape), std::move(values)));
  }
  if (offset != bytes.size()) {
    throw std::runtime_error("archive: payload has " + std::to_string(bytes.size() - offset) +
                             " trailing bytes beyond the manifest (" + payload.string() + ")");
  }
  return out;
}

inline void append_params(Archive& archive, const std::string& prefix, const ParamSet& params) {
  archive.header[prefix + "step"] = std::to_string(params.step());
  for (const auto& [path, t] : params) archive.tensors.emplace_back(prefix + path, t);
}

/// Copies archived values into an existing ParamSet. Every path and shape must match;
/// the first divergent path is reported and `params` is left untouched on failure.
inline void restore_params(const Archive& archive, const std::string& prefix, ParamSet& params) {
  std::vector<std::pair<Tensor*, const Tensor*>> plan;
  std::size_t seen = 0;
  for (const auto& [path, src] : archive.tensors) {
    if (path.rfind(prefix, 0) != 0) continue;
    const std::string local = path.substr(prefix.size());
    if (!params.contains(local)) throw std::runtime_error("checkpoint: unexpected parameter '" + path + "'");
    Tensor& dst = params.at(local);
    if (dst.shape() != src.shape()) {
      throw std::runtime_error("checkpoint: shape mismatch at '" + path + "': " + shape_str(src.shape()) +
                               " vs expected " + shape_str(dst.shape()));
    }
    plan.emplace_back(&dst, &src);
    ++seen;
  }
  if (seen != params.size()) {
    for (const auto& [local, _] : params) {
      if (!archive.find(prefix + local)) throw std::runtime_error("checkpoint: missing parameter '" + prefix + local + "'");
    }
  }
  for (auto& [dst, src] : plan) {
    auto v = dst->mutable_values();
    std::copy(src->values().begin(), src->values().end(), v.begin());
    dst->clear_grad();
  }
  auto it = archive.header.find(prefix + "step");
  params.set_step(it == archive.header.end() ? 0 : std::stoull(it->second));
}

inline void save_params(const std::filesystem::path& base, const ParamSet& params) {
  Archive a;
  append_params(a, "", params);
  save_archive(base, a);
}

inline void load_params(const std::filesystem::path& base, ParamSet& params) {
  restore_params(load_archive(base), "", params);
}

}  // namespace classched::diff
