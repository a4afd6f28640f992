// Copyright (c) 2026 The classched Authors
// SPDX-License-Identifier: Apache-2.0
//
// Key-feature distillation of the latent state:
//   fuse 1x1 -> depthwise 5x5 -> expand 1x1 (to n channels) -> shuffle(G) -> G groups,
//   then Conv3x3(concat(per-group channel max, per-group channel mean)) + residual input.

#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include "classched/diffcore/ops.hpp"
#include "classched/diffcore/param_set.hpp"
#include "classched/rng.hpp"

namespace classched::skfen {

struct SkfenConfig {
  std::size_t channels = 8;   // C_z
  std::size_t expanded = 32;  // n
  std::size_t groups = 4;     // G
  std::size_t height = 4;
  std::size_t width = 4;

  std::size_t latent_dim() const { return channels * height * width; }
  std::size_t per_group() const { return expanded / groups; }

  void validate() const {
    if (!channels || !expanded || !groups || !height || !width) {
      throw std::invalid_argument("skfen: all extents must be positive");
    }
    if (expanded % groups != 0) {
      throw std::invalid_argument("skfen: groups G=" + std::to_string(groups) + " must divide expanded channels n=" +
                                  std::to_string(expanded));
    }
  }
};

/// Parameter layout: fuse.{weight,bias}, depthwise.{weight,bias}, expand.{weight,bias}, final.{weight,bias}.
inline diff::ParamSet init_params(const SkfenConfig& cfg, Rng& rng) {
  cfg.validate();
  auto uniform = [&rng](diff::Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> v(diff::shape_numel(shape));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return diff::Tensor::from(std::move(shape), std::move(v));
  };
  const std::size_t c = cfg.channels, n = cfg.expanded, g2 = 2 * cfg.groups;
  diff::ParamSet p;
  p.add("fuse.weight", uniform({c, c}, c));
  p.add("fuse.bias", diff::Tensor::zeros({c}));
  p.add("depthwise.weight", uniform({c, 5, 5}, 25));
  p.add("depthwise.bias", diff::Tensor::zeros({c}));
  p.add("expand.weight", uniform({n, c}, c));
  p.add("expand.bias", diff::Tensor::zeros({n}));
  p.add("final.weight", uniform({c, g2, 3, 3}, g2 * 9));
  p.add("final.bias", diff::Tensor::zeros({c}));
  return p;
}

/// Every intermediate of one forward pass.
struct SkfenTrace {
  diff::Tensor fused, spatial, expanded, shuffled, group_max, group_avg, pooled, out;
};

namespace detail {

inline void expect_channels(const char* stage, const diff::Tensor& t, std::size_t want) {
  if (t.rank() != 3 || t.dim(0) != want) {
    throw std::invalid_argument(std::string("skfen stage '") + stage + "': expected " + std::to_string(want) +
                                " channels, got " + diff::shape_str(t.shape()));
  }
}

template <typename F>
diff::Tensor stage(const char* name, F&& fn) {
  try {
    return fn();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(std::string("skfen stage '") + name + "': " + e.what());
  }
}

}  // namespace detail

inline SkfenTrace skfen_forward_traced(const diff::Tensor& z, const SkfenConfig& cfg, const diff::ParamSet& p) {
  cfg.validate();
  if (z.shape() != diff::Shape{cfg.channels, cfg.height, cfg.width}) {
    throw std::invalid_argument("skfen stage 'input': latent " + diff::shape_str(z.shape()) + " does not match " +
                                diff::shape_str({cfg.channels, cfg.height, cfg.width}));
  }
  SkfenTrace t;
  t.fused = detail::stage("fuse", [&] { return diff::conv2d_1x1(z, p.at("fuse.weight"), p.at("fuse.bias")); });
  detail::expect_channels("fuse", t.fused, cfg.channels);
  t.spatial = detail::stage("depthwise", [&] {
    return diff::depthwise_conv2d_5x5(t.fused, p.at("depthwise.weight"), p.at("depthwise.bias"));
  });
  t.expanded = detail::stage("expand", [&] { return diff::conv2d_1x1(t.spatial, p.at("expand.weight"), p.at("expand.bias")); });
  detail::expect_channels("expand", t.expanded, cfg.expanded);
  t.shuffled = detail::stage("shuffle", [&] { return diff::channel_shuffle(t.expanded, cfg.groups); });
  t.group_max = detail::stage("group_max", [&] { return diff::channel_group_max(t.shuffled, cfg.groups); });
  t.group_avg = detail::stage("group_avg", [&] { return diff::channel_group_avg(t.shuffled, cfg.groups); });
  t.pooled = diff::concat_channels(t.group_max, t.group_avg);
  auto fused_out = detail::stage("final", [&] { return diff::conv2d_3x3(t.pooled, p.at("final.weight"), p.at("final.bias")); });
  detail::expect_channels("final", fused_out, cfg.channels);
  t.out = diff::add(fused_out, z);
  return t;
}

/// Key features z_out with the same (C_z,H_z,W_z) shape as the input latent state.
inline diff::Tensor skfen_forward(const diff::Tensor& z, const SkfenConfig& cfg, const diff::ParamSet& p) {
  return skfen_forward_traced(z, cfg, p).out;
}

}  // namespace classched::skfen
