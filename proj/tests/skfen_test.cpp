// Copyright (c) 2026 The classched Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>

#include "classched/skfen.hpp"
#include "support/gradcheck.hpp"

namespace cs = classched;
namespace sk = classched::skfen;
using cs::diff::Tensor;

namespace {

void zero_all(cs::diff::ParamSet& p) {
  for (auto& [path, t] : p) {
    for (double& v : t.mutable_values()) v = 0.0;
  }
}

Tensor random_latent(const sk::SkfenConfig& cfg, cs::Rng& rng) {
  std::vector<double> v(cfg.latent_dim());
  for (double& x : v) x = rng.normal();
  return Tensor::from({cfg.channels, cfg.height, cfg.width}, v);
}

}  // namespace

TEST(Skfen, ZeroWeightsGiveIdentity) {
  const sk::SkfenConfig cfg;
  cs::Rng rng(1);
  auto p = sk::init_params(cfg, rng);
  zero_all(p);
  const auto z = random_latent(cfg, rng);
  const auto out = sk::skfen_forward(z, cfg, p);
  EXPECT_EQ(std::vector<double>(out.values().begin(), out.values().end()),
            std::vector<double>(z.values().begin(), z.values().end()));
}

TEST(Skfen, HandSetPoolingExample) {
  sk::SkfenConfig cfg{.channels = 1, .expanded = 4, .groups = 2, .height = 1, .width = 1};
  cs::Rng rng(0);
  auto p = sk::init_params(cfg, rng);
  zero_all(p);
  auto eb = p.at("expand.bias").mutable_values();
  eb[0] = 1, eb[1] = 2, eb[2] = 3, eb[3] = 4;
  auto fw = p.at("final.weight").mutable_values();  // (1,4,3,3): only centre taps see a 1x1 map
  fw[0 * 9 + 4] = 1, fw[1 * 9 + 4] = 10, fw[2 * 9 + 4] = 100, fw[3 * 9 + 4] = 1000;
  const auto z = Tensor::from({1, 1, 1}, {0.5});
  const auto t = sk::skfen_forward_traced(z, cfg, p);
  auto vec = [](const Tensor& x) { return std::vector<double>(x.values().begin(), x.values().end()); };
  EXPECT_EQ(vec(t.expanded), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(vec(t.shuffled), (std::vector<double>{1, 3, 2, 4}));
  EXPECT_EQ(vec(t.group_max), (std::vector<double>{3, 4}));
  EXPECT_EQ(vec(t.group_avg), (std::vector<double>{2, 3}));
  EXPECT_EQ(vec(t.pooled), (std::vector<double>{3, 4, 2, 3}));
  EXPECT_EQ(t.out[0], 3 + 40 + 200 + 3000 + 0.5);
}

TEST(Skfen, ShapePreservedAcrossConfigs) {
  cs::Rng rng(3);
  for (auto cfg : {sk::SkfenConfig{}, sk::SkfenConfig{2, 6, 3, 3, 5}, sk::SkfenConfig{4, 4, 1, 1, 1},
                   sk::SkfenConfig{3, 8, 8, 6, 2}}) {
    const auto p = sk::init_params(cfg, rng);
    const auto z = random_latent(cfg, rng);
    EXPECT_EQ(sk::skfen_forward(z, cfg, p).shape(), z.shape());
  }
}

TEST(Skfen, PoolingMatchesChannelLoop) {
  const sk::SkfenConfig cfg;
  cs::Rng rng(5);
  const auto p = sk::init_params(cfg, rng);
  const auto t = sk::skfen_forward_traced(random_latent(cfg, rng), cfg, p);
  const std::size_t hw = cfg.height * cfg.width, cg = cfg.per_group();
  for (std::size_t g = 0; g < cfg.groups; ++g) {
    for (std::size_t s = 0; s < hw; ++s) {
      double mx = -1e300, sum = 0.0;
      bool attained = false;
      for (std::size_t j = 0; j < cg; ++j) {
        const double v = t.shuffled[(g * cg + j) * hw + s];
        mx = std::max(mx, v);
        sum += v;
        EXPECT_GE(t.group_max[g * hw + s], v);
      }
      for (std::size_t j = 0; j < cg; ++j) attained |= t.shuffled[(g * cg + j) * hw + s] == t.group_max[g * hw + s];
      EXPECT_TRUE(attained);
      EXPECT_NEAR(t.group_avg[g * hw + s], sum / static_cast<double>(cg), 1e-12);
    }
  }
}

TEST(Skfen, StageErrorsNameTheStage) {
  sk::SkfenConfig cfg;
  cs::Rng rng(0);
  auto p = sk::init_params(cfg, rng);
  try {
    sk::skfen_forward(Tensor::zeros({3, 4, 4}), cfg, p);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("input"), std::string::npos);
  }
  sk::SkfenConfig other = cfg;
  other.expanded = 16;
  const auto q = sk::init_params(other, rng);
  try {
    sk::skfen_forward(random_latent(cfg, rng), cfg, q);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("skfen stage"), std::string::npos) << e.what();
  }
  cfg.groups = 5;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Skfen, GradientMatchesFiniteDifferences) {
  const sk::SkfenConfig cfg{.channels = 2, .expanded = 4, .groups = 2, .height = 3, .width = 3};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    cs::Rng rng(seed);
    auto p = sk::init_params(cfg, rng);
    auto z = cs::testing::random_leaf({2, 3, 3}, rng);
    auto w = cs::testing::random_leaf({2, 3, 3}, rng);
    std::vector<Tensor> leaves{z};
    for (auto& [path, t] : p) leaves.push_back(t);
    const auto res = cs::testing::grad_check(
        [&] { return cs::diff::reduce_sum(cs::diff::mul(sk::skfen_forward(z, cfg, p), w)); }, leaves);
    EXPECT_TRUE(res.ok) << res.first_failure;
  }
}
