// Copyright (c) 2026 The classched Authors
// SPDX-License-Identifier: Apache-2.0
//
// Ranking policy (Plackett–Luce over class logits), per-class critics, the
// α-fair utility and its fairness-weighted policy gradient, and replay storage.

#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "classched/diffcore/ops.hpp"
#include "classched/diffcore/param_set.hpp"
#include "classched/reward.hpp"
#include "classched/rng.hpp"
#include "classched/statecodec.hpp"
#include "classched/types.hpp"

namespace classched::policy {

// ---------------------------------------------------------------------------
// Plackett–Luce rankings
// ---------------------------------------------------------------------------

inline double log_sum_exp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

/// Exact log-probability of `order` under sequential softmax sampling without replacement.
inline double ranking_log_prob(std::span<const int> order, std::span<const double> logits) {
  const std::vector<int> ord(order.begin(), order.end());
  if (!is_permutation_of_classes(ord, logits.size())) {
    throw std::invalid_argument("ranking_log_prob: order is not a permutation of 0.." + std::to_string(logits.size()) + "-1");
  }
  std::vector<double> rest;
  double lp = 0.0;
  for (std::size_t i = 0; i < ord.size(); ++i) {
    rest.clear();
    for (std::size_t j = i; j < ord.size(); ++j) rest.push_back(logits[ord[j]]);
    lp += logits[ord[i]] - log_sum_exp(rest);
  }
  return lp;
}

inline ClassRanking sample_plackett_luce(std::span<const double> logits, Rng& rng) {
  const std::size_t n = logits.size();
  if (n == 0) throw std::invalid_argument("sample_ranking: no classes");
  ClassRanking r;
  r.logits.assign(logits.begin(), logits.end());
  std::vector<int> remaining = identity_order(n);
  std::vector<double> rest;
  while (!remaining.empty()) {
    rest.clear();
    for (int c : remaining) rest.push_back(logits[c]);
    const double lse = log_sum_exp(rest);
    double u = rng.uniform();
    std::size_t pick = remaining.size() - 1;
    for (std::size_t i = 0; i < remaining.size(); ++i) {
      const double p = std::exp(rest[i] - lse);
      if (u < p) {
        pick = i;
        break;
      }
      u -= p;
    }
    r.log_prob += rest[pick] - lse;
    r.order.push_back(remaining[pick]);
    remaining.erase(remaining.begin() + static_cast<long>(pick));
  }
  return r;
}

/// Ranking head: one linear map from the flattened key features to C logits. Zero-initialised,
/// so the untrained policy is uniform over permutations.
inline diff::ParamSet init_policy_head(std::size_t key_dim, std::size_t classes) {
  diff::ParamSet p;
  p.add("weight", diff::Tensor::zeros({classes, key_dim}));
  p.add("bias", diff::Tensor::zeros({classes}));
  return p;
}

inline diff::Tensor policy_logits(const diff::Tensor& key, const diff::ParamSet& head) {
  const auto flat = diff::reshape(key, {1, key.numel()});
  const auto l = diff::linear(flat, head.at("weight"), head.at("bias"));
  return diff::reshape(l, {l.numel()});
}

inline ClassRanking sample_ranking(const diff::Tensor& key, const diff::ParamSet& head, Rng& rng) {
  diff::NoGradGuard guard;
  const auto logits = policy_logits(key, head);
  return sample_plackett_luce(logits.values(), rng);
}

// ---------------------------------------------------------------------------
// α-fairness
// ---------------------------------------------------------------------------

/// Σ_c V_c^{1−α}/(1−α), or Σ_c log V_c at α = 1, with V floored at ε.
inline double fair_objective(std::span<const double> values, double alpha, double epsilon = 1e-3) {
  if (alpha < 0.0) throw std::invalid_argument("fair_objective: alpha must be nonnegative");
  double j = 0.0;
  for (double v : values) {
    const double x = std::max(v, epsilon);
    j += alpha == 1.0 ? std::log(x) : std::pow(x, 1.0 - alpha) / (1.0 - alpha);
  }
  return j;
}

/// w_c = max(V_c, ε)^(−α).
inline std::vector<double> fairness_weights(std::span<const double> values, double alpha, double epsilon) {
  std::vector<double> w(values.size());
  for (std::size_t c = 0; c < values.size(); ++c) w[c] = std::pow(std::max(values[c], epsilon), -alpha);
  return w;
}

struct FairnessConfig {
  double alpha = 0.5;
  double epsilon = 1e-3;
  double reward_lo = -1.0;  // affine map [lo, hi] -> [0, 1]
  double reward_hi = 15.0;

  static FairnessConfig from_reward_bounds(double lambda, std::size_t classes, double alpha, double epsilon) {
    FairnessConfig f;
    f.alpha = alpha;
    f.epsilon = epsilon;
    f.reward_lo = -1.0;
    f.reward_hi = reward::reward_upper_bound(lambda, classes);
    f.validate();
    return f;
  }

  double shift() const { return -reward_lo; }
  double scale() const { return 1.0 / (reward_hi - reward_lo); }
  double map(double r) const { return std::clamp((r + shift()) * scale(), 0.0, 1.0); }

  std::vector<double> map_rewards(const reward::RewardVector& r) const {
    std::vector<double> out(r.r.size());
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = map(r.r[c]);
    return out;
  }

  void validate() const {
    if (alpha < 0.0) throw std::invalid_argument("fairness: alpha must be nonnegative");
    if (!(epsilon > 0.0)) throw std::invalid_argument("fairness: value floor epsilon must be positive");
    if (!(reward_hi > reward_lo)) throw std::invalid_argument("fairness: reward map scale must be positive");
  }
};

// ---------------------------------------------------------------------------
// Transitions, critics and replay
// ---------------------------------------------------------------------------

struct TransitionRecord {
  std::vector<double> z_key;
  ClassRanking ranking;
  std::vector<double> reward;  // affine-mapped into [0,1]
  std::vector<double> z_key_next;
  // Inputs the key features were distilled from, so the policy path can be replayed
  // through the encoder and SKFEN under current parameters.
  statecodec::HighDimState state;
  statecodec::HighDimState next_state;
};

/// C linear value heads over the flattened key features, stored as one (C,d) weight.
struct CriticBank {
  diff::ParamSet params;
  double gamma = 0.95;

  static CriticBank make(std::size_t key_dim, std::size_t classes, double gamma) {
    if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("critics: discount must lie in [0,1)");
    CriticBank b;
    b.params.add("weight", diff::Tensor::zeros({classes, key_dim}));
    b.params.add("bias", diff::Tensor::zeros({classes}));
    b.gamma = gamma;
    return b;
  }

  std::size_t classes() const { return params.at("weight").dim(0); }
  std::size_t key_dim() const { return params.at("weight").dim(1); }

  /// (B,d) -> (B,C).
  diff::Tensor values(const diff::Tensor& keys) const { return diff::linear(keys, params.at("weight"), params.at("bias")); }

  std::vector<double> values_of(std::span<const double> key) const {
    diff::NoGradGuard guard;
    const auto v = values(diff::Tensor::from({1, key.size()}, std::vector<double>(key.begin(), key.end())));
    return {v.values().begin(), v.values().end()};
  }
};

/// A_c = r̃_c + γ·V_c(z′) − V_c(z), critics untracked.
inline std::vector<double> td_advantage(const TransitionRecord& rec, const CriticBank& critics) {
  const auto v = critics.values_of(rec.z_key);
  const auto vn = critics.values_of(rec.z_key_next);
  if (rec.reward.size() != v.size()) throw std::invalid_argument("td_advantage: reward length differs from critic count");
  std::vector<double> a(v.size());
  for (std::size_t c = 0; c < a.size(); ++c) a[c] = rec.reward[c] + critics.gamma * vn[c] - v[c];
  return a;
}

/// Fixed-capacity FIFO; at capacity a push evicts the oldest entry.
template <typename T>
class RingBuffer {
 public:
  explicit RingBuffer(std::size_t capacity = 1) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("RingBuffer: capacity must be positive");
  }

  void push(T item) {
    if (items_.size() == capacity_) items_.pop_front();
    items_.push_back(std::move(item));
  }

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return items_.empty(); }
  /// i = 0 is the oldest entry.
  const T& at(std::size_t i) const { return items_.at(i); }
  void clear() { items_.clear(); }

  /// Uniform with replacement.
  std::vector<T> sample(std::size_t batch, Rng& rng) const {
    if (batch == 0) throw std::invalid_argument("RingBuffer::sample: batch must be positive");
    if (items_.size() < batch) {
      throw std::invalid_argument("RingBuffer::sample: " + std::to_string(items_.size()) +
                                  " entries cannot fill a batch of " + std::to_string(batch));
    }
    std::vector<T> out;
    out.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) out.push_back(items_[rng.index(items_.size())]);
    return out;
  }

 private:
  std::size_t capacity_;
  std::deque<T> items_;
};

struct ReplayBuffer {
  RingBuffer<TransitionRecord> transitions;
  RingBuffer<statecodec::HighDimState> states;

  ReplayBuffer(std::size_t transition_capacity, std::size_t state_capacity)
      : transitions(transition_capacity), states(state_capacity) {}
};

// ---------------------------------------------------------------------------
// Fairness-weighted policy gradient
// ---------------------------------------------------------------------------

/// Recomputes the C ranking logits for a stored transition under the current parameters.
using LogitsFn = std::function<diff::Tensor(const TransitionRecord&)>;

struct Trainable {
  diff::ParamSet* params;
  double learning_rate;
};

struct UpdateReport {
  double surrogate = 0.0;
  double mean_aggregate_advantage = 0.0;
  double critic_loss = 0.0;  // before the critic step
  double grad_norm = 0.0;    // over all trainable sets
  std::vector<double> mean_weights;
  std::vector<double> mean_advantages;
  std::vector<double> mean_values;
};

struct Surrogate {
  diff::Tensor loss;
  std::vector<double> aggregate;  // Ã per record
  std::vector<double> mean_weights, mean_advantages, mean_values;
};

/// −mean_b[ log π(order_b) · Ã_b ], Ã_b = Σ_c w_c·A_c held constant.
inline Surrogate policy_surrogate(std::span<const TransitionRecord> batch, const LogitsFn& logits_fn,
                                  const CriticBank& critics, const FairnessConfig& fair) {
  if (batch.empty()) throw std::invalid_argument("policy_gradient_update: empty batch");
  fair.validate();
  const std::size_t cn = critics.classes();
  Surrogate s;
  s.mean_weights.assign(cn, 0.0);
  s.mean_advantages.assign(cn, 0.0);
  s.mean_values.assign(cn, 0.0);
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  diff::Tensor total;
  for (const auto& rec : batch) {
    const auto v = critics.values_of(rec.z_key);
    const auto w = fairness_weights(v, fair.alpha, fair.epsilon);
    const auto a = td_advantage(rec, critics);
    double agg = 0.0;
    for (std::size_t c = 0; c < cn; ++c) {
      agg += w[c] * a[c];
      s.mean_weights[c] += w[c] * inv_b;
      s.mean_advantages[c] += a[c] * inv_b;
      s.mean_values[c] += v[c] * inv_b;
    }
    s.aggregate.push_back(agg);
    auto lp = diff::plackett_luce_log_prob(logits_fn(rec), rec.ranking.order);
    auto term = diff::scale(lp, -agg * inv_b);
    total = total.defined() ? diff::add(total, term) : term;
  }
  s.loss = total;
  return s;
}

/// Frozen regression targets r̃ + γ·V(z′), (B,C) row-major.
inline std::vector<double> critic_targets(std::span<const TransitionRecord> batch, const CriticBank& critics) {
  std::vector<double> t;
  for (const auto& rec : batch) {
    const auto vn = critics.values_of(rec.z_key_next);
    for (std::size_t c = 0; c < vn.size(); ++c) t.push_back(rec.reward[c] + critics.gamma * vn[c]);
  }
  return t;
}

/// One SGD step on the mean squared TD error against fixed targets; returns the pre-step loss.
inline double critic_step(std::span<const TransitionRecord> batch, std::span<const double> targets, CriticBank& critics,
                          double learning_rate, double weight_decay) {
  if (batch.empty()) throw std::invalid_argument("critic_step: empty batch");
  const std::size_t d = critics.key_dim(), cn = critics.classes();
  std::vector<double> keys;
  for (const auto& rec : batch) keys.insert(keys.end(), rec.z_key.begin(), rec.z_key.end());
  const auto z = diff::Tensor::from({batch.size(), d}, std::move(keys));
  const auto tgt = diff::Tensor::from({batch.size(), cn}, std::vector<double>(targets.begin(), targets.end()));
  critics.params.zero_grad();
  auto loss = diff::scale(diff::squared_error(critics.values(z), tgt), 1.0 / static_cast<double>(batch.size() * cn));
  loss.backward();
  diff::sgd_step(critics.params, learning_rate, weight_decay);
  return loss.item();
}

/// Accumulates the surrogate gradient into the trainable sets without stepping.
inline UpdateReport policy_gradient(std::span<const TransitionRecord> batch, const LogitsFn& logits_fn,
                                    std::span<const Trainable> trainables, const CriticBank& critics,
                                    const FairnessConfig& fair) {
  for (const auto& t : trainables) t.params->zero_grad();
  auto s = policy_surrogate(batch, logits_fn, critics, fair);
  s.loss.backward();
  UpdateReport r;
  r.surrogate = s.loss.item();
  for (double a : s.aggregate) r.mean_aggregate_advantage += a / static_cast<double>(s.aggregate.size());
  double sq = 0.0;
  for (const auto& t : trainables) sq += std::pow(t.params->grad_norm(), 2);
  r.grad_norm = std::sqrt(sq);
  r.mean_weights = std::move(s.mean_weights);
  r.mean_advantages = std::move(s.mean_advantages);
  r.mean_values = std::move(s.mean_values);
  return r;
}

/// One policy step on every trainable set, then a critic regression step on the same batch.
inline UpdateReport policy_gradient_update(std::span<const TransitionRecord> batch, const LogitsFn& logits_fn,
                                           std::span<const Trainable> trainables, CriticBank& critics,
                                           const FairnessConfig& fair, double critic_lr, double weight_decay) {
  const auto targets = critic_targets(batch, critics);
  auto r = policy_gradient(batch, logits_fn, trainables, critics, fair);
  for (const auto& t : trainables) diff::sgd_step(*t.params, t.learning_rate, weight_decay);
  r.critic_loss = critic_step(batch, targets, critics, critic_lr, weight_decay);
  return r;
}

}  // namespace classched::policy
