// Copyright (c) 2026 The classched Authors
// SPDX-License-Identifier: Apache-2.0
//
// Domain types shared between the environment, the state codec and the scheduler.

#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace classched {

/// A permutation of class ids in descending informativeness plus the policy's view of it.
struct ClassRanking {
  std::vector<int> order;
  double log_prob = 0.0;
  std::vector<double> logits;  // snapshot at sampling time; empty for hand-built rankings
};

inline bool is_permutation_of_classes(const std::vector<int>& order, std::size_t classes) {
  if (order.size() != classes) return false;
  std::vector<bool> seen(classes, false);
  for (int c : order) {
    if (c < 0 || static_cast<std::size_t>(c) >= classes || seen[c]) return false;
    seen[c] = true;
  }
  return true;
}

inline std::vector<int> identity_order(std::size_t classes) {
  std::vector<int> o(classes);
  for (std::size_t c = 0; c < classes; ++c) o[c] = static_cast<int>(c);
  return o;
}

/// Per-class learning statistics. Unset fields mean "never observed".
struct ClassStats {
  std::optional<double> ce_loss;
  std::optional<double> accuracy;      // target-domain confidence proxy in [0,1]
  std::optional<double> proto_norm;    // ‖learned prototype‖
  std::optional<double> proto_cosine;  // cos(source prototype, target prototype)
  std::optional<double> entropy;       // mean prediction entropy on target pixels
  std::optional<double> exposure;      // fraction of mixing events that pasted this class
};

using EnvStats = std::vector<ClassStats>;

inline constexpr const char* kStatFieldNames[6] = {"ce_loss", "accuracy", "proto_norm",
                                                   "proto_cosine", "entropy", "exposure"};

}  // namespace classched
