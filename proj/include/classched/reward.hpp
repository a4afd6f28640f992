// Copyright (c) 2026 The classched Authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-class composite reward from domain prototypes: transferability (source vs
// target prototype alignment) plus λ-weighted discriminability (separation of a
// class's target prototype from every other defined target prototype).

#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "classched/segenv.hpp"

namespace classched::reward {

enum class Domain { source, target };

struct PrototypeTable {
  Domain domain = Domain::source;
  std::size_t feature_dim = 0;
  std::vector<std::vector<double>> mean;  // empty vector: class absent
  std::vector<std::size_t> count;

  std::size_t classes() const { return count.size(); }
  bool defined(std::size_t c) const { return count[c] > 0; }
};

/// Accumulates per-class feature sums over any number of (features, labels) maps.
class PrototypeAccumulator {
 public:
  PrototypeAccumulator(std::size_t classes, std::size_t feature_dim, Domain domain)
      : domain_(domain), feature_dim_(feature_dim), sum_(classes, std::vector<double>(feature_dim, 0.0)),
        count_(classes, 0) {}

  void add(const segenv::FeatureMap& features, const segenv::LabelMap& labels) {
    if (features.height != labels.height || features.width != labels.width || features.channels != feature_dim_) {
      throw std::invalid_argument("compute_prototypes: features and labels are not aligned");
    }
    for (std::size_t p = 0; p < labels.pixels(); ++p) {
      const int y = labels.data[p];
      if (y < 0 || static_cast<std::size_t>(y) >= count_.size()) {
        throw std::invalid_argument("compute_prototypes: label " + std::to_string(y) + " out of range");
      }
      for (std::size_t f = 0; f < feature_dim_; ++f) sum_[y][f] += features.at(f, p);
      ++count_[y];
    }
  }

  PrototypeTable finish() const {
    PrototypeTable t;
    t.domain = domain_;
    t.feature_dim = feature_dim_;
    t.count = count_;
    t.mean.resize(count_.size());
    for (std::size_t c = 0; c < count_.size(); ++c) {
      if (!count_[c]) continue;
      t.mean[c] = sum_[c];
      for (double& v : t.mean[c]) v /= static_cast<double>(count_[c]);
    }
    return t;
  }

 private:
  Domain domain_;
  std::size_t feature_dim_;
  std::vector<std::vector<double>> sum_;
  std::vector<std::size_t> count_;
};

inline PrototypeTable compute_prototypes(const segenv::FeatureMap& features, const segenv::LabelMap& labels,
                                         Domain domain, std::size_t classes) {
  PrototypeAccumulator acc(classes, features.channels, domain);
  acc.add(features, labels);
  return acc.finish();
}

/// Cosine similarity; 0 when either vector has zero norm.
inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

struct RewardVector {
  std::vector<double> r;
  std::vector<bool> defined;
  std::vector<std::optional<double>> transferability;  // cos(A^S_c, A^T_c) where both exist
  double lambda = 1.0;
};

/// Upper end of the reward range, 1 + 2λ(C−1); the lower end is −1.
inline double reward_upper_bound(double lambda, std::size_t classes) {
  return 1.0 + 2.0 * lambda * static_cast<double>(classes > 0 ? classes - 1 : 0);
}

inline RewardVector class_reward(const PrototypeTable& src, const PrototypeTable& tgt, double lambda) {
  if (src.feature_dim != tgt.feature_dim) throw std::invalid_argument("class_reward: feature dims differ");
  if (src.classes() != tgt.classes()) throw std::invalid_argument("class_reward: class counts differ");
  if (lambda < 0.0) throw std::invalid_argument("class_reward: lambda must be nonnegative");
  const std::size_t cn = src.classes();
  RewardVector out;
  out.lambda = lambda;
  out.r.assign(cn, 0.0);
  out.defined.assign(cn, false);
  out.transferability.resize(cn);
  for (std::size_t c = 0; c < cn; ++c) {
    if (!src.defined(c) || !tgt.defined(c)) continue;
    const double transfer = cosine(src.mean[c], tgt.mean[c]);
    double discrim = 0.0;
    for (std::size_t k = 0; k < cn; ++k) {
      if (k == c || !tgt.defined(k)) continue;
      discrim += 1.0 - cosine(tgt.mean[c], tgt.mean[k]);
    }
    out.r[c] = transfer + lambda * discrim;
    out.defined[c] = true;
    out.transferability[c] = transfer;
  }
  return out;
}

}  // namespace classched::reward
