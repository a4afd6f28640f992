// Copyright (c) 2026 The classched Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic source/target segmentation world, class-ranked mixing, a prototype
// learner standing in for the segmentation network, and its statistics.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "classched/diffcore/ops.hpp"
#include "classched/diffcore/param_set.hpp"
#include "classched/rng.hpp"
#include "classched/types.hpp"

namespace classched::segenv {

/// Channel-major (F,H,W) per-pixel features.
struct FeatureMap {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(std::size_t f, std::size_t h, std::size_t w) : channels(f), height(h), width(w), data(f * h * w, 0.0) {}

  std::size_t pixels() const { return height * width; }
  double& at(std::size_t c, std::size_t p) { return data[c * pixels() + p]; }
  double at(std::size_t c, std::size_t p) const { return data[c * pixels() + p]; }
  std::vector<double> pixel(std::size_t p) const {
    std::vector<double> v(channels);
    for (std::size_t c = 0; c < channels; ++c) v[c] = at(c, p);
    return v;
  }
};

struct LabelMap {
  std::size_t height = 0, width = 0;
  std::vector<int> data;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, int fill = 0) : height(h), width(w), data(h * w, fill) {}
  std::size_t pixels() const { return data.size(); }
};

enum class PasteHalf { low, high };

struct EnvConfig {
  std::size_t classes = 8;
  std::size_t feature_dim = 6;
  std::size_t height = 16;
  std::size_t width = 16;
  std::vector<double> frequency_weights;  // empty: long tail 0.7^c
  double severity = 0.3;                  // in [0,1]
  double noise = 0.5;                     // σ_img
  double mean_scale = 1.5;                // spread of the source class means
  double domain_shift = 1.0;              // magnitude of the per-class target displacement
  std::size_t rectangles = 5;
  std::uint64_t seed = 0;

  std::vector<double> base_weights() const {
    if (!frequency_weights.empty()) return frequency_weights;
    std::vector<double> w(classes);
    for (std::size_t c = 0; c < classes; ++c) w[c] = std::pow(0.7, static_cast<double>(c));
    return w;
  }

  /// Severity sharpens the long tail: w_c ∝ (w_c / max w)^(1 + severity).
  std::vector<double> effective_weights() const {
    auto w = base_weights();
    if (w.size() != classes) throw std::invalid_argument("env: frequency_weights must have one entry per class");
    double mx = 0.0;
    for (double v : w) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("env: frequency weights must be finite and >= 0");
      mx = std::max(mx, v);
    }
    if (mx == 0.0) throw std::invalid_argument("env: frequency weights are all zero");
    for (double& v : w) v = std::pow(v / mx, 1.0 + severity);
    return w;
  }

  void validate() const {
    if (classes == 0 || feature_dim == 0 || height == 0 || width == 0) {
      throw std::invalid_argument("env: classes, feature_dim, height and width must be positive");
    }
    if (!(severity >= 0.0 && severity <= 1.0)) throw std::invalid_argument("env: severity must lie in [0,1]");
    if (!(noise >= 0.0)) throw std::invalid_argument("env: noise must be nonnegative");
    (void)effective_weights();
  }
};

/// The generative world: per-class source means and their shifted target counterparts.
struct World {
  EnvConfig cfg;
  std::vector<std::vector<double>> source_means;
  std::vector<std::vector<double>> target_means;

  static World make(const EnvConfig& cfg) {
    cfg.validate();
    World w;
    w.cfg = cfg;
    Rng rng = Rng::stream(cfg.seed, 0xC1A55);
    w.source_means.assign(cfg.classes, std::vector<double>(cfg.feature_dim));
    w.target_means = w.source_means;
    for (std::size_t c = 0; c < cfg.classes; ++c) {
      for (std::size_t f = 0; f < cfg.feature_dim; ++f) w.source_means[c][f] = cfg.mean_scale * rng.normal();
    }
    for (std::size_t c = 0; c < cfg.classes; ++c) {
      for (std::size_t f = 0; f < cfg.feature_dim; ++f) {
        w.target_means[c][f] = w.source_means[c][f] + cfg.domain_shift * rng.normal() / std::sqrt(double(cfg.feature_dim));
      }
    }
    return w;
  }
};

struct Scene {
  FeatureMap source;
  LabelMap source_labels;
  FeatureMap target;
  LabelMap target_labels;  // hidden; evaluation only
  std::uint64_t seed = 0;
  double severity = 0.0;
};

namespace detail {

inline std::size_t draw_class(std::span<const double> weights, Rng& rng) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  double u = rng.uniform() * total;
  for (std::size_t c = 0; c < weights.size(); ++c) {
    if (weights[c] <= 0.0) continue;
    if (u < weights[c]) return c;
    u -= weights[c];
  }
  for (std::size_t c = weights.size(); c-- > 0;) {
    if (weights[c] > 0.0) return c;
  }
  return 0;
}

inline LabelMap draw_layout(const EnvConfig& cfg, std::span<const double> weights, Rng& rng) {
  const auto background = static_cast<int>(std::max_element(weights.begin(), weights.end()) - weights.begin());
  LabelMap y(cfg.height, cfg.width, background);
  const std::size_t max_h = std::max<std::size_t>(1, cfg.height / 2);
  const std::size_t max_w = std::max<std::size_t>(1, cfg.width / 2);
  for (std::size_t r = 0; r < cfg.rectangles; ++r) {
    const int c = static_cast<int>(draw_class(weights, rng));
    const std::size_t rh = std::min(max_h, 2 + rng.index(max_h));
    const std::size_t rw = std::min(max_w, 2 + rng.index(max_w));
    const std::size_t top = rng.index(cfg.height - std::min(rh, cfg.height) + 1);
    const std::size_t left = rng.index(cfg.width - std::min(rw, cfg.width) + 1);
    for (std::size_t i = top; i < std::min(cfg.height, top + rh); ++i) {
      for (std::size_t j = left; j < std::min(cfg.width, left + rw); ++j) y.data[i * cfg.width + j] = c;
    }
  }
  return y;
}

inline FeatureMap render(const LabelMap& y, const std::vector<std::vector<double>>& means, double sigma,
                         std::size_t feature_dim, Rng& rng) {
  FeatureMap x(feature_dim, y.height, y.width);
  for (std::size_t p = 0; p < y.pixels(); ++p) {
    const auto& mu = means[static_cast<std::size_t>(y.data[p])];
    for (std::size_t f = 0; f < feature_dim; ++f) {
      const double eps = rng.normal();
      x.at(f, p) = mu[f] + eps * sigma;
    }
  }
  return x;
}

}  // namespace detail

/// One source/target pair. Labels are rectangles over a background class; each pixel's
/// feature is its class mean in that domain plus Gaussian noise·σ_img·(1+severity).
inline Scene generate_scene(const World& world, Rng& rng) {
  const EnvConfig& cfg = world.cfg;
  const auto weights = cfg.effective_weights();
  Scene s;
  s.seed = rng.next_u64();
  s.severity = cfg.severity;
  Rng local(s.seed);
  const double sigma = cfg.noise * (1.0 + cfg.severity);
  s.source_labels = detail::draw_layout(cfg, weights, local);
  s.target_labels = detail::draw_layout(cfg, weights, local);
  s.source = detail::render(s.source_labels, world.source_means, sigma, cfg.feature_dim, local);
  s.target = detail::render(s.target_labels, world.target_means, sigma, cfg.feature_dim, local);
  return s;
}

// ---------------------------------------------------------------------------
// Class-ranked mixing
// ---------------------------------------------------------------------------

struct MixMask {
  std::vector<unsigned char> paste;  // H(m,n), row-major
  std::vector<int> ranked_present;   // ranking restricted to classes in y_s, in ranking order
  std::vector<int> pasted;           // C_low (or the upper half under PasteHalf::high)
};

/// Classes from `order` that occur in `y_s`, keeping the ranking's order.
inline std::vector<int> ranked_present_classes(std::span<const int> order, const LabelMap& y_s) {
  std::vector<bool> present(order.size(), false);
  for (int v : y_s.data) {
    if (v >= 0 && static_cast<std::size_t>(v) < present.size()) present[v] = true;
  }
  std::vector<int> out;
  for (int c : order) {
    if (present[c]) out.push_back(c);
  }
  return out;
}

/// With N ranked classes present, C_low holds 1-indexed positions floor(N/2)+1 .. N.
inline MixMask build_mix_mask(std::span<const int> order, const LabelMap& y_s, PasteHalf half = PasteHalf::low) {
  if (y_s.pixels() == 0) throw std::invalid_argument("build_mix_mask: empty label map");
  const std::vector<int> ord(order.begin(), order.end());
  if (!is_permutation_of_classes(ord, ord.size())) {
    throw std::invalid_argument("build_mix_mask: ranking is not a permutation of the classes");
  }
  for (int v : y_s.data) {
    if (v < 0 || static_cast<std::size_t>(v) >= ord.size()) {
      throw std::invalid_argument("build_mix_mask: label " + std::to_string(v) + " not covered by the ranking");
    }
  }
  MixMask m;
  m.ranked_present = ranked_present_classes(order, y_s);
  const std::size_t n = m.ranked_present.size();
  if (half == PasteHalf::low) {
    m.pasted.assign(m.ranked_present.begin() + static_cast<long>(n / 2), m.ranked_present.end());
  } else {
    m.pasted.assign(m.ranked_present.begin(), m.ranked_present.begin() + static_cast<long>(n - n / 2));
  }
  std::vector<bool> in_set(ord.size(), false);
  for (int c : m.pasted) in_set[c] = true;
  m.paste.resize(y_s.pixels());
  for (std::size_t p = 0; p < y_s.pixels(); ++p) m.paste[p] = in_set[y_s.data[p]] ? 1 : 0;
  return m;
}

// ---------------------------------------------------------------------------
// Prototype learner
// ---------------------------------------------------------------------------

/// Nearest-prototype classifier; scores −‖x − p_c‖²/τ, ties resolved to the lowest class.
struct ToyLearner {
  diff::ParamSet params;  // "prototypes": (C,F)
  double tau = 1.0;

  static ToyLearner make(std::size_t classes, std::size_t feature_dim, double tau, Rng& rng, double init_scale = 0.1) {
    ToyLearner l;
    std::vector<double> v(classes * feature_dim);
    for (auto& x : v) x = init_scale * rng.normal();
    l.params.add("prototypes", diff::Tensor::from({classes, feature_dim}, std::move(v)));
    l.tau = tau;
    return l;
  }

  std::size_t classes() const { return params.at("prototypes").dim(0); }
  std::size_t feature_dim() const { return params.at("prototypes").dim(1); }
  const diff::Tensor& prototypes() const { return params.at("prototypes"); }

  /// Class scores at pixel p.
  std::vector<double> scores(const FeatureMap& x, std::size_t p) const {
    const auto pv = prototypes().values();
    const std::size_t cn = classes(), f = feature_dim();
    std::vector<double> s(cn);
    for (std::size_t c = 0; c < cn; ++c) {
      double d = 0.0;
      for (std::size_t j = 0; j < f; ++j) {
        const double diff = x.at(j, p) - pv[c * f + j];
        d += diff * diff;
      }
      s[c] = -d / tau;
    }
    return s;
  }

  std::vector<double> probabilities(const FeatureMap& x, std::size_t p) const {
    auto s = scores(x, p);
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (double& v : s) z += (v = std::exp(v - mx));
    for (double& v : s) v /= z;
    return s;
  }

  int predict_pixel(const FeatureMap& x, std::size_t p) const {
    const auto s = scores(x, p);
    std::size_t best = 0;
    for (std::size_t c = 1; c < s.size(); ++c) {
      if (s[c] > s[best]) best = c;
    }
    return static_cast<int>(best);
  }

  LabelMap predict(const FeatureMap& x) const {
    LabelMap y(x.height, x.width);
    for (std::size_t p = 0; p < x.pixels(); ++p) y.data[p] = predict_pixel(x, p);
    return y;
  }
};

struct MixedPair {
  FeatureMap features;
  LabelMap labels;
};

/// X = H⊙x_s + (1−H)⊙x_t and Y = H⊙y_s + (1−H)⊙argmax-pseudo-labels(x_t).
inline MixedPair mix_pair(const Scene& scene, const MixMask& mask, const ToyLearner& learner) {
  const std::size_t n = scene.source_labels.pixels();
  if (mask.paste.size() != n || scene.target.pixels() != n) {
    throw std::invalid_argument("mix_pair: mask does not match the scene extent");
  }
  MixedPair out{scene.target, learner.predict(scene.target)};
  for (std::size_t p = 0; p < n; ++p) {
    if (!mask.paste[p]) continue;
    for (std::size_t f = 0; f < out.features.channels; ++f) out.features.at(f, p) = scene.source.at(f, p);
    out.labels.data[p] = scene.source_labels.data[p];
  }
  return out;
}

// ---------------------------------------------------------------------------
// SegLoss
// ---------------------------------------------------------------------------

/// Stacks pixels of several maps into a (P,F) matrix.
inline diff::Tensor pixel_matrix(std::span<const FeatureMap* const> maps) {
  std::size_t total = 0;
  const std::size_t f = maps.empty() ? 0 : maps.front()->channels;
  for (const auto* m : maps) total += m->pixels();
  if (total == 0 || f == 0) throw std::invalid_argument("pixel_matrix: no pixels");
  std::vector<double> v;
  v.reserve(total * f);
  for (const auto* m : maps) {
    if (m->channels != f) throw std::invalid_argument("pixel_matrix: feature dims differ");
    for (std::size_t p = 0; p < m->pixels(); ++p) {
      for (std::size_t c = 0; c < f; ++c) v.push_back(m->at(c, p));
    }
  }
  return diff::Tensor::from({total, f}, std::move(v));
}

inline std::vector<int> pixel_labels(std::span<const LabelMap* const> maps) {
  std::vector<int> out;
  for (const auto* m : maps) out.insert(out.end(), m->data.begin(), m->data.end());
  return out;
}

/// Pixel-averaged cross-entropy of the learner's softmax scores.
inline diff::Tensor cross_entropy(const diff::Tensor& features, std::span<const int> labels,
                                  const diff::Tensor& prototypes, double tau) {
  return diff::nll_mean(diff::log_softmax(diff::sq_dist_scores(features, prototypes, tau)), labels);
}

struct SegBatchView {
  std::vector<const Scene*> scenes;
  std::vector<const MixedPair*> mixed;
};

struct SegLossTerms {
  diff::Tensor loss;
  diff::Tensor source;
  diff::Tensor mixed;
};

/// λ1·CE(g(x_s), y_s) + λ2·CE(g(X_mix), Y_mix) over every pixel of the batch.
inline SegLossTerms seg_loss(const SegBatchView& batch, const diff::Tensor& prototypes, double tau, double lambda1,
                             double lambda2) {
  if (batch.scenes.empty() || batch.scenes.size() != batch.mixed.size()) {
    throw std::invalid_argument("seg_loss: need one mixed pair per scene");
  }
  if (lambda1 < 0.0 || lambda2 < 0.0) throw std::invalid_argument("seg_loss: coefficients must be nonnegative");
  std::vector<const FeatureMap*> xs, xm;
  std::vector<const LabelMap*> ys, ym;
  for (std::size_t i = 0; i < batch.scenes.size(); ++i) {
    xs.push_back(&batch.scenes[i]->source);
    ys.push_back(&batch.scenes[i]->source_labels);
    xm.push_back(&batch.mixed[i]->features);
    ym.push_back(&batch.mixed[i]->labels);
  }
  SegLossTerms t;
  t.source = cross_entropy(pixel_matrix(xs), pixel_labels(ys), prototypes, tau);
  t.mixed = cross_entropy(pixel_matrix(xm), pixel_labels(ym), prototypes, tau);
  t.loss = diff::add(diff::scale(t.source, lambda1), diff::scale(t.mixed, lambda2));
  return t;
}

struct SegReport {
  double loss = 0.0;
  double source_loss = 0.0;
  double mixed_loss = 0.0;
  std::vector<std::optional<double>> class_ce;  // per-class mean source CE before the update
};

/// Pre-update per-class mean cross-entropy on the source pixels of a batch.
inline std::vector<std::optional<double>> source_class_ce(const SegBatchView& batch, const ToyLearner& learner) {
  const std::size_t cn = learner.classes();
  std::vector<double> sum(cn, 0.0);
  std::vector<std::size_t> count(cn, 0);
  for (const Scene* s : batch.scenes) {
    for (std::size_t p = 0; p < s->source.pixels(); ++p) {
      const auto sc = learner.scores(s->source, p);
      const double mx = *std::max_element(sc.begin(), sc.end());
      double z = 0.0;
      for (double v : sc) z += std::exp(v - mx);
      const int y = s->source_labels.data[p];
      sum[y] += -(sc[y] - mx - std::log(z));
      ++count[y];
    }
  }
  std::vector<std::optional<double>> out(cn);
  for (std::size_t c = 0; c < cn; ++c) {
    if (count[c]) out[c] = sum[c] / static_cast<double>(count[c]);
  }
  return out;
}

/// Evaluates SegLoss on the batch and applies one SGD step to the learner's prototypes.
inline SegReport seg_loss_and_update(const SegBatchView& batch, ToyLearner& learner, double lambda1, double lambda2,
                                     double learning_rate, double weight_decay = 0.0) {
  SegReport r;
  r.class_ce = source_class_ce(batch, learner);
  learner.params.zero_grad();
  auto terms = seg_loss(batch, learner.prototypes(), learner.tau, lambda1, lambda2);
  r.loss = terms.loss.item();
  r.source_loss = terms.source.item();
  r.mixed_loss = terms.mixed.item();
  terms.loss.backward();
  diff::sgd_step(learner.params, learning_rate, weight_decay);
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation and statistics
// ---------------------------------------------------------------------------

struct EvalReport {
  std::vector<std::optional<double>> class_accuracy;  // unset: class absent from the held-out set
  double mean_accuracy = 0.0;                        // over present classes
  double accuracy_std = 0.0;                         // population std over present classes
};

inline EvalReport evaluate(const ToyLearner& learner, std::span<const Scene> held_out) {
  if (held_out.empty()) throw std::invalid_argument("evaluate: empty held-out set");
  const std::size_t cn = learner.classes();
  std::vector<std::size_t> correct(cn, 0), total(cn, 0);
  for (const Scene& s : held_out) {
    for (std::size_t p = 0; p < s.target.pixels(); ++p) {
      const int y = s.target_labels.data[p];
      ++total[y];
      if (learner.predict_pixel(s.target, p) == y) ++correct[y];
    }
  }
  EvalReport r;
  r.class_accuracy.resize(cn);
  std::vector<double> present;
  for (std::size_t c = 0; c < cn; ++c) {
    if (total[c] == 0) continue;
    r.class_accuracy[c] = static_cast<double>(correct[c]) / static_cast<double>(total[c]);
    present.push_back(*r.class_accuracy[c]);
  }
  if (!present.empty()) {
    double mean = 0.0;
    for (double a : present) mean += a;
    mean /= static_cast<double>(present.size());
    double var = 0.0;
    for (double a : present) var += (a - mean) * (a - mean);
    r.mean_accuracy = mean;
    r.accuracy_std = std::sqrt(var / static_cast<double>(present.size()));
  }
  return r;
}

/// Running per-class observations that feed the learning-state snapshot.
struct StatsTracker {
  std::vector<std::optional<double>> ce_loss, accuracy, entropy, cosine;
  std::vector<std::uint64_t> exposure_count;
  std::uint64_t mix_events = 0;
  bool trained = false;

  explicit StatsTracker(std::size_t classes = 0)
      : ce_loss(classes), accuracy(classes), entropy(classes), cosine(classes), exposure_count(classes, 0) {}

  std::size_t classes() const { return ce_loss.size(); }

  void record_mix(const MixMask& mask) {
    ++mix_events;
    for (int c : mask.pasted) ++exposure_count[static_cast<std::size_t>(c)];
  }

  void record_seg(const SegReport& r) {
    trained = true;
    for (std::size_t c = 0; c < classes(); ++c) {
      if (r.class_ce[c]) ce_loss[c] = r.class_ce[c];
    }
  }

  /// Confidence and entropy of the learner's predictions on target pixels, grouped by predicted class.
  void record_target(const ToyLearner& learner, std::span<const FeatureMap* const> targets) {
    const std::size_t cn = classes();
    std::vector<double> conf(cn, 0.0), ent(cn, 0.0);
    std::vector<std::size_t> count(cn, 0);
    for (const FeatureMap* x : targets) {
      for (std::size_t p = 0; p < x->pixels(); ++p) {
        const auto prob = learner.probabilities(*x, p);
        const int pred = learner.predict_pixel(*x, p);
        double h = 0.0;
        for (double q : prob) {
          if (q > 0.0) h -= q * std::log(q);
        }
        conf[pred] += prob[pred];
        ent[pred] += h;
        ++count[pred];
      }
    }
    for (std::size_t c = 0; c < cn; ++c) {
      if (!count[c]) continue;
      accuracy[c] = conf[c] / static_cast<double>(count[c]);
      entropy[c] = ent[c] / static_cast<double>(count[c]);
    }
  }

  void record_cosines(const std::vector<std::optional<double>>& cos) {
    for (std::size_t c = 0; c < classes(); ++c) {
      if (cos[c]) cosine[c] = cos[c];
    }
  }
};

inline EnvStats snapshot_stats(const ToyLearner& learner, const StatsTracker& tracker) {
  const std::size_t cn = tracker.classes();
  if (learner.classes() != cn) throw std::invalid_argument("snapshot_stats: class count mismatch");
  EnvStats out(cn);
  const auto pv = learner.prototypes().values();
  const std::size_t f = learner.feature_dim();
  for (std::size_t c = 0; c < cn; ++c) {
    ClassStats& s = out[c];
    s.ce_loss = tracker.ce_loss[c];
    s.accuracy = tracker.accuracy[c];
    s.entropy = tracker.entropy[c];
    s.proto_cosine = tracker.cosine[c];
    if (tracker.trained) {
      double n2 = 0.0;
      for (std::size_t j = 0; j < f; ++j) n2 += pv[c * f + j] * pv[c * f + j];
      s.proto_norm = std::sqrt(n2);
    }
    if (tracker.mix_events > 0) {
      s.exposure = static_cast<double>(tracker.exposure_count[c]) / static_cast<double>(tracker.mix_events);
    }
  }
  return out;
}

}  // namespace classched::segenv
