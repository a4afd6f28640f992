// Copyright (c) 2026 The classched Authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end training loop: warmup under random rankings, GM-VAE pretraining on the
// collected states, then the interleaved segmentation/agent loop. Per environment step the
// trainer emits, in order: state, encode, distill, rank, mix, seg_update, reward, record
// (encode/distill only when the learned scheduler is acting), followed by any
// agent_update events.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "classched/diffcore/param_set.hpp"
#include "classched/harness/config.hpp"
#include "classched/harness/metrics.hpp"
#include "classched/policy.hpp"
#include "classched/reward.hpp"
#include "classched/segenv.hpp"
#include "classched/skfen.hpp"
#include "classched/statecodec.hpp"

namespace classched::harness {

/// A failure inside the loop, tagged with the step index and stage name.
class RunError : public std::runtime_error {
 public:
  RunError(std::size_t step, std::string stage, const std::string& what)
      : std::runtime_error("step " + std::to_string(step) + ", stage '" + stage + "': " + what),
        step_(step), stage_(std::move(stage)) {}
  std::size_t step() const { return step_; }
  const std::string& stage() const { return stage_; }

 private:
  std::size_t step_;
  std::string stage_;
};

struct RunReport {
  std::string scheduler;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  segenv::EvalReport eval;
  std::size_t transitions = 0;
  std::size_t agent_updates = 0;
  double wall_seconds = 0.0;
};

inline nlohmann::json report_json(const RunReport& r) {
  nlohmann::json acc = nlohmann::json::array();
  for (const auto& a : r.eval.class_accuracy) acc.push_back(a ? nlohmann::json(*a) : nlohmann::json(nullptr));
  return {{"scheduler", r.scheduler},         {"seed", r.seed},
          {"steps", r.steps},                 {"mean_accuracy", r.eval.mean_accuracy},
          {"accuracy_std", r.eval.accuracy_std}, {"class_accuracy", acc},
          {"transitions", r.transitions},     {"agent_updates", r.agent_updates},
          {"wall_seconds", r.wall_seconds}};
}

namespace stream {
inline constexpr std::uint64_t scenes = 1, policy = 2, replay = 3, agent = 4, init = 5, eval = 6;
}

class Trainer {
 public:
  Trainer(const RunConfig& cfg, MetricsSink& sink) : Trainer(cfg, sink, true) {}

  /// Continues a run from a checkpoint written by save_checkpoint with the same config.
  static std::unique_ptr<Trainer> resume(const RunConfig& cfg, MetricsSink& sink, const std::filesystem::path& base) {
    auto archive = diff::load_archive(base);
    std::unique_ptr<Trainer> t(new Trainer(cfg, sink, false));
    t->restore(archive);
    return t;
  }

  const RunConfig& config() const { return cfg_; }
  std::size_t step() const { return t_; }
  bool finished() const { return t_ >= cfg_.steps; }
  const segenv::ToyLearner& learner() const { return learner_; }
  const std::vector<statecodec::HighDimState>& pretrain_corpus() const { return corpus_; }
  const policy::ReplayBuffer& replay() const { return replay_; }
  std::size_t agent_updates() const { return agent_updates_; }
  const policy::FairnessConfig& fairness() const { return fair_; }

  /// Checksum over every scheduler-side parameter set (policy, critics, SKFEN, encoders).
  std::uint64_t agent_fingerprint() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const diff::ParamSet* p : {&head_, &critics_.params, &skfen_, &gmvae_.encoder, &gmvae_.decoder, &clone_,
                                    &projection_}) {
      h = (h ^ p->fingerprint()) * 1099511628211ULL;
    }
    return h;
  }

  /// Runs up to `n` more environment steps (fewer if the run ends first).
  void advance(std::size_t n) {
    for (std::size_t i = 0; i < n && !finished(); ++i) step_once();
  }

  void run() { advance(cfg_.steps - t_); }

  /// Held-out evaluation; emits the closing "eval" event and flushes the stream.
  RunReport finish() {
    const auto ev = stage("eval", [&] { return segenv::evaluate(learner_, eval_scenes_); });
    MetricsEvent e{t_, "eval", {{"mean_accuracy", ev.mean_accuracy}, {"accuracy_std", ev.accuracy_std}}};
    for (std::size_t c = 0; c < ev.class_accuracy.size(); ++c) {
      if (ev.class_accuracy[c]) e.fields["acc." + std::to_string(c)] = *ev.class_accuracy[c];
    }
    sink_->emit(e);
    sink_->flush();
    RunReport r;
    r.scheduler = cfg_.scheduler;
    r.seed = cfg_.seed;
    r.steps = t_;
    r.eval = ev;
    r.transitions = replay_.transitions.size();
    r.agent_updates = agent_updates_;
    return r;
  }

  diff::Archive checkpoint() const;
  /// Scheduler name and seed a checkpoint was written for.
  static std::pair<std::string, std::uint64_t> checkpoint_identity(const std::filesystem::path& base) {
    const auto a = diff::load_archive(base);
    const auto sched = a.header.find("scheduler"), seed = a.header.find("seed");
    if (sched == a.header.end() || seed == a.header.end()) throw std::runtime_error("checkpoint: missing identity");
    return {sched->second, std::stoull(seed->second)};
  }
  void save_checkpoint(const std::filesystem::path& base) const { diff::save_archive(base, checkpoint()); }

 private:
  Trainer(const RunConfig& cfg, MetricsSink& sink, bool fresh)
      : cfg_(cfg), sched_(cfg.resolved_scheduler()), sink_(&sink), world_(segenv::World::make(cfg.env_config())),
        scene_rng_(Rng::stream(cfg.seed, stream::scenes)), policy_rng_(Rng::stream(cfg.seed, stream::policy)),
        replay_rng_(Rng::stream(cfg.seed, stream::replay)), agent_rng_(Rng::stream(cfg.seed, stream::agent)),
        tracker_(cfg.env.classes), replay_(cfg.replay_capacity, cfg.state_capacity) {
    cfg_.validate();
    const std::size_t cn = cfg.env.classes, latent = cfg.skfen.latent_dim();
    Rng init = Rng::stream(cfg.seed, stream::init);
    learner_ = segenv::ToyLearner::make(cn, cfg.env.feature_dim, cfg.tau, init, cfg.init_scale);
    gmvae_ = statecodec::Gmvae::init(cfg.gmvae_config(), init);
    clone_ = gmvae_.encoder.clone();
    skfen_ = skfen::init_params(cfg.skfen, init);
    projection_ = statecodec::init_projection(cfg.gmvae_config().state_dim, latent, init);
    head_ = policy::init_policy_head(latent, cn);
    critics_ = policy::CriticBank::make(latent, cn, cfg.gamma);
    fair_ = policy::FairnessConfig::from_reward_bounds(cfg.reward_lambda, cn, cfg.effective_alpha(), cfg.epsilon);
    Rng eval = Rng::stream(cfg.seed, stream::eval);
    for (std::size_t i = 0; i < cfg.eval_scenes; ++i) eval_scenes_.push_back(segenv::generate_scene(world_, eval));
    if (fresh) {
      sink_->emit({0,
                   "setup",
                   {{"classes", double(cn)},
                    {"alpha", fair_.alpha},
                    {"epsilon", fair_.epsilon},
                    {"gamma", cfg.gamma},
                    {"reward_shift", fair_.shift()},
                    {"reward_scale", fair_.scale()},
                    {"steps", double(cfg.steps)},
                    {"warmup", double(cfg.warmup)}}});
    }
  }

  template <typename F>
  auto stage(const char* name, F&& fn) -> decltype(fn()) {
    try {
      return fn();
    } catch (const RunError&) {
      throw;
    } catch (const std::exception& e) {
      throw RunError(t_, name, e.what());
    }
  }

  void emit(const std::string& kind, std::map<std::string, double> fields) {
    sink_->emit({t_, kind, std::move(fields)});
  }

  statecodec::HighDimState observe() const {
    return statecodec::assemble_state(segenv::snapshot_stats(learner_, tracker_));
  }

  diff::Tensor latent(const statecodec::HighDimState& s) const {
    if (sched_.bypass_encoder) return statecodec::project_state(s, projection_, cfg_.latent_shape());
    return statecodec::encode(s, clone_, gmvae_.cfg, statecodec::EncodeMode::deterministic, cfg_.latent_shape()).latent;
  }

  diff::Tensor key_features(const diff::Tensor& z) const {
    return sched_.bypass_skfen ? z : skfen::skfen_forward(z, cfg_.skfen, skfen_);
  }

  static double norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  }

  ClassRanking baseline_ranking(const statecodec::HighDimState& s, bool warm) {
    const std::size_t cn = cfg_.env.classes;
    if (warm || sched_.kind == SchedulerKind::random) {
      return policy::sample_plackett_luce(std::vector<double>(cn, 0.0), policy_rng_);
    }
    ClassRanking r;
    if (sched_.kind == SchedulerKind::fixed_order) {
      r.order = cfg_.fixed_ranking();
      return r;
    }
    r.order = identity_order(cn);
    const bool descending = sched_.kind == SchedulerKind::easy_to_hard;
    std::stable_sort(r.order.begin(), r.order.end(), [&](int a, int b) {
      const double fa = s.field(a, 1), fb = s.field(b, 1);
      return descending ? fa > fb : fa < fb;
    });
    return r;
  }

  void step_once() {
    const std::size_t cn = cfg_.env.classes;
    const bool warm = sched_.learned() && t_ < cfg_.warmup;
    const bool acting = sched_.learned() && !warm;

    const auto s = stage("state", [&] { return observe(); });
    replay_.states.push(s);
    if (t_ < cfg_.warmup) corpus_.push_back(s);
    {
      std::map<std::string, double> f;
      for (std::size_t c = 0; c < cn; ++c) f["acc." + std::to_string(c)] = s.field(c, 1);
      double ce = 0.0;
      for (std::size_t c = 0; c < cn; ++c) ce += s.field(c, 0) / double(cn);
      f["mean_ce"] = ce;
      emit("state", std::move(f));
    }

    ClassRanking ranking;
    std::vector<double> key;
    if (acting) {
      diff::NoGradGuard no_grad;
      const auto z = stage("encode", [&] { return latent(s); });
      emit("encode", {{"z_norm", norm(z.values())}});
      const auto zk = stage("distill", [&] { return key_features(z); });
      key.assign(zk.values().begin(), zk.values().end());
      emit("distill", {{"key_norm", norm(key)}});
      ranking = stage("rank", [&] { return policy::sample_ranking(zk, head_, policy_rng_); });
    } else {
      ranking = stage("rank", [&] { return baseline_ranking(s, warm); });
    }
    {
      std::map<std::string, double> f{{"log_prob", ranking.log_prob}};
      for (std::size_t i = 0; i < cn; ++i) f["rank." + std::to_string(i)] = ranking.order[i];
      emit("rank", std::move(f));
    }

    std::vector<segenv::Scene> scenes;
    std::vector<segenv::MixedPair> mixed;
    stage("mix", [&] {
      std::vector<double> pasted(cn, 0.0);
      double frac = 0.0;
      for (std::size_t i = 0; i < cfg_.scenes_per_step; ++i) {
        scenes.push_back(segenv::generate_scene(world_, scene_rng_));
        const auto mask = segenv::build_mix_mask(ranking.order, scenes.back().source_labels, cfg_.paste_half);
        tracker_.record_mix(mask);
        for (int c : mask.pasted) pasted[c] += 1.0;
        frac += std::accumulate(mask.paste.begin(), mask.paste.end(), 0.0) /
                double(mask.paste.size() * cfg_.scenes_per_step);
        mixed.push_back(segenv::mix_pair(scenes.back(), mask, learner_));
      }
      std::map<std::string, double> f{{"paste_fraction", frac}};
      for (std::size_t c = 0; c < cn; ++c) f["pasted." + std::to_string(c)] = pasted[c];
      emit("mix", std::move(f));
      return 0;
    });

    segenv::SegBatchView batch;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      batch.scenes.push_back(&scenes[i]);
      batch.mixed.push_back(&mixed[i]);
    }
    const auto seg = stage("seg_update", [&] {
      return segenv::seg_loss_and_update(batch, learner_, cfg_.lambda1, cfg_.lambda2, cfg_.seg_lr);
    });
    tracker_.record_seg(seg);
    emit("seg_update", {{"loss", seg.loss}, {"source_loss", seg.source_loss}, {"mixed_loss", seg.mixed_loss}});

    const auto mapped = stage("reward", [&] {
      reward::PrototypeAccumulator src(cn, cfg_.env.feature_dim, reward::Domain::source);
      reward::PrototypeAccumulator tgt(cn, cfg_.env.feature_dim, reward::Domain::target);
      std::vector<const segenv::FeatureMap*> targets;
      for (const auto& sc : scenes) {
        src.add(sc.source, sc.source_labels);
        tgt.add(sc.target, learner_.predict(sc.target));
        targets.push_back(&sc.target);
      }
      const auto rv = reward::class_reward(src.finish(), tgt.finish(), cfg_.reward_lambda);
      tracker_.record_target(learner_, targets);
      tracker_.record_cosines(rv.transferability);
      auto m = fair_.map_rewards(rv);
      std::map<std::string, double> f;
      double defined = 0.0;
      for (std::size_t c = 0; c < cn; ++c) {
        f["r." + std::to_string(c)] = rv.r[c];
        f["rt." + std::to_string(c)] = m[c];
        defined += rv.defined[c] ? 1.0 : 0.0;
      }
      f["defined"] = defined;
      emit("reward", std::move(f));
      return m;
    });

    stage("record", [&] {
      if (acting) {
        diff::NoGradGuard no_grad;
        const auto s_next = observe();
        const auto k_next = key_features(latent(s_next));
        replay_.transitions.push({key, ranking, mapped, {k_next.values().begin(), k_next.values().end()}, s, s_next});
      }
      emit("record", {{"replay_size", double(replay_.transitions.size())},
                      {"state_size", double(replay_.states.size())}});
      return 0;
    });

    const std::size_t done = t_ + 1;
    if (acting && (done - cfg_.warmup) % cfg_.agent_period == 0 && replay_.transitions.size() >= cfg_.agent_batch) {
      stage("agent_update", [&] { return agent_update(), 0; });
    }
    if (sched_.uses_encoder() && !pretrained_ && done == cfg_.warmup && done < cfg_.steps) {
      stage("pretrain", [&] { return pretrain(), 0; });
    }
    t_ = done;
    if (t_ % cfg_.flush_period == 0 || finished()) sink_->flush();
  }

  void pretrain() {
    const statecodec::PretrainOptions opt{cfg_.pretrain_steps, cfg_.pretrain_batch, cfg_.pretrain_lr, cfg_.weight_decay};
    const auto trace = statecodec::pretrain_gmvae(gmvae_, corpus_, opt, agent_rng_);
    clone_ = gmvae_.encoder.clone();
    pretrained_ = true;
    std::map<std::string, double> f{{"corpus", double(corpus_.size())}};
    if (!trace.loss.empty()) {
      f["initial_loss"] = trace.loss.front();
      f["final_loss"] = trace.loss.back();
      f["min_kl_gauss"] = trace.min_kl_gauss;
      f["min_kl_cat"] = trace.min_kl_cat;
    }
    emit("pretrain", std::move(f));
  }

  void agent_update() {
    std::vector<policy::Trainable> trainables{{&head_, cfg_.policy_lr}};
    if (!sched_.bypass_skfen) trainables.push_back({&skfen_, cfg_.skfen_lr});
    trainables.push_back({sched_.bypass_encoder ? &projection_ : &clone_, cfg_.encoder_lr});
    const policy::LogitsFn logits = [this](const policy::TransitionRecord& rec) {
      return policy::policy_logits(key_features(latent(rec.state)), head_);
    };
    for (std::size_t it = 0; it < cfg_.agent_iters; ++it) {
      const auto batch = replay_.transitions.sample(cfg_.agent_batch, replay_rng_);
      const auto rep =
          policy::policy_gradient_update(batch, logits, trainables, critics_, fair_, cfg_.critic_lr, cfg_.weight_decay);
      std::map<std::string, double> f{{"surrogate", rep.surrogate},
                                      {"aggregate_advantage", rep.mean_aggregate_advantage},
                                      {"critic_loss", rep.critic_loss},
                                      {"grad_norm", rep.grad_norm}};
      if (!sched_.bypass_encoder) {
        const auto states = replay_.states.sample(std::min(cfg_.agent_batch, replay_.states.size()), replay_rng_);
        clone_.zero_grad();
        auto loss = statecodec::recon_loss(states, clone_, gmvae_.decoder, gmvae_.cfg);
        f["recon_loss"] = loss.item();
        loss.backward();
        diff::sgd_step(clone_, cfg_.recon_lr, cfg_.weight_decay);
      }
      for (std::size_t c = 0; c < rep.mean_weights.size(); ++c) {
        f["w." + std::to_string(c)] = rep.mean_weights[c];
        f["v." + std::to_string(c)] = rep.mean_values[c];
      }
      ++agent_updates_;
      emit("agent_update", std::move(f));
    }
  }

  void restore(const diff::Archive& a);

  RunConfig cfg_;
  Scheduler sched_;
  MetricsSink* sink_;
  segenv::World world_;
  Rng scene_rng_, policy_rng_, replay_rng_, agent_rng_;
  segenv::ToyLearner learner_;
  segenv::StatsTracker tracker_;
  statecodec::Gmvae gmvae_;
  diff::ParamSet clone_, skfen_, projection_, head_;
  policy::CriticBank critics_;
  policy::FairnessConfig fair_;
  policy::ReplayBuffer replay_;
  std::vector<segenv::Scene> eval_scenes_;
  std::vector<statecodec::HighDimState> corpus_;
  std::size_t t_ = 0;
  std::size_t agent_updates_ = 0;
  bool pretrained_ = false;
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace detail {

inline diff::Tensor rows_tensor(const std::vector<std::vector<double>>& rows, std::size_t width) {
  std::vector<double> v;
  v.reserve(rows.size() * width);
  for (const auto& r : rows) {
    if (r.size() != width) throw std::logic_error("checkpoint: ragged rows");
    v.insert(v.end(), r.begin(), r.end());
  }
  return diff::Tensor::from({rows.size(), width}, std::move(v));
}

inline std::vector<std::vector<double>> tensor_rows(const diff::Archive& a, const std::string& path, std::size_t n,
                                                    std::size_t width) {
  const diff::Tensor* t = a.find(path);
  if (!t) throw std::runtime_error("checkpoint: missing tensor '" + path + "'");
  if (t->shape() != diff::Shape{n, width}) {
    throw std::runtime_error("checkpoint: shape mismatch at '" + path + "': " + diff::shape_str(t->shape()) +
                             " vs expected " + diff::shape_str({n, width}));
  }
  std::vector<std::vector<double>> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i].assign(t->values().begin() + i * width, t->values().begin() + (i + 1) * width);
  return out;
}

inline void put_optionals(diff::Archive& a, const std::string& path, const std::vector<std::optional<double>>& v) {
  std::vector<double> val(v.size(), 0.0), mask(v.size(), 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i]) val[i] = *v[i], mask[i] = 1.0;
  }
  a.tensors.emplace_back(path, diff::Tensor::from({1, v.size()}, val));
  a.tensors.emplace_back(path + ".mask", diff::Tensor::from({1, v.size()}, mask));
}

inline void get_optionals(const diff::Archive& a, const std::string& path, std::vector<std::optional<double>>& v) {
  const auto val = tensor_rows(a, path, 1, v.size())[0];
  const auto mask = tensor_rows(a, path + ".mask", 1, v.size())[0];
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = mask[i] != 0.0 ? std::optional<double>(val[i]) : std::nullopt;
}

inline const std::string& header(const diff::Archive& a, const std::string& key) {
  const auto it = a.header.find(key);
  if (it == a.header.end()) throw std::runtime_error("checkpoint: missing header entry '" + key + "'");
  return it->second;
}

}  // namespace detail

inline diff::Archive Trainer::checkpoint() const {
  const std::size_t cn = cfg_.env.classes, sd = gmvae_.cfg.state_dim, kd = cfg_.skfen.latent_dim();
  diff::Archive a;
  a.header["format"] = "classched-trainer v1";
  a.header["scheduler"] = cfg_.scheduler;
  a.header["seed"] = std::to_string(cfg_.seed);
  a.header["step"] = std::to_string(t_);
  a.header["agent_updates"] = std::to_string(agent_updates_);
  a.header["pretrained"] = pretrained_ ? "1" : "0";
  a.header["tracker.mix_events"] = std::to_string(tracker_.mix_events);
  a.header["tracker.trained"] = tracker_.trained ? "1" : "0";
  a.header["rng.scenes"] = scene_rng_.state();
  a.header["rng.policy"] = policy_rng_.state();
  a.header["rng.replay"] = replay_rng_.state();
  a.header["rng.agent"] = agent_rng_.state();
  a.header["replay.count"] = std::to_string(replay_.transitions.size());
  a.header["states.count"] = std::to_string(replay_.states.size());
  a.header["corpus.count"] = std::to_string(corpus_.size());

  diff::append_params(a, "learner.", learner_.params);
  diff::append_params(a, "gmvae.encoder.", gmvae_.encoder);
  diff::append_params(a, "gmvae.decoder.", gmvae_.decoder);
  diff::append_params(a, "encoder_clone.", clone_);
  diff::append_params(a, "skfen.", skfen_);
  diff::append_params(a, "projection.", projection_);
  diff::append_params(a, "policy.", head_);
  diff::append_params(a, "critics.", critics_.params);

  detail::put_optionals(a, "tracker.ce_loss", tracker_.ce_loss);
  detail::put_optionals(a, "tracker.accuracy", tracker_.accuracy);
  detail::put_optionals(a, "tracker.entropy", tracker_.entropy);
  detail::put_optionals(a, "tracker.cosine", tracker_.cosine);
  std::vector<double> exposure(tracker_.exposure_count.begin(), tracker_.exposure_count.end());
  a.tensors.emplace_back("tracker.exposure_count", diff::Tensor::from({1, cn}, exposure));

  auto states_rows = [](auto&& get, std::size_t n) {
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < n; ++i) rows.push_back(get(i));
    return rows;
  };
  if (!corpus_.empty()) {
    a.tensors.emplace_back("corpus", detail::rows_tensor(states_rows([&](std::size_t i) { return corpus_[i].values; },
                                                                     corpus_.size()), sd));
  }
  if (const std::size_t n = replay_.states.size()) {
    a.tensors.emplace_back("states", detail::rows_tensor(
                                         states_rows([&](std::size_t i) { return replay_.states.at(i).values; }, n), sd));
  }
  if (const std::size_t n = replay_.transitions.size()) {
    const auto& tr = replay_.transitions;
    auto rows = [&](auto&& get) { return states_rows([&](std::size_t i) { return get(tr.at(i)); }, n); };
    using Rec = policy::TransitionRecord;
    a.tensors.emplace_back("replay.z_key", detail::rows_tensor(rows([](const Rec& r) { return r.z_key; }), kd));
    a.tensors.emplace_back("replay.z_key_next", detail::rows_tensor(rows([](const Rec& r) { return r.z_key_next; }), kd));
    a.tensors.emplace_back("replay.reward", detail::rows_tensor(rows([](const Rec& r) { return r.reward; }), cn));
    a.tensors.emplace_back("replay.order", detail::rows_tensor(rows([](const Rec& r) {
                                                                 return std::vector<double>(r.ranking.order.begin(),
                                                                                            r.ranking.order.end());
                                                               }),
                                                               cn));
    a.tensors.emplace_back("replay.log_prob", detail::rows_tensor(rows([](const Rec& r) {
                                                                    return std::vector<double>{r.ranking.log_prob};
                                                                  }),
                                                                  1));
    a.tensors.emplace_back("replay.logits", detail::rows_tensor(rows([](const Rec& r) { return r.ranking.logits; }), cn));
    a.tensors.emplace_back("replay.state", detail::rows_tensor(rows([](const Rec& r) { return r.state.values; }), sd));
    a.tensors.emplace_back("replay.next_state",
                           detail::rows_tensor(rows([](const Rec& r) { return r.next_state.values; }), sd));
  }
  return a;
}

inline void Trainer::restore(const diff::Archive& a) {
  if (detail::header(a, "format") != "classched-trainer v1") throw std::runtime_error("checkpoint: unknown format");
  if (detail::header(a, "scheduler") != cfg_.scheduler || detail::header(a, "seed") != std::to_string(cfg_.seed)) {
    throw std::runtime_error("checkpoint: written for scheduler '" + detail::header(a, "scheduler") + "', seed " +
                             detail::header(a, "seed") + "; config asks for '" + cfg_.scheduler + "', seed " +
                             std::to_string(cfg_.seed));
  }
  const std::size_t cn = cfg_.env.classes, sd = gmvae_.cfg.state_dim, kd = cfg_.skfen.latent_dim();
  const std::size_t step = std::stoull(detail::header(a, "step"));
  if (step > cfg_.steps) throw std::runtime_error("checkpoint: step " + std::to_string(step) + " beyond run.steps");

  // Stage everything into copies first so a bad archive leaves this trainer untouched.
  auto learner = learner_.params.clone(), enc = gmvae_.encoder.clone(), dec = gmvae_.decoder.clone(),
       clone = clone_.clone(), sk = skfen_.clone(), proj = projection_.clone(), head = head_.clone(),
       critics = critics_.params.clone();
  diff::restore_params(a, "learner.", learner);
  diff::restore_params(a, "gmvae.encoder.", enc);
  diff::restore_params(a, "gmvae.decoder.", dec);
  diff::restore_params(a, "encoder_clone.", clone);
  diff::restore_params(a, "skfen.", sk);
  diff::restore_params(a, "projection.", proj);
  diff::restore_params(a, "policy.", head);
  diff::restore_params(a, "critics.", critics);

  segenv::StatsTracker tracker(cn);
  detail::get_optionals(a, "tracker.ce_loss", tracker.ce_loss);
  detail::get_optionals(a, "tracker.accuracy", tracker.accuracy);
  detail::get_optionals(a, "tracker.entropy", tracker.entropy);
  detail::get_optionals(a, "tracker.cosine", tracker.cosine);
  for (std::size_t c = 0; c < cn; ++c) {
    tracker.exposure_count[c] = static_cast<std::uint64_t>(detail::tensor_rows(a, "tracker.exposure_count", 1, cn)[0][c]);
  }
  tracker.mix_events = std::stoull(detail::header(a, "tracker.mix_events"));
  tracker.trained = detail::header(a, "tracker.trained") == "1";

  auto to_states = [](const std::vector<std::vector<double>>& rows) {
    std::vector<statecodec::HighDimState> out;
    for (const auto& r : rows) out.push_back({r});
    return out;
  };
  const std::size_t n_corpus = std::stoull(detail::header(a, "corpus.count"));
  const std::size_t n_states = std::stoull(detail::header(a, "states.count"));
  const std::size_t n_replay = std::stoull(detail::header(a, "replay.count"));
  const auto corpus = n_corpus ? to_states(detail::tensor_rows(a, "corpus", n_corpus, sd)) : decltype(corpus_){};
  policy::ReplayBuffer replay(cfg_.replay_capacity, cfg_.state_capacity);
  if (n_states) {
    for (auto& s : to_states(detail::tensor_rows(a, "states", n_states, sd))) replay.states.push(std::move(s));
  }
  if (n_replay) {
    const auto zk = detail::tensor_rows(a, "replay.z_key", n_replay, kd);
    const auto zn = detail::tensor_rows(a, "replay.z_key_next", n_replay, kd);
    const auto rw = detail::tensor_rows(a, "replay.reward", n_replay, cn);
    const auto od = detail::tensor_rows(a, "replay.order", n_replay, cn);
    const auto lp = detail::tensor_rows(a, "replay.log_prob", n_replay, 1);
    const auto lg = detail::tensor_rows(a, "replay.logits", n_replay, cn);
    const auto st = to_states(detail::tensor_rows(a, "replay.state", n_replay, sd));
    const auto ns = to_states(detail::tensor_rows(a, "replay.next_state", n_replay, sd));
    for (std::size_t i = 0; i < n_replay; ++i) {
      ClassRanking r{{od[i].begin(), od[i].end()}, lp[i][0], lg[i]};
      if (!is_permutation_of_classes(r.order, cn)) throw std::runtime_error("checkpoint: corrupt ranking in replay");
      replay.transitions.push({zk[i], r, rw[i], zn[i], st[i], ns[i]});
    }
  }
  Rng scenes, pol, rep, agent;
  scenes.restore(detail::header(a, "rng.scenes"));
  pol.restore(detail::header(a, "rng.policy"));
  rep.restore(detail::header(a, "rng.replay"));
  agent.restore(detail::header(a, "rng.agent"));

  learner_.params = std::move(learner);
  gmvae_.encoder = std::move(enc);
  gmvae_.decoder = std::move(dec);
  clone_ = std::move(clone);
  skfen_ = std::move(sk);
  projection_ = std::move(proj);
  head_ = std::move(head);
  critics_.params = std::move(critics);
  tracker_ = std::move(tracker);
  corpus_ = corpus;
  replay_ = std::move(replay);
  scene_rng_ = scenes;
  policy_rng_ = pol;
  replay_rng_ = rep;
  agent_rng_ = agent;
  t_ = step;
  agent_updates_ = std::stoull(detail::header(a, "agent_updates"));
  pretrained_ = detail::header(a, "pretrained") == "1";
}

// ---------------------------------------------------------------------------
// Whole runs
// ---------------------------------------------------------------------------

/// Runs one configuration to completion. With an output directory, writes config.ini,
/// metrics.txt, checkpoint.{manifest,bin} and report.json there.
/// A nonzero `checkpoint_every` also rewrites the checkpoint every that many steps.
inline RunReport run_training(const RunConfig& cfg, const std::filesystem::path& out_dir = {},
                              const std::filesystem::path& resume_from = {}, std::size_t checkpoint_every = 0) {
  const auto start = std::chrono::steady_clock::now();
  std::unique_ptr<MetricsSink> sink;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir / "config.ini") << format_config(cfg);
    sink = std::make_unique<MetricsSink>(out_dir / "metrics.txt");
  } else {
    sink = std::make_unique<MetricsSink>();
  }
  std::unique_ptr<Trainer> trainer =
      resume_from.empty() ? std::make_unique<Trainer>(cfg, *sink) : Trainer::resume(cfg, *sink, resume_from);
  if (checkpoint_every && !out_dir.empty()) {
    while (!trainer->finished()) {
      trainer->advance(checkpoint_every);
      trainer->save_checkpoint(out_dir / "checkpoint");
    }
  }
  trainer->run();
  auto report = trainer->finish();
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!out_dir.empty()) {
    trainer->save_checkpoint(out_dir / "checkpoint");
    sink->close();
    std::ofstream(out_dir / "report.json") << report_json(report).dump(2) << '\n';
  }
  return report;
}

}  // namespace classched::harness
