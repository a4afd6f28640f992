// Copyright (c) 2026 The classched Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a flat, sectioned key=value file read with Boost.PropertyTree's INI
// parser. Every key is optional; configs/default.ini lists them all with defaults and units.

#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "classched/segenv.hpp"
#include "classched/skfen.hpp"
#include "classched/statecodec.hpp"

namespace classched::harness {

enum class SchedulerKind { heuscm, random, easy_to_hard, hard_only, fixed_order };

/// A scheduler name resolved into its kind plus the heuscm ablation switches.
struct Scheduler {
  SchedulerKind kind = SchedulerKind::heuscm;
  bool bypass_encoder = false;  // raw state -> trainable linear projection -> SKFEN
  bool bypass_skfen = false;    // key features = latent state
  bool alpha_zero = false;      // plain-sum policy objective
  std::string name = "heuscm";

  bool learned() const { return kind == SchedulerKind::heuscm; }
  bool uses_encoder() const { return learned() && !bypass_encoder; }

  static Scheduler parse(const std::string& name) {
    Scheduler s;
    s.name = name;
    if (name == "heuscm") return s;
    if (name == "heuscm-no-encoder") return s.bypass_encoder = true, s;
    if (name == "heuscm-no-skfen") return s.bypass_skfen = true, s;
    if (name == "heuscm-alpha0") return s.alpha_zero = true, s;
    if (name == "random") return s.kind = SchedulerKind::random, s;
    if (name == "easy_to_hard") return s.kind = SchedulerKind::easy_to_hard, s;
    if (name == "hard_only") return s.kind = SchedulerKind::hard_only, s;
    if (name == "fixed_order") return s.kind = SchedulerKind::fixed_order, s;
    throw std::invalid_argument("config: unknown scheduler '" + name +
                                "' (expected heuscm, heuscm-no-encoder, heuscm-no-skfen, heuscm-alpha0, random, "
                                "easy_to_hard, hard_only or fixed_order)");
  }
};

struct RunConfig {
  // [run]
  std::uint64_t seed = 0;
  std::size_t steps = 2000;          // T, environment steps including warmup
  std::size_t warmup = 200;          // W
  std::size_t agent_period = 10;     // U
  std::size_t agent_iters = 4;       // inner agent iterations per update
  std::size_t agent_batch = 32;
  std::size_t scenes_per_step = 4;
  std::size_t eval_scenes = 32;
  std::size_t flush_period = 100;    // steps between metrics flushes
  std::string scheduler = "heuscm";
  std::vector<int> fixed_order;      // empty: identity

  // [seg]
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double seg_lr = 0.05;
  double tau = 1.0;
  double init_scale = 0.1;
  segenv::PasteHalf paste_half = segenv::PasteHalf::low;

  // [reward]
  double reward_lambda = 1.0;

  // [agent]
  double alpha = 0.5;
  double gamma = 0.95;
  double epsilon = 1e-3;
  double policy_lr = 1e-3;
  double skfen_lr = 1e-3;
  double encoder_lr = 1e-3;
  double recon_lr = 1e-3;
  double critic_lr = 1e-2;
  double weight_decay = 0.0;
  std::size_t replay_capacity = 2000;
  std::size_t state_capacity = 2000;
  std::size_t pretrain_steps = 300;
  std::size_t pretrain_batch = 64;
  double pretrain_lr = 1e-2;

  segenv::EnvConfig env;  // env.seed unset in the file follows run.seed
  bool env_seed_explicit = false;
  skfen::SkfenConfig skfen;
  std::size_t gmvae_hidden = 64;
  std::size_t gmvae_components = 4;

  Scheduler resolved_scheduler() const { return Scheduler::parse(scheduler); }

  segenv::EnvConfig env_config() const {
    auto e = env;
    if (!env_seed_explicit) e.seed = seed;
    return e;
  }

  statecodec::GmvaeConfig gmvae_config() const {
    return {.state_dim = statecodec::kFieldsPerClass * env.classes,
            .hidden = gmvae_hidden,
            .components = gmvae_components,
            .latent_dim = skfen.latent_dim()};
  }

  diff::Shape latent_shape() const { return {skfen.channels, skfen.height, skfen.width}; }

  std::vector<int> fixed_ranking() const { return fixed_order.empty() ? identity_order(env.classes) : fixed_order; }

  double effective_alpha() const { return resolved_scheduler().alpha_zero ? 0.0 : alpha; }

  void validate() const {
    const auto sched = resolved_scheduler();
    auto positive = [](const char* key, double v) {
      if (!(v > 0.0)) throw std::invalid_argument(std::string("config: ") + key + " must be positive");
    };
    positive("seg.lr", seg_lr);
    positive("seg.tau", tau);
    positive("agent.policy_lr", policy_lr);
    positive("agent.skfen_lr", skfen_lr);
    positive("agent.encoder_lr", encoder_lr);
    positive("agent.recon_lr", recon_lr);
    positive("agent.critic_lr", critic_lr);
    positive("agent.pretrain_lr", pretrain_lr);
    positive("agent.epsilon", epsilon);
    if (steps < warmup) throw std::invalid_argument("config: run.steps must be >= run.warmup");
    if (agent_period < 1) throw std::invalid_argument("config: run.agent_period must be >= 1");
    if (!agent_batch || !scenes_per_step || !eval_scenes || !flush_period || !replay_capacity || !state_capacity) {
      throw std::invalid_argument("config: batch sizes, capacities and periods must be positive");
    }
    if (lambda1 < 0.0 || lambda2 < 0.0 || reward_lambda < 0.0) {
      throw std::invalid_argument("config: loss and reward coefficients must be nonnegative");
    }
    if (alpha < 0.0) throw std::invalid_argument("config: agent.alpha must be nonnegative");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw std::invalid_argument("config: agent.gamma must lie in [0,1)");
    if (sched.uses_encoder() && warmup == 0 && steps > 0) {
      throw std::invalid_argument("config: run.warmup must be >= 1 so the state encoder has a pretraining corpus");
    }
    if (sched.kind == SchedulerKind::fixed_order && !is_permutation_of_classes(fixed_ranking(), env.classes)) {
      throw std::invalid_argument("config: run.fixed_order must be a permutation of 0.." +
                                  std::to_string(env.classes - 1));
    }
    env_config().validate();
    skfen.validate();
    if (!gmvae_hidden || !gmvae_components) throw std::invalid_argument("config: gmvae extents must be positive");
  }
};

namespace detail {

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& key) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    const auto e = item.find_last_not_of(" \t");
    std::istringstream is(item.substr(b, e - b + 1));
    T v{};
    is >> v;
    if (is.fail() || !is.eof()) throw std::invalid_argument("config: bad list entry '" + item + "' for " + key);
    out.push_back(v);
  }
  return out;
}

class Reader {
 public:
  explicit Reader(const boost::property_tree::ptree& tree) : tree_(tree) {}

  template <typename T>
  void get(const std::string& key, T& dst) {
    known_.insert(key);
    const auto node = tree_.get_child_optional(boost::property_tree::ptree::path_type(key, '.'));
    if (!node) return;
    try {
      dst = node->get_value<T>();
    } catch (const boost::property_tree::ptree_bad_data&) {
      throw std::invalid_argument("config: cannot parse " + key + " = '" + node->data() + "'");
    }
  }

  std::optional<std::string> raw(const std::string& key) {
    known_.insert(key);
    const auto node = tree_.get_child_optional(boost::property_tree::ptree::path_type(key, '.'));
    if (!node) return std::nullopt;
    return node->data();
  }

  /// Unknown keys are errors, so a typo cannot silently fall back to a default.
  void reject_unknown() const {
    for (const auto& [section, body] : tree_) {
      if (body.empty()) throw std::invalid_argument("config: key '" + section + "' is outside any [section]");
      for (const auto& [key, _] : body) {
        if (!known_.count(section + "." + key)) {
          throw std::invalid_argument("config: unknown key '" + key + "' in [" + section + "]");
        }
      }
    }
  }

 private:
  const boost::property_tree::ptree& tree_;
  std::set<std::string> known_;
};

}  // namespace detail

inline RunConfig parse_config(std::istream& in, const std::string& origin = "<config>") {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw std::invalid_argument("config: " + origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  RunConfig c;
  detail::Reader r(tree);
  r.get("run.seed", c.seed);
  r.get("run.steps", c.steps);
  r.get("run.warmup", c.warmup);
  r.get("run.agent_period", c.agent_period);
  r.get("run.agent_iters", c.agent_iters);
  r.get("run.agent_batch", c.agent_batch);
  r.get("run.scenes_per_step", c.scenes_per_step);
  r.get("run.eval_scenes", c.eval_scenes);
  r.get("run.flush_period", c.flush_period);
  r.get("run.scheduler", c.scheduler);
  if (auto v = r.raw("run.fixed_order")) c.fixed_order = detail::parse_list<int>(*v, "run.fixed_order");

  r.get("seg.lambda1", c.lambda1);
  r.get("seg.lambda2", c.lambda2);
  r.get("seg.lr", c.seg_lr);
  r.get("seg.tau", c.tau);
  r.get("seg.init_scale", c.init_scale);
  if (auto v = r.raw("seg.paste_half")) {
    if (*v == "low") c.paste_half = segenv::PasteHalf::low;
    else if (*v == "high") c.paste_half = segenv::PasteHalf::high;
    else throw std::invalid_argument("config: seg.paste_half must be low or high, got '" + *v + "'");
  }

  r.get("reward.lambda", c.reward_lambda);

  r.get("agent.alpha", c.alpha);
  r.get("agent.gamma", c.gamma);
  r.get("agent.epsilon", c.epsilon);
  r.get("agent.policy_lr", c.policy_lr);
  r.get("agent.skfen_lr", c.skfen_lr);
  r.get("agent.encoder_lr", c.encoder_lr);
  r.get("agent.recon_lr", c.recon_lr);
  r.get("agent.critic_lr", c.critic_lr);
  r.get("agent.weight_decay", c.weight_decay);
  r.get("agent.replay_capacity", c.replay_capacity);
  r.get("agent.state_capacity", c.state_capacity);
  r.get("agent.pretrain_steps", c.pretrain_steps);
  r.get("agent.pretrain_batch", c.pretrain_batch);
  r.get("agent.pretrain_lr", c.pretrain_lr);

  r.get("env.classes", c.env.classes);
  r.get("env.feature_dim", c.env.feature_dim);
  r.get("env.height", c.env.height);
  r.get("env.width", c.env.width);
  if (auto v = r.raw("env.frequency_weights")) c.env.frequency_weights = detail::parse_list<double>(*v, "env.frequency_weights");
  r.get("env.severity", c.env.severity);
  r.get("env.noise", c.env.noise);
  r.get("env.mean_scale", c.env.mean_scale);
  r.get("env.domain_shift", c.env.domain_shift);
  r.get("env.rectangles", c.env.rectangles);
  if (r.raw("env.seed")) {
    r.get("env.seed", c.env.seed);
    c.env_seed_explicit = true;
  }

  r.get("skfen.channels", c.skfen.channels);
  r.get("skfen.expanded", c.skfen.expanded);
  r.get("skfen.groups", c.skfen.groups);
  r.get("skfen.height", c.skfen.height);
  r.get("skfen.width", c.skfen.width);

  r.get("gmvae.hidden", c.gmvae_hidden);
  r.get("gmvae.components", c.gmvae_components);

  r.reject_unknown();
  c.validate();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path.string());
  return parse_config(in, path.string());
}

/// The effective configuration in the same file format (every key spelled out).
inline std::string format_config(const RunConfig& c) {
  std::ostringstream os;
  os.precision(17);
  auto list = [](const auto& v) {
    std::ostringstream s;
    s.precision(17);
    for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
    return s.str();
  };
  os << "[run]\nseed = " << c.seed << "\nsteps = " << c.steps << "\nwarmup = " << c.warmup
     << "\nagent_period = " << c.agent_period << "\nagent_iters = " << c.agent_iters
     << "\nagent_batch = " << c.agent_batch << "\nscenes_per_step = " << c.scenes_per_step
     << "\neval_scenes = " << c.eval_scenes << "\nflush_period = " << c.flush_period
     << "\nscheduler = " << c.scheduler << "\nfixed_order = " << list(c.fixed_order) << "\n\n";
  os << "[seg]\nlambda1 = " << c.lambda1 << "\nlambda2 = " << c.lambda2 << "\nlr = " << c.seg_lr
     << "\ntau = " << c.tau << "\ninit_scale = " << c.init_scale
     << "\npaste_half = " << (c.paste_half == segenv::PasteHalf::low ? "low" : "high") << "\n\n";
  os << "[reward]\nlambda = " << c.reward_lambda << "\n\n";
  os << "[agent]\nalpha = " << c.alpha << "\ngamma = " << c.gamma << "\nepsilon = " << c.epsilon
     << "\npolicy_lr = " << c.policy_lr << "\nskfen_lr = " << c.skfen_lr << "\nencoder_lr = " << c.encoder_lr
     << "\nrecon_lr = " << c.recon_lr << "\ncritic_lr = " << c.critic_lr << "\nweight_decay = " << c.weight_decay
     << "\nreplay_capacity = " << c.replay_capacity << "\nstate_capacity = " << c.state_capacity
     << "\npretrain_steps = " << c.pretrain_steps << "\npretrain_batch = " << c.pretrain_batch
     << "\npretrain_lr = " << c.pretrain_lr << "\n\n";
  const auto e = c.env_config();
  os << "[env]\nclasses = " << e.classes << "\nfeature_dim = " << e.feature_dim << "\nheight = " << e.height
     << "\nwidth = " << e.width << "\nfrequency_weights = " << list(e.frequency_weights)
     << "\nseverity = " << e.severity << "\nnoise = " << e.noise << "\nmean_scale = " << e.mean_scale
     << "\ndomain_shift = " << e.domain_shift << "\nrectangles = " << e.rectangles << "\nseed = " << e.seed
     << "\n\n";
  os << "[skfen]\nchannels = " << c.skfen.channels << "\nexpanded = " << c.skfen.expanded
     << "\ngroups = " << c.skfen.groups << "\nheight = " << c.skfen.height << "\nwidth = " << c.skfen.width
     << "\n\n";
  os << "[gmvae]\nhidden = " << c.gmvae_hidden << "\ncomponents = " << c.gmvae_components << "\n";
  return os.str();
}

}  // namespace classched::harness
