// Copyright (c) 2026 The classched Authors
// SPDX-License-Identifier: Apache-2.0
//
// Learning-state vector assembly and its Gaussian-mixture VAE compression.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "classched/diffcore/ops.hpp"
#include "classched/diffcore/param_set.hpp"
#include "classched/rng.hpp"
#include "classched/types.hpp"

namespace classched::statecodec {

inline constexpr std::size_t kFieldsPerClass = 6;

/// Per class, in order: CE loss, accuracy proxy, prototype norm, prototype cosine, entropy, exposure.
struct HighDimState {
  std::vector<double> values;

  std::size_t classes() const { return values.size() / kFieldsPerClass; }
  std::size_t size() const { return values.size(); }
  double field(std::size_t c, std::size_t f) const { return values[c * kFieldsPerClass + f]; }
  bool operator==(const HighDimState&) const = default;
};

/// Missing observations take the untrained defaults: loss=log C, accuracy=0, norm=0,
/// cosine=0, entropy=log C, exposure=0.
inline HighDimState assemble_state(const EnvStats& stats) {
  const std::size_t cn = stats.size();
  if (cn == 0) throw std::invalid_argument("assemble_state: no classes");
  const double log_c = std::log(static_cast<double>(cn));
  const double defaults[kFieldsPerClass] = {log_c, 0.0, 0.0, 0.0, log_c, 0.0};
  HighDimState s;
  s.values.resize(cn * kFieldsPerClass);
  for (std::size_t c = 0; c < cn; ++c) {
    const ClassStats& cs = stats[c];
    const std::optional<double> fields[kFieldsPerClass] = {cs.ce_loss, cs.accuracy, cs.proto_norm,
                                                           cs.proto_cosine, cs.entropy, cs.exposure};
    for (std::size_t f = 0; f < kFieldsPerClass; ++f) {
      double v = fields[f].value_or(defaults[f]);
      if (!std::isfinite(v)) {
        throw std::invalid_argument("assemble_state: non-finite " + std::string(kStatFieldNames[f]) + " for class " +
                                    std::to_string(c));
      }
      if (f == 1 || f == 5) v = std::clamp(v, 0.0, 1.0);
      if (f == 3) v = std::clamp(v, -1.0, 1.0);
      s.values[c * kFieldsPerClass + f] = v;
    }
  }
  return s;
}

/// Stacks states into a (B, 6C) matrix.
inline diff::Tensor state_matrix(std::span<const HighDimState> states) {
  if (states.empty()) throw std::invalid_argument("state_matrix: empty batch");
  const std::size_t d = states.front().size();
  std::vector<double> v;
  v.reserve(states.size() * d);
  for (const auto& s : states) {
    if (s.size() != d) throw std::invalid_argument("state_matrix: states differ in length");
    v.insert(v.end(), s.values.begin(), s.values.end());
  }
  return diff::Tensor::from({states.size(), d}, std::move(v));
}

struct GmvaeConfig {
  std::size_t state_dim = 48;
  std::size_t hidden = 64;
  std::size_t components = 4;  // K
  std::size_t latent_dim = 128;
};

namespace detail {

inline diff::Tensor uniform_init(diff::Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(diff::shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return diff::Tensor::from(std::move(shape), std::move(v));
}

}  // namespace detail

/// Encoder: shared ReLU trunk, categorical head over K components, per-component mean and
/// log-variance heads. Decoder: one ReLU hidden layer back to the state. Priors: uniform
/// p(c), p(z|c) = N(m_c, I) with the m_c stored in the decoder set as "prior.means".
struct Gmvae {
  GmvaeConfig cfg;
  diff::ParamSet encoder;
  diff::ParamSet decoder;

  static Gmvae init(const GmvaeConfig& cfg, Rng& rng) {
    if (cfg.components == 0) throw std::invalid_argument("gmvae: component count K must be positive");
    if (!cfg.state_dim || !cfg.hidden || !cfg.latent_dim) throw std::invalid_argument("gmvae: extents must be positive");
    Gmvae m;
    m.cfg = cfg;
    const std::size_t d = cfg.state_dim, h = cfg.hidden, k = cfg.components, z = cfg.latent_dim;
    m.encoder.add("trunk.weight", detail::uniform_init({h, d}, d, rng));
    m.encoder.add("trunk.bias", diff::Tensor::zeros({h}));
    m.encoder.add("cat.weight", detail::uniform_init({k, h}, h, rng));
    m.encoder.add("cat.bias", diff::Tensor::zeros({k}));
    m.encoder.add("mu.weight", detail::uniform_init({k * z, h}, h, rng));
    m.encoder.add("mu.bias", diff::Tensor::zeros({k * z}));
    m.encoder.add("logvar.weight", detail::uniform_init({k * z, h}, h, rng));
    m.encoder.add("logvar.bias", diff::Tensor::zeros({k * z}));
    m.decoder.add("hidden.weight", detail::uniform_init({h, z}, z, rng));
    m.decoder.add("hidden.bias", diff::Tensor::zeros({h}));
    m.decoder.add("out.weight", detail::uniform_init({d, h}, h, rng));
    m.decoder.add("out.bias", diff::Tensor::zeros({d}));
    std::vector<double> means(k * z);
    for (auto& v : means) v = 0.5 * rng.normal();
    m.decoder.add("prior.means", diff::Tensor::from({1, k * z}, std::move(means)));
    return m;
  }
};

struct EncoderOutput {
  diff::Tensor cat_logits;  // (B,K)
  diff::Tensor mu;          // (B,K·d)
  diff::Tensor logvar;      // (B,K·d); undefined when not requested
};

inline EncoderOutput encoder_forward(const diff::ParamSet& enc, const diff::Tensor& states, bool with_logvar = true) {
  auto h = diff::relu(diff::linear(states, enc.at("trunk.weight"), enc.at("trunk.bias")));
  EncoderOutput o;
  o.cat_logits = diff::linear(h, enc.at("cat.weight"), enc.at("cat.bias"));
  o.mu = diff::linear(h, enc.at("mu.weight"), enc.at("mu.bias"));
  if (with_logvar) o.logvar = diff::linear(h, enc.at("logvar.weight"), enc.at("logvar.bias"));
  return o;
}

/// Reconstruction of the state from z (B,d). A frozen decoder contributes no gradients.
inline diff::Tensor decoder_forward(const diff::ParamSet& dec, const diff::Tensor& z, bool frozen = false) {
  auto p = [&](const char* name) { return frozen ? dec.at(name).detach() : dec.at(name); };
  auto h = diff::relu(diff::linear(z, p("hidden.weight"), p("hidden.bias")));
  return diff::linear(h, p("out.weight"), p("out.bias"));
}

/// Row-wise argmax of the categorical logits (ties: lowest component).
inline std::vector<std::size_t> argmax_components(const diff::Tensor& cat_logits) {
  const std::size_t rows = cat_logits.dim(0), k = cat_logits.dim(1);
  std::vector<std::size_t> out(rows, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 1; c < k; ++c) {
      if (cat_logits[r * k + c] > cat_logits[r * k + out[r]]) out[r] = c;
    }
  }
  return out;
}

struct ElboResult {
  diff::Tensor loss;  // batch mean of the negated bound
  double recon = 0.0;       // batch mean of Σ_c q(c|s)·½‖s − dec(z_c)‖²
  double kl_gauss = 0.0;    // batch mean of Σ_c q(c|s)·KL(q(z|s,c) ‖ p(z|c))
  double kl_cat = 0.0;      // batch mean of KL(q(c|s) ‖ p(c))
  double min_kl_gauss = 0.0;  // smallest per-sample, per-component Gaussian KL seen
  double min_kl_cat = 0.0;    // smallest per-sample categorical KL seen
};

/// Negated bound with the categorical expectation taken exactly over K components and the
/// Gaussian expectation by one reparameterised draw shared across components.
/// states (B,D), noise (B,d) standard normal.
inline ElboResult gmvae_elbo(const diff::Tensor& states, const Gmvae& model, const diff::Tensor& noise) {
  const auto& cfg = model.cfg;
  const std::size_t k = cfg.components, d = cfg.latent_dim;
  if (k == 0) throw std::invalid_argument("gmvae_elbo: K must be positive");
  if (states.rank() != 2 || states.dim(1) != cfg.state_dim) {
    throw std::invalid_argument("gmvae_elbo: states must be (B," + std::to_string(cfg.state_dim) + "), got " +
                                diff::shape_str(states.shape()));
  }
  const std::size_t batch = states.dim(0);
  if (noise.shape() != diff::Shape{batch, d}) {
    throw std::invalid_argument("gmvae_elbo: noise must be " + diff::shape_str({batch, d}));
  }
  const auto enc = encoder_forward(model.encoder, states);
  const auto q = diff::softmax(enc.cat_logits);
  const auto log_q = diff::log_softmax(enc.cat_logits);
  const auto& prior = model.decoder.at("prior.means");

  ElboResult res;
  res.min_kl_gauss = std::numeric_limits<double>::infinity();
  diff::Tensor total;
  for (std::size_t c = 0; c < k; ++c) {
    auto mu = diff::slice_last(enc.mu, c * d, (c + 1) * d);
    auto lv = diff::slice_last(enc.logvar, c * d, (c + 1) * d);
    auto z = diff::add(mu, diff::mul(diff::exp(diff::scale(lv, 0.5)), noise));
    auto resid = diff::sub(states, decoder_forward(model.decoder, z));
    auto rec = diff::scale(diff::sum_last(diff::mul(resid, resid)), 0.5);
    auto dm = diff::add_rows(mu, diff::scale(diff::slice_last(prior, c * d, (c + 1) * d), -1.0));
    auto kl = diff::scale(
        diff::shift(diff::sum_last(diff::add(diff::sub(diff::exp(lv), lv), diff::mul(dm, dm))), -static_cast<double>(d)),
        0.5);
    auto qc = diff::slice_last(q, c, c + 1);
    auto term = diff::mul(qc, diff::add(rec, kl));
    total = total.defined() ? diff::add(total, term) : term;
    for (std::size_t b = 0; b < batch; ++b) {
      res.recon += qc[b] * rec[b] / static_cast<double>(batch);
      res.kl_gauss += qc[b] * kl[b] / static_cast<double>(batch);
      res.min_kl_gauss = std::min(res.min_kl_gauss, kl[b]);
    }
  }
  auto kl_cat = diff::sum_last(diff::mul(q, diff::shift(log_q, std::log(static_cast<double>(k)))));
  res.min_kl_cat = std::numeric_limits<double>::infinity();
  for (std::size_t b = 0; b < batch; ++b) {
    res.kl_cat += kl_cat[b] / static_cast<double>(batch);
    res.min_kl_cat = std::min(res.min_kl_cat, kl_cat[b]);
  }
  res.loss = diff::reduce_mean(diff::add(total, kl_cat));
  if (!std::isfinite(res.loss.item())) throw std::runtime_error("gmvae_elbo: non-finite bound");
  return res;
}

inline diff::Tensor standard_normal(diff::Shape shape, Rng& rng) {
  std::vector<double> v(diff::shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return diff::Tensor::from(std::move(shape), std::move(v));
}

enum class EncodeMode { stochastic, deterministic };

struct Encoding {
  diff::Tensor latent;  // (C_z,H_z,W_z)
  std::size_t component = 0;
};

/// z = μ(s, ĉ) [+ σ(s, ĉ)·noise] with ĉ = argmax q(c|s), reshaped row-major to `latent_shape`.
inline Encoding encode(const HighDimState& s, const diff::ParamSet& enc, const GmvaeConfig& cfg, EncodeMode mode,
                       const diff::Shape& latent_shape, const diff::Tensor& noise = {}) {
  if (diff::shape_numel(latent_shape) != cfg.latent_dim) {
    throw std::invalid_argument("encode: latent shape " + diff::shape_str(latent_shape) + " does not hold " +
                                std::to_string(cfg.latent_dim) + " values");
  }
  if (s.size() != cfg.state_dim) throw std::invalid_argument("encode: state length mismatch");
  const auto states = diff::Tensor::from({1, s.size()}, s.values);
  const bool stochastic = mode == EncodeMode::stochastic;
  const auto out = encoder_forward(enc, states, stochastic);
  const auto comp = argmax_components(out.cat_logits);
  auto z = diff::gather_blocks(out.mu, comp, cfg.latent_dim);
  if (stochastic) {
    if (!noise.defined() || noise.numel() != cfg.latent_dim) {
      throw std::invalid_argument("encode: stochastic mode needs a noise draw of dim " + std::to_string(cfg.latent_dim));
    }
    auto sigma = diff::exp(diff::scale(diff::gather_blocks(out.logvar, comp, cfg.latent_dim), 0.5));
    z = diff::add(z, diff::mul(sigma, diff::reshape(noise, {1, cfg.latent_dim})));
  }
  return {diff::reshape(z, latent_shape), comp[0]};
}

/// Batch mean of ‖s − dec(μ(s, ĉ))‖² with deterministic encoding; the decoder stays frozen.
inline diff::Tensor recon_loss(std::span<const HighDimState> batch, const diff::ParamSet& enc, const diff::ParamSet& dec,
                               const GmvaeConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("recon_loss: empty batch");
  const auto states = state_matrix(batch);
  const auto out = encoder_forward(enc, states, false);
  const auto z = diff::gather_blocks(out.mu, argmax_components(out.cat_logits), cfg.latent_dim);
  const auto rec = decoder_forward(dec, z, true);
  return diff::scale(diff::squared_error(states, rec), 1.0 / static_cast<double>(batch.size()));
}

struct PretrainOptions {
  std::size_t steps = 300;
  std::size_t batch = 64;  // 0: full corpus each step
  double learning_rate = 1e-2;
  double weight_decay = 0.0;
};

struct PretrainTrace {
  std::vector<double> loss;  // per step, before the update
  double min_kl_gauss = std::numeric_limits<double>::infinity();
  double min_kl_cat = std::numeric_limits<double>::infinity();
};

/// Maximises the bound on `corpus` with plain SGD over encoder and decoder.
inline PretrainTrace pretrain_gmvae(Gmvae& model, std::span<const HighDimState> corpus, const PretrainOptions& opt,
                                    Rng& rng) {
  if (corpus.empty()) throw std::invalid_argument("pretrain_gmvae: empty corpus");
  PretrainTrace trace;
  std::vector<HighDimState> batch;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    batch.clear();
    if (opt.batch == 0 || opt.batch >= corpus.size()) {
      batch.assign(corpus.begin(), corpus.end());
    } else {
      for (std::size_t i = 0; i < opt.batch; ++i) batch.push_back(corpus[rng.index(corpus.size())]);
    }
    const auto states = state_matrix(batch);
    const auto noise = standard_normal({batch.size(), model.cfg.latent_dim}, rng);
    model.encoder.zero_grad();
    model.decoder.zero_grad();
    auto r = gmvae_elbo(states, model, noise);
    trace.loss.push_back(r.loss.item());
    trace.min_kl_gauss = std::min(trace.min_kl_gauss, r.min_kl_gauss);
    trace.min_kl_cat = std::min(trace.min_kl_cat, r.min_kl_cat);
    r.loss.backward();
    diff::sgd_step(model.encoder, opt.learning_rate, opt.weight_decay);
    diff::sgd_step(model.decoder, opt.learning_rate, opt.weight_decay);
  }
  return trace;
}

/// Trainable linear map from the raw state to the latent extent (encoder-bypass ablation).
inline diff::ParamSet init_projection(std::size_t state_dim, std::size_t latent_dim, Rng& rng) {
  diff::ParamSet p;
  p.add("weight", detail::uniform_init({latent_dim, state_dim}, state_dim, rng));
  p.add("bias", diff::Tensor::zeros({latent_dim}));
  return p;
}

inline diff::Tensor project_state(const HighDimState& s, const diff::ParamSet& proj, const diff::Shape& latent_shape) {
  const auto states = diff::Tensor::from({1, s.size()}, s.values);
  return diff::reshape(diff::linear(states, proj.at("weight"), proj.at("bias")), latent_shape);
}

}  // namespace classched::statecodec
