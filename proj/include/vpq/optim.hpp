// Copyright (c) 2026 The vpq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>

#include "vpq/config.hpp"
#include "vpq/errors.hpp"
#include "vpq/params.hpp"
#include "vpq/tensor.hpp"

namespace vpq {

/// Cross-entropy of one logit vector, log-sum-exp stabilised.
template <typename T>
T compute_loss(std::span<const T> logits, int label) {
  if (logits.empty() || label < 0 || static_cast<std::size_t>(label) >= logits.size())
    throw ContractError("compute_loss: label out of range");
  const T mx = *std::max_element(logits.begin(), logits.end());
  T s{};
  for (T v : logits) s += std::exp(v - mx);
  return mx + std::log(s) - logits[static_cast<std::size_t>(label)];
}

/// Linear warmup from 0 to base_lr, then cosine decay reaching min_lr at the
/// last step.
inline double lr_at(std::size_t step, const TrainConfig& cfg) {
  if (step >= cfg.steps) throw ContractError("lr_at: step beyond schedule");
  if (step < cfg.warmup_steps)
    return cfg.base_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  const std::size_t span = cfg.steps - 1 - cfg.warmup_steps;
  if (span == 0) return cfg.base_lr;
  const double progress = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span);
  return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Biases, norm parameters, positional embeddings and learned query tokens
/// are not decayed.
inline bool decays(const std::string& name) {
  auto ends_with = [&](const std::string& suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return !(ends_with(".bias") || ends_with(".gamma") || ends_with(".beta") || name == "pos_embed" ||
           name == "latent_queries" || name == "decoder.query");
}

struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  /// One decoupled-weight-decay Adam update. `step` counts from 1.
  /// theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
  void step(ParamStore& params, const GradStore& grads, ParamStore& m, ParamStore& v, double lr,
            double weight_decay, std::size_t step) const {
    if (step == 0) throw ContractError("AdamW step counter starts at 1");
    if (grads.size() != params.size() || m.size() != params.size() || v.size() != params.size())
      throw DimensionError("AdamW: parameter/gradient/moment layouts differ");
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t e = 0; e < params.size(); ++e) {
      auto& p = params.entry(e).value;
      const auto& g = grads.entry(e).value;
      auto& me = m.entry(e).value;
      auto& ve = v.entry(e).value;
      if (g.size() != p.size() || me.size() != p.size() || ve.size() != p.size())
        throw DimensionError("AdamW: shape mismatch for '" + params.entry(e).name + "'");
      const double wd = decays(params.entry(e).name) ? weight_decay : 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i];
        const double mi = beta1 * me[i] + (1.0 - beta1) * gi;
        const double vi = beta2 * ve[i] + (1.0 - beta2) * gi * gi;
        me[i] = static_cast<float>(mi);
        ve[i] = static_cast<float>(vi);
        const double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps) + wd * p[i];
        p[i] = static_cast<float>(p[i] - lr * update);
      }
    }
  }
};

/// Scales all gradients so their global L2 norm is at most max_norm; returns
/// the norm before clipping.
template <typename T>
double clip_grad_norm(BasicGradStore<T>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& e : grads.entries())
    for (T v : e.value.data()) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& e : grads.entries())
      for (auto& v : e.value.values()) v *= s;
  }
  return norm;
}

}  // namespace vpq
