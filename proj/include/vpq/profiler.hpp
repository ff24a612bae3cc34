// Copyright (c) 2026 The vpq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Analytic cost model and wall-clock timing of the forward pass.
//
// A FLOP here is one multiply-accumulate in a dense projection or an
// attention contraction. Softmax, normalisation, activation and additions
// are not counted.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <span>
#include <vector>

#include "vpq/config.hpp"
#include "vpq/errors.hpp"
#include "vpq/masking.hpp"
#include "vpq/model.hpp"

namespace vpq {

struct FlopBreakdown {
  std::size_t k = 0;
  std::uint64_t patch_embed = 0;
  std::uint64_t cross_attention = 0;
  std::uint64_t encoder_block = 0;  // one block
  std::uint64_t encoder = 0;        // all blocks
  std::uint64_t decoder = 0;
  std::uint64_t head = 0;
  std::uint64_t total = 0;

  std::uint64_t other() const noexcept { return patch_embed + decoder + head; }
};

namespace detail {

// Encoder, decoder and head cost for k latent tokens.
inline void latent_side_flops(const ModelConfig& c, std::uint64_t k, FlopBreakdown& f) {
  const std::uint64_t d = c.dim, r = c.mlp_ratio;
  // q, k, v and output projections; scores and weighted sum; MLP.
  f.encoder_block = 4 * k * d * d + 2 * k * k * d + 2 * r * k * d * d;
  f.encoder = c.n_sa_layers * f.encoder_block;
  // One decoder query: its q and output projections and MLP, keys/values over k latents.
  f.decoder = 2 * d * d + 2 * r * d * d + 2 * k * d * d + 2 * k * d;
  f.head = d * c.n_classes;
}

inline std::uint64_t cross_flops(const ModelConfig& c, std::uint64_t k) {
  const std::uint64_t d = c.dim, r = c.mlp_ratio, n = c.n_patches();
  // keys/values over n patches; q and output projections, scores, weighted sum and MLP for k queries.
  return 2 * n * d * d + 2 * k * d * d + 2 * k * n * d + 2 * r * k * d * d;
}

}  // namespace detail

/// Cost of one forward pass using k latent queries.
inline FlopBreakdown flop_model(const ModelConfig& cfg, std::size_t k) {
  cfg.validate();
  if (k == 0 || k > cfg.n_queries) throw ContractError("flop_model: k outside [1, n_queries]");
  FlopBreakdown f;
  f.k = k;
  f.patch_embed = static_cast<std::uint64_t>(cfg.n_patches()) * cfg.patch_dim() * cfg.dim;
  f.cross_attention = detail::cross_flops(cfg, k);
  detail::latent_side_flops(cfg, k, f);
  f.total = f.patch_embed + f.cross_attention + f.encoder + f.decoder + f.head;
  return f;
}

/// Cost of one dynamic-selection forward pass: cross-attention runs with all
/// queries, everything after it with the `kept` survivors.
inline FlopBreakdown dqs_flop_model(const ModelConfig& cfg, std::size_t kept) {
  FlopBreakdown f = flop_model(cfg, kept);
  f.cross_attention = detail::cross_flops(cfg, cfg.n_queries);
  f.total = f.patch_embed + f.cross_attention + f.encoder + f.decoder + f.head;
  return f;
}

/// Either a fixed query count or a selection threshold.
struct TimingControl {
  enum class Kind { fixed_k, threshold } kind = Kind::fixed_k;
  std::size_t k = 0;
  double threshold = 1.0;

  static TimingControl fixed(std::size_t k) { return {Kind::fixed_k, k, 1.0}; }
  static TimingControl dqs(double t) { return {Kind::threshold, 0, t}; }
};

struct TimingRecord {
  std::size_t batch = 0;
  TimingControl control;
  std::size_t repeats = 0;
  std::size_t threads = 1;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  double median_ms = 0.0;
  double relative = 0.0;  // mean_ms over the full-query mean of the same run
};

/// Wall time of one batched forward pass, after `warmup` untimed passes.
inline TimingRecord time_forward(const ParamStore& params, const ModelConfig& cfg, std::span<const Tensor> batch,
                                 TimingControl control, std::size_t repeats, std::size_t warmup = 1) {
  if (repeats < 3) throw ContractError("time_forward: needs at least 3 repeats");
  if (batch.empty()) throw ContractError("time_forward: empty batch");
  auto run = [&] {
    if (control.kind == TimingControl::Kind::fixed_k) {
      return forward_batch<float>(batch, QuerySelection::prefix(control.k), params, cfg).size();
    }
    std::size_t n = 0;
    for (const auto& img : batch) n += dqs_forward(img, control.threshold, params, cfg).logits.size();
    return n;
  };
  volatile std::size_t sink = 0;
  for (std::size_t i = 0; i < warmup; ++i) sink = sink + run();
  std::vector<double> ms;
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    sink = sink + run();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  TimingRecord rec;
  rec.batch = batch.size();
  rec.control = control;
  rec.repeats = repeats;
  double mean = 0.0;
  for (double v : ms) mean += v;
  mean /= static_cast<double>(ms.size());
  double var = 0.0;
  for (double v : ms) var += (v - mean) * (v - mean);
  rec.mean_ms = mean;
  rec.std_ms = std::sqrt(var / static_cast<double>(ms.size()));
  std::sort(ms.begin(), ms.end());
  rec.median_ms = ms.size() % 2 ? ms[ms.size() / 2] : 0.5 * (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]);
  return rec;
}

/// Fills `relative` against the full-query row, which must be present.
inline void normalize_timings(std::vector<TimingRecord>& records, std::size_t n_queries) {
  const TimingRecord* base = nullptr;
  for (const auto& r : records)
    if (r.control.kind == TimingControl::Kind::fixed_k && r.control.k == n_queries) base = &r;
  if (!base) throw ContractError("normalize_timings: no row with k = n_queries");
  const double ref = base->mean_ms;
  for (auto& r : records) r.relative = r.mean_ms / ref;
}

struct ProfileRow {
  FlopBreakdown flops;
  TimingRecord timing;
};

/// `k,flops_total,flops_xattn,flops_encoder,flops_other,time_ms_mean,time_ms_std,time_rel`
inline void write_profile_csv(std::ostream& os, const std::vector<ProfileRow>& rows) {
  os << "k,flops_total,flops_xattn,flops_encoder,flops_other,time_ms_mean,time_ms_std,time_rel\n";
  for (const auto& r : rows) {
    os << r.flops.k << ',' << r.flops.total << ',' << r.flops.cross_attention << ',' << r.flops.encoder << ','
       << r.flops.other() << ',' << r.timing.mean_ms << ',' << r.timing.std_ms << ',' << r.timing.relative << '\n';
  }
}

/// FLOPs plus timing for each k over one batch; relative times use k = Q.
inline std::vector<ProfileRow> profile(const ParamStore& params, const ModelConfig& cfg, std::span<const Tensor> batch,
                                       std::vector<std::size_t> k_list, std::size_t repeats) {
  std::vector<TimingRecord> timings;
  bool has_full = false;
  for (auto k : k_list) has_full = has_full || k == cfg.n_queries;
  std::vector<std::size_t> timed = k_list;
  if (!has_full) timed.push_back(cfg.n_queries);
  for (auto k : timed) timings.push_back(time_forward(params, cfg, batch, TimingControl::fixed(k), repeats));
  normalize_timings(timings, cfg.n_queries);
  std::vector<ProfileRow> rows;
  for (std::size_t i = 0; i < k_list.size(); ++i) rows.push_back({flop_model(cfg, k_list[i]), timings[i]});
  return rows;
}

}  // namespace vpq
