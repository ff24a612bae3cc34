// Copyright (c) 2026 The vpq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Evaluation protocols and sweeps: fixed prefix K, random K-subsets of the
// queries, dynamic selection thresholds, and dataset-averaged cross-attention
// maps.

#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "vpq/data.hpp"
#include "vpq/errors.hpp"
#include "vpq/masking.hpp"
#include "vpq/model.hpp"
#include "vpq/profiler.hpp"
#include "vpq/rng.hpp"

namespace vpq {

/// Normalised images and labels ready for evaluation.
struct EvalSet {
  std::vector<Tensor> images;
  std::vector<int> labels;
  std::size_t size() const noexcept { return images.size(); }
};

inline EvalSet make_eval_set(const std::vector<Sample>& split, const DatasetMeta& meta) {
  EvalSet set;
  set.images.reserve(split.size());
  for (const auto& s : split) {
    set.images.push_back(augment_normalize(s.image, meta, nullptr, false));
    set.labels.push_back(s.label);
  }
  return set;
}

inline constexpr std::size_t kEvalChunk = 64;

inline int argmax(std::span<const float> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Predicted class per example.
inline std::vector<int> predict(const ParamStore& params, const ModelConfig& cfg, const EvalSet& set,
                                const QuerySelection& sel) {
  std::vector<int> out;
  out.reserve(set.size());
  for (std::size_t b = 0; b < set.size(); b += kEvalChunk) {
    const std::size_t n = std::min(kEvalChunk, set.size() - b);
    auto logits = forward_batch<float>(std::span(set.images).subspan(b, n), sel, params, cfg);
    for (std::size_t i = 0; i < n; ++i) out.push_back(argmax(logits.row(i)));
  }
  return out;
}

inline double accuracy_of(const std::vector<int>& pred, const std::vector<int>& labels) {
  if (pred.size() != labels.size() || pred.empty()) throw ContractError("accuracy: size mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Top-1 accuracy using the first k queries for every example.
inline double eval_fixed_k(const ParamStore& params, const ModelConfig& cfg, const EvalSet& set, std::size_t k) {
  return accuracy_of(predict(params, cfg, set, QuerySelection::prefix(k)), set.labels);
}

/// Uniform k-subset of {0..q-1}, sorted ascending.
inline std::vector<std::size_t> draw_subset(std::size_t q, std::size_t k, std::uint64_t seed, std::size_t repeat) {
  if (k == 0 || k > q) throw ContractError("draw_subset: k outside [1, q]");
  std::vector<std::size_t> all(q), out;
  std::iota(all.begin(), all.end(), std::size_t{0});
  auto rng = make_rng(seed, Stream::subset, repeat, k);
  std::sample(all.begin(), all.end(), std::back_inserter(out), k, rng);
  return out;
}

struct SubsetEval {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation over repeats
  double min = 0.0;
  double max = 0.0;
  std::vector<double> accuracies;
  std::vector<std::vector<std::size_t>> subsets;
};

/// Baseline protocol: each repeat evaluates with k queries drawn at random
/// from the full table (not a prefix).
inline SubsetEval eval_random_subsets(const ParamStore& params, const ModelConfig& cfg, const EvalSet& set,
                                      std::size_t k, std::size_t repeats = 5, std::uint64_t seed = 0) {
  if (repeats == 0) throw ContractError("eval_random_subsets: repeats must be positive");
  const std::size_t q = params["latent_queries"].rows();
  SubsetEval r;
  for (std::size_t i = 0; i < repeats; ++i) {
    auto subset = draw_subset(q, k, seed, i);
    r.accuracies.push_back(accuracy_of(predict(params, cfg, set, QuerySelection::subset(subset)), set.labels));
    r.subsets.push_back(std::move(subset));
  }
  const double n = static_cast<double>(repeats);
  r.mean = std::accumulate(r.accuracies.begin(), r.accuracies.end(), 0.0) / n;
  double var = 0.0;
  for (double a : r.accuracies) var += (a - r.mean) * (a - r.mean);
  r.std = std::sqrt(var / n);
  r.min = *std::min_element(r.accuracies.begin(), r.accuracies.end());
  r.max = *std::max_element(r.accuracies.begin(), r.accuracies.end());
  return r;
}

enum class SweepMode { fixed_k, random_subset, dqs };

inline const char* to_string(SweepMode m) {
  switch (m) {
    case SweepMode::fixed_k: return "fixed_k";
    case SweepMode::random_subset: return "random_subset";
    case SweepMode::dqs: return "dqs";
  }
  return "?";
}

inline SweepMode parse_sweep_mode(const std::string& s) {
  if (s == "fixed_k" || s == "fixed") return SweepMode::fixed_k;
  if (s == "random_subset" || s == "random") return SweepMode::random_subset;
  if (s == "dqs") return SweepMode::dqs;
  throw ConfigError("unknown sweep mode '" + s + "'");
}

struct SweepRecord {
  SweepMode mode = SweepMode::fixed_k;
  double value = 0.0;  // K, or the threshold t
  double accuracy = 0.0;
  double accuracy_std = 0.0;
  double accuracy_min = 0.0;
  double accuracy_max = 0.0;
  double q_mean = 0.0;
  double q_std = 0.0;
  double q_min = 0.0;
  double q_max = 0.0;
  double flops_mean = 0.0;
  double time_ms = 0.0;
  std::size_t repeats = 1;

  friend bool operator==(const SweepRecord&, const SweepRecord&) = default;
};

struct SweepOptions {
  std::size_t random_repeats = 5;
  std::uint64_t seed = 0;
  bool measure_time = false;  // wall time makes the output non-reproducible
  DqsOptions dqs;
};

namespace detail {

template <typename F>
double timed_ms(bool enabled, F&& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  if (!enabled) return 0.0;
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// One record per k per mode; modes are fixed_k and/or random_subset.
inline std::vector<SweepRecord> sweep_queries(const ParamStore& params, const ModelConfig& cfg, const EvalSet& set,
                                              const std::vector<std::size_t>& k_list,
                                              const std::vector<SweepMode>& modes, const SweepOptions& opt = {}) {
  std::vector<SweepRecord> out;
  for (SweepMode mode : modes) {
    if (mode == SweepMode::dqs) throw ContractError("sweep_queries: use sweep_dqs for thresholds");
    for (std::size_t k : k_list) {
      SweepRecord r;
      r.mode = mode;
      r.value = static_cast<double>(k);
      r.q_mean = r.q_min = r.q_max = static_cast<double>(k);
      r.flops_mean = static_cast<double>(flop_model(cfg, k).total);
      if (mode == SweepMode::fixed_k) {
        r.time_ms = detail::timed_ms(opt.measure_time, [&] { r.accuracy = eval_fixed_k(params, cfg, set, k); });
        r.accuracy_min = r.accuracy_max = r.accuracy;
      } else {
        SubsetEval e;
        r.time_ms = detail::timed_ms(opt.measure_time,
                                     [&] { e = eval_random_subsets(params, cfg, set, k, opt.random_repeats, opt.seed); });
        r.accuracy = e.mean;
        r.accuracy_std = e.std;
        r.accuracy_min = e.min;
        r.accuracy_max = e.max;
        r.repeats = opt.random_repeats;
      }
      out.push_back(r);
    }
  }
  return out;
}

struct DqsEval {
  double accuracy = 0.0;
  std::vector<std::size_t> kept_counts;
  double flops_mean = 0.0;
};

inline DqsEval eval_dqs(const ParamStore& params, const ModelConfig& cfg, const EvalSet& set, double t,
                        DqsOptions options = {}) {
  DqsEval e;
  std::size_t hit = 0;
  double flops = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto out = dqs_forward(set.images[i], t, params, cfg, options);
    hit += argmax(out.logits.data()) == set.labels[i];
    e.kept_counts.push_back(out.selection.count());
    flops += static_cast<double>(dqs_flop_model(cfg, out.selection.count()).total);
  }
  e.accuracy = static_cast<double>(hit) / static_cast<double>(set.size());
  e.flops_mean = flops / static_cast<double>(set.size());
  return e;
}

/// One record per threshold with per-example query-count statistics.
inline std::vector<SweepRecord> sweep_dqs(const ParamStore& params, const ModelConfig& cfg, const EvalSet& set,
                                          const std::vector<double>& t_list, const SweepOptions& opt = {}) {
  std::vector<SweepRecord> out;
  for (double t : t_list) {
    SweepRecord r;
    r.mode = SweepMode::dqs;
    r.value = t;
    DqsEval e;
    r.time_ms = detail::timed_ms(opt.measure_time, [&] { e = eval_dqs(params, cfg, set, t, opt.dqs); });
    r.accuracy = r.accuracy_min = r.accuracy_max = e.accuracy;
    const double n = static_cast<double>(e.kept_counts.size());
    double mean = 0.0;
    for (auto c : e.kept_counts) mean += static_cast<double>(c);
    mean /= n;
    double var = 0.0;
    for (auto c : e.kept_counts) var += (static_cast<double>(c) - mean) * (static_cast<double>(c) - mean);
    r.q_mean = mean;
    r.q_std = std::sqrt(var / n);
    r.q_min = static_cast<double>(*std::min_element(e.kept_counts.begin(), e.kept_counts.end()));
    r.q_max = static_cast<double>(*std::max_element(e.kept_counts.begin(), e.kept_counts.end()));
    r.flops_mean = e.flops_mean;
    out.push_back(r);
  }
  return out;
}

inline constexpr const char* kSweepCsvHeader =
    "mode,value,accuracy,accuracy_std,accuracy_min,accuracy_max,q_mean,q_std,q_min,q_max,flops_mean,time_ms,repeats";

namespace detail {

inline std::string shortest(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline double parse_double(const std::string& s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) throw FormatError("bad number '" + s + "' in CSV");
  return v;
}

}  // namespace detail

/// Doubles are written in shortest round-trip form, so reading the CSV back
/// reproduces the records exactly.
inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRecord>& records) {
  using detail::shortest;
  os << kSweepCsvHeader << '\n';
  for (const auto& r : records) {
    os << to_string(r.mode) << ',' << shortest(r.value) << ',' << shortest(r.accuracy) << ','
       << shortest(r.accuracy_std) << ',' << shortest(r.accuracy_min) << ',' << shortest(r.accuracy_max) << ','
       << shortest(r.q_mean) << ',' << shortest(r.q_std) << ',' << shortest(r.q_min) << ',' << shortest(r.q_max)
       << ',' << shortest(r.flops_mean) << ',' << shortest(r.time_ms) << ',' << r.repeats << '\n';
  }
}

inline std::vector<SweepRecord> read_sweep_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kSweepCsvHeader) throw FormatError("sweep CSV: unexpected header");
  std::vector<SweepRecord> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 13) throw FormatError("sweep CSV line " + std::to_string(lineno) + ": expected 13 fields");
    SweepRecord r;
    try {
      r.mode = parse_sweep_mode(f[0]);
    } catch (const ConfigError& e) {
      throw FormatError(e.what());
    }
    double* fields[] = {&r.value, &r.accuracy, &r.accuracy_std, &r.accuracy_min, &r.accuracy_max, &r.q_mean,
                        &r.q_std, &r.q_min,    &r.q_max,        &r.flops_mean,   &r.time_ms};
    for (std::size_t i = 0; i < 11; ++i) *fields[i] = detail::parse_double(f[i + 1]);
    r.repeats = static_cast<std::size_t>(detail::parse_double(f[12]));
    out.push_back(r);
  }
  return out;
}

/// Dataset-averaged cross-attention weights, one row per latent query.
struct AttentionAtlas {
  std::size_t n_queries = 0;
  std::size_t n_patches = 0;
  std::size_t patch_grid = 0;  // maps are patch_grid x patch_grid
  Tensor maps;                 // [n_queries, n_patches]

  std::span<const float> map(std::size_t q) const { return maps.row(q); }
};

inline AttentionAtlas average_cross_attention(const ParamStore& params, const ModelConfig& cfg, const EvalSet& set) {
  if (set.size() == 0) throw ContractError("average_cross_attention: empty split");
  const std::size_t q = params["latent_queries"].rows(), n = cfg.n_patches();
  std::vector<double> acc(q * n, 0.0);
  for (std::size_t b = 0; b < set.size(); b += kEvalChunk) {
    const std::size_t m = std::min(kEvalChunk, set.size() - b);
    Graph<float> g(params, Graph<float>::Mode::inference);
    PerceiverGraph<float> model(g, cfg);
    Var tokens = model.embed(g.constant(stack_patches<float>(std::span(set.images).subspan(b, m), cfg.patch_size)), m);
    auto cross = model.cross_attend(tokens, model.select_queries(QuerySelection::prefix(q)), m);
    const auto& w = g.aux(cross.attn);  // [m * q, n]
    for (std::size_t i = 0; i < m * q; ++i)
      for (std::size_t j = 0; j < n; ++j) acc[(i % q) * n + j] += w(i, j);
  }
  AttentionAtlas atlas;
  atlas.n_queries = q;
  atlas.n_patches = n;
  atlas.patch_grid = cfg.grid();
  atlas.maps = Tensor({q, n});
  for (std::size_t i = 0; i < q * n; ++i) atlas.maps[i] = static_cast<float>(acc[i] / static_cast<double>(set.size()));
  return atlas;
}

/// Shannon entropy in nats.
inline double entropy(std::span<const float> p) {
  double h = 0.0;
  for (float v : p)
    if (v > 0.0f) h -= static_cast<double>(v) * std::log(static_cast<double>(v));
  return h;
}

inline void write_atlas_csv(std::ostream& os, const AttentionAtlas& atlas) {
  os << "query";
  for (std::size_t j = 0; j < atlas.n_patches; ++j) os << ",p" << j;
  os << '\n';
  for (std::size_t q = 0; q < atlas.n_queries; ++q) {
    os << q;
    for (float v : atlas.map(q)) os << ',' << detail::shortest(v);
    os << '\n';
  }
}

/// Binary PGM montage: queries left to right then top to bottom, each map
/// scaled to its own maximum and upsampled by `zoom`, one-pixel gaps.
inline void write_atlas_pgm(std::ostream& os, const AttentionAtlas& atlas, std::size_t zoom = 4) {
  const std::size_t cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(atlas.n_queries))));
  const std::size_t rows = (atlas.n_queries + cols - 1) / cols;
  const std::size_t cell = atlas.patch_grid * zoom + 1;
  const std::size_t width = cols * cell + 1, height = rows * cell + 1;
  std::vector<unsigned char> px(width * height, 0);
  for (std::size_t q = 0; q < atlas.n_queries; ++q) {
    auto m = atlas.map(q);
    const float mx = std::max(*std::max_element(m.begin(), m.end()), 1e-12f);
    const std::size_t ox = (q % cols) * cell + 1, oy = (q / cols) * cell + 1;
    for (std::size_t y = 0; y < atlas.patch_grid * zoom; ++y)
      for (std::size_t x = 0; x < atlas.patch_grid * zoom; ++x) {
        const float v = m[(y / zoom) * atlas.patch_grid + x / zoom] / mx;
        px[(oy + y) * width + ox + x] = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
      }
  }
  os << "P5\n" << width << ' ' << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

/// Writes `<out>.csv` and `<out>.pgm`.
inline AttentionAtlas export_attention(const ParamStore& params, const ModelConfig& cfg, const EvalSet& set,
                                       const std::filesystem::path& out) {
  AttentionAtlas atlas = average_cross_attention(params, cfg, set);
  std::ofstream csv(out.string() + ".csv");
  std::ofstream pgm(out.string() + ".pgm", std::ios::binary);
  if (!csv || !pgm) throw std::runtime_error("cannot write attention atlas to '" + out.string() + "'");
  write_atlas_csv(csv, atlas);
  write_atlas_pgm(pgm, atlas);
  if (!csv || !pgm) throw std::runtime_error("write failed for attention atlas '" + out.string() + "'");
  return atlas;
}

}  // namespace vpq
