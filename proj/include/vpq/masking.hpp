// Copyright (c) 2026 The vpq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Query masking (train on a random prefix of the ordered latent queries) and
// dynamic query selection (drop latents whose cross-attention output is
// nearly parallel to an earlier one).

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "vpq/autograd.hpp"
#include "vpq/config.hpp"
#include "vpq/errors.hpp"
#include "vpq/model.hpp"
#include "vpq/rng.hpp"
#include "vpq/tensor.hpp"

namespace vpq {

/// Uniform distribution of the active query count over [1, q_max].
struct MaskSchedule {
  std::size_t q_max = 1;
  std::uint64_t seed = 0;
};

/// Query count for one training batch. A pure function of (seed, step).
inline std::size_t sample_k(const MaskSchedule& schedule, std::uint64_t step) {
  if (schedule.q_max == 0) throw ContractError("sample_k: q_max must be at least 1");
  auto rng = make_rng(schedule.seed, Stream::query_count, step);
  std::uniform_int_distribution<std::size_t> dist(1, schedule.q_max);
  return dist(rng);
}

/// First k rows of the query table, in order.
template <typename T>
BasicTensor<T> truncate_queries(const BasicTensor<T>& queries, std::size_t k) {
  if (k == 0 || k > queries.rows())
    throw ContractError("truncate_queries: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(queries.rows()) + "]");
  std::vector<T> data(queries.data().begin(), queries.data().begin() + k * queries.cols());
  return BasicTensor<T>({k, queries.cols()}, std::move(data));
}

/// Rows at the given indices, in the given order.
template <typename T>
BasicTensor<T> gather_queries(const BasicTensor<T>& queries, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("gather_queries: empty index set");
  BasicTensor<T> out({indices.size(), queries.cols()});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= queries.rows()) throw ContractError("gather_queries: index out of range");
    std::copy_n(queries.row(indices[i]).begin(), queries.cols(), out.row(i).begin());
  }
  return out;
}

/// Copy of the parameters whose latent query table physically holds only the
/// first k rows.
template <typename T>
BasicParamStore<T> truncated_params(const BasicParamStore<T>& params, std::size_t k) {
  BasicParamStore<T> out = params;
  out["latent_queries"] = truncate_queries(params["latent_queries"], k);
  return out;
}

/// Which earlier outputs a query is compared against.
enum class DqsRule {
  all_predecessors,   // every j < i, kept or not
  kept_predecessors,  // only earlier queries that survived
};

/// Which cross-attention tensor the similarities are computed on.
enum class DqsSource {
  block_output,      // tokens entering the encoder
  attention_output,  // softmax(QK^T/sqrt(d)) V before the output projection
};

struct DqsOptions {
  DqsRule rule = DqsRule::all_predecessors;
  DqsSource source = DqsSource::block_output;
};

struct SelectionResult {
  std::vector<std::size_t> kept;  // 0-based, strictly increasing, always starts with 0
  double threshold = 1.0;
  double max_similarity = 0.0;    // largest pairwise cosine seen over j < i
  std::size_t count() const noexcept { return kept.size(); }
};

/// Keeps query i unless cos(y_i, y_j) > t for some earlier j.
template <typename T>
SelectionResult dqs_select(const BasicTensor<T>& outputs, double threshold, DqsRule rule = DqsRule::all_predecessors) {
  if (!(threshold > 0.0 && threshold <= 1.0))
    throw ContractError("dqs_select: threshold must be in (0, 1]");
  const std::size_t n = outputs.rows();
  if (n == 0) throw ContractError("dqs_select: no tokens");
  SelectionResult res;
  res.threshold = threshold;
  res.max_similarity = -1.0;
  res.kept.push_back(0);
  for (std::size_t i = 1; i < n; ++i) {
    double worst = -1.0;
    auto compare = [&](std::size_t j) {
      const double s = static_cast<double>(cosine_similarity<T>(outputs.row(i), outputs.row(j)));
      worst = std::max(worst, s);
    };
    if (rule == DqsRule::all_predecessors) {
      for (std::size_t j = 0; j < i; ++j) compare(j);
    } else {
      for (std::size_t j : res.kept) compare(j);
    }
    res.max_similarity = std::max(res.max_similarity, worst);
    if (!(worst > threshold)) res.kept.push_back(i);
  }
  if (n == 1) res.max_similarity = 0.0;
  return res;
}

template <typename T>
struct DqsOutput {
  BasicTensor<T> logits;  // [n_classes]
  SelectionResult selection;
};

/// Cross-attention with all queries, then selection, then the encoder and
/// decoder on the surviving rows only.
template <typename T>
DqsOutput<T> dqs_forward(const BasicTensor<T>& image, double threshold, const BasicParamStore<T>& params,
                         const ModelConfig& cfg, DqsOptions options = {}, ForwardTrace* trace = nullptr) {
  Graph<T> g(params, Graph<T>::Mode::inference);
  PerceiverGraph<T> m(g, cfg);
  Var tokens = m.embed(g.constant(patchify(image, cfg.patch_size)), 1);
  const std::size_t q = params["latent_queries"].rows();
  auto cross = m.cross_attend(tokens, m.select_queries(QuerySelection::prefix(q)), 1);
  if (trace) trace->cross_attention = g.aux(cross.attn).template cast<float>();
  const auto& probe = options.source == DqsSource::block_output ? g.value(cross.out) : g.value(cross.attn);
  SelectionResult sel = dqs_select(probe, threshold, options.rule);
  Var kept = g.gather_rows(cross.out, sel.kept);
  Var logits = m.decode_classify(m.encode(kept, 1, trace), 1);
  return {g.value(logits).reshaped({cfg.n_classes}), std::move(sel)};
}

}  // namespace vpq
