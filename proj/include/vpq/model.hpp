// Copyright (c) 2026 The vpq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Visual Perceiver: patch embedding with learned positions, a single-head
// cross-attention from ordered latent queries onto the patch tokens, a stack
// of pre-norm self-attention blocks over the latents, a single-query decoder
// and a linear classifier.
//
// Every block is written once against Graph<T>; the Tensor-level entry points
// build an inference graph and read the result back.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vpq/autograd.hpp"
#include "vpq/config.hpp"
#include "vpq/errors.hpp"
#include "vpq/params.hpp"
#include "vpq/tensor.hpp"

namespace vpq {

enum class Init { zeros, ones, trunc_normal };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
};

namespace detail {

inline void attention_block_specs(std::vector<ParamSpec>& out, const std::string& p,
                                  std::size_t d, std::size_t hidden, bool cross) {
  auto norm = [&](const std::string& n) {
    out.push_back({p + n + ".gamma", {d}, Init::ones});
    out.push_back({p + n + ".beta", {d}, Init::zeros});
  };
  auto lin = [&](const std::string& n, std::size_t in, std::size_t outw) {
    out.push_back({p + n + ".weight", {in, outw}, Init::trunc_normal});
    out.push_back({p + n + ".bias", {outw}, Init::zeros});
  };
  if (cross) {
    norm("norm_q");
    norm("norm_kv");
  } else {
    norm("norm1");
  }
  lin("attn.q", d, d);
  lin("attn.k", d, d);
  lin("attn.v", d, d);
  lin("attn.out", d, d);
  norm(cross ? "norm_mlp" : "norm2");
  lin("mlp.fc1", d, hidden);
  lin("mlp.fc2", hidden, d);
}

}  // namespace detail

/// Every learnable array, in serialisation order.
inline std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.dim, h = cfg.hidden();
  std::vector<ParamSpec> specs;
  specs.push_back({"patch_embed.weight", {cfg.patch_dim(), d}, Init::trunc_normal});
  specs.push_back({"patch_embed.bias", {d}, Init::zeros});
  specs.push_back({"pos_embed", {cfg.n_patches(), d}, Init::trunc_normal});
  specs.push_back({"latent_queries", {cfg.n_queries, d}, Init::trunc_normal});
  detail::attention_block_specs(specs, "cross.", d, h, true);
  for (std::size_t l = 0; l < cfg.n_sa_layers; ++l)
    detail::attention_block_specs(specs, "encoder." + std::to_string(l) + ".", d, h, false);
  specs.push_back({"decoder.query", {1, d}, Init::trunc_normal});
  detail::attention_block_specs(specs, "decoder.", d, h, true);
  specs.push_back({"head.norm.gamma", {d}, Init::ones});
  specs.push_back({"head.norm.beta", {d}, Init::zeros});
  specs.push_back({"head.weight", {d, cfg.n_classes}, Init::trunc_normal});
  specs.push_back({"head.bias", {cfg.n_classes}, Init::zeros});
  return specs;
}

/// Exact parameter count. With d = dim and r = mlp_ratio, an attention block
/// holds four biased d x d projections and a biased d -> rd -> d MLP, i.e.
/// (4 + 2r) d^2 + (5 + r) d values, plus 2d per layer norm (two in a
/// self-attention block, three in a cross-attention block). On top of that:
/// patch_dim*d + d for the patch projection, n_patches*d positions, Q*d
/// latent queries, d for the decoder query and 2d + d*classes + classes for
/// the head.
inline std::size_t count_params(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.dim, r = cfg.mlp_ratio;
  const std::size_t block_core = 4 * (d * d + d) + (d * r * d + r * d) + (r * d * d + d);
  const std::size_t self_block = block_core + 2 * (2 * d);
  const std::size_t cross_block = block_core + 3 * (2 * d);
  return (cfg.patch_dim() * d + d) + cfg.n_patches() * d + cfg.n_queries * d + cross_block +
         cfg.n_sa_layers * self_block + (d + cross_block) + (2 * d + d * cfg.n_classes + cfg.n_classes);
}

/// Truncated normal (std 0.02, cut at two standard deviations) for weights,
/// queries and positions; zeros for biases and betas; ones for gammas.
inline ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  ParamStore store;
  for (auto& spec : param_specs(cfg)) {
    Tensor t(spec.shape);
    switch (spec.init) {
      case Init::zeros: break;
      case Init::ones: std::fill(t.values().begin(), t.values().end(), 1.0f); break;
      case Init::trunc_normal:
        for (auto& v : t.values()) {
          float z;
          do z = normal(rng);
          while (z < -2.0f || z > 2.0f);
          v = 0.02f * z;
        }
        break;
    }
    store.add(spec.name, std::move(t));
  }
  return store;
}

/// Splits a [C, H, W] image into row-major p x p patches. Each patch is
/// flattened channel-major: (c, y, x).
template <typename T>
BasicTensor<T> patchify(const BasicTensor<T>& image, std::size_t patch_size) {
  if (image.rank() != 3) throw DimensionError("patchify: expected [C,H,W], got " + shape_string(image.shape()));
  const std::size_t c = image.shape()[0], h = image.shape()[1], w = image.shape()[2];
  if (patch_size == 0 || h % patch_size != 0 || w % patch_size != 0)
    throw ConfigError("patchify: image " + shape_string(image.shape()) + " not divisible by patch " +
                      std::to_string(patch_size));
  const std::size_t gh = h / patch_size, gw = w / patch_size, p = patch_size;
  BasicTensor<T> out({gh * gw, c * p * p});
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px) {
      auto row = out.row(py * gw + px);
      std::size_t o = 0;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            row[o++] = image[(ch * h + py * p + y) * w + px * p + x];
    }
  return out;
}

/// Which latent queries take part in a forward pass.
class QuerySelection {
 public:
  static QuerySelection prefix(std::size_t k) { return QuerySelection(k, {}); }
  static QuerySelection subset(std::vector<std::size_t> indices) {
    const std::size_t n = indices.size();
    return QuerySelection(n, std::move(indices));
  }

  std::size_t count() const noexcept { return count_; }
  bool is_prefix() const noexcept { return indices_.empty(); }
  const std::vector<std::size_t>& indices() const noexcept { return indices_; }

 private:
  QuerySelection(std::size_t k, std::vector<std::size_t> idx) : count_(k), indices_(std::move(idx)) {}
  std::size_t count_;
  std::vector<std::size_t> indices_;
};

/// Optional observation points inside forward().
struct ForwardTrace {
  /// Rows per example entering each encoder block, one entry per block.
  std::vector<std::size_t> encoder_token_counts;
  /// Cross-attention weights [groups * k, n_patches] from the last call.
  Tensor cross_attention;
};

/// Graph-level building blocks shared by training and inference.
template <typename T>
class PerceiverGraph {
 public:
  PerceiverGraph(Graph<T>& graph, const ModelConfig& cfg) : g_(graph), cfg_(cfg) {}

  /// patches: [groups * n_patches, patch_dim]
  Var embed(Var patches, std::size_t groups) {
    Var tok = g_.linear(patches, g_.param("patch_embed.weight"), g_.param("patch_embed.bias"));
    return g_.add(tok, g_.tile_rows(g_.param("pos_embed"), groups));
  }

  Var select_queries(const QuerySelection& sel) {
    Var all = g_.param("latent_queries");
    const std::size_t q = g_.value(all).rows();
    if (sel.count() == 0 || sel.count() > q)
      throw ContractError("query selection of " + std::to_string(sel.count()) + " out of range [1, " +
                          std::to_string(q) + "]");
    if (sel.is_prefix()) return g_.rows(all, 0, sel.count());
    return g_.gather_rows(all, sel.indices());
  }

  struct CrossResult {
    Var out;
    Var attn;  // pre-projection attention output; aux() holds the weights
  };

  /// Pre-norm single-head cross-attention with residual, followed by a
  /// pre-norm MLP with residual. latents: [groups*k, d], inputs: [groups*n, d].
  CrossResult cross_block(const std::string& p, Var latents, Var inputs, std::size_t groups) {
    Var qn = norm(p + "norm_q", latents);
    Var kvn = norm(p + "norm_kv", inputs);
    Var q = lin(p + "attn.q", qn);
    Var k = lin(p + "attn.k", kvn);
    Var v = lin(p + "attn.v", kvn);
    Var a = g_.attention(q, k, v, ModelConfig::cross_attn_heads, groups);
    Var y = g_.add(latents, lin(p + "attn.out", a));
    return {mlp_residual(p, "norm_mlp", y), a};
  }

  CrossResult cross_attend(Var inputs, Var queries, std::size_t groups) {
    return cross_block("cross.", g_.tile_rows(queries, groups), inputs, groups);
  }

  /// Pre-norm multi-head self-attention and MLP, both with residuals.
  Var encoder_block(std::size_t layer, Var x, std::size_t groups) {
    const std::string p = "encoder." + std::to_string(layer) + ".";
    Var xn = norm(p + "norm1", x);
    Var a = g_.attention(lin(p + "attn.q", xn), lin(p + "attn.k", xn), lin(p + "attn.v", xn),
                         cfg_.n_heads, groups);
    Var y = g_.add(x, lin(p + "attn.out", a));
    return mlp_residual(p, "norm2", y);
  }

  /// One learned query per group attends over the latents; the resulting token
  /// is normalised and mapped to class logits [groups, n_classes].
  Var decode_classify(Var latents, std::size_t groups) {
    Var dq = g_.tile_rows(g_.param("decoder.query"), groups);
    Var tok = cross_block("decoder.", dq, latents, groups).out;
    return g_.linear(norm("head.norm", tok), g_.param("head.weight"), g_.param("head.bias"));
  }

  Var encode(Var latents, std::size_t groups, ForwardTrace* trace) {
    for (std::size_t l = 0; l < cfg_.n_sa_layers; ++l) {
      if (trace) trace->encoder_token_counts.push_back(g_.value(latents).rows() / groups);
      latents = encoder_block(l, latents, groups);
    }
    return latents;
  }

  /// Logits [groups, n_classes] for a stack of patchified images.
  Var logits(Var patches, std::size_t groups, const QuerySelection& sel, ForwardTrace* trace = nullptr) {
    Var tokens = embed(patches, groups);
    auto cross = cross_attend(tokens, select_queries(sel), groups);
    if (trace) trace->cross_attention = g_.aux(cross.attn).template cast<float>();
    return decode_classify(encode(cross.out, groups, trace), groups);
  }

  Var norm(const std::string& name, Var x) {
    return g_.layer_norm(x, g_.param(name + ".gamma"), g_.param(name + ".beta"), static_cast<T>(cfg_.ln_eps));
  }
  Var lin(const std::string& name, Var x) {
    return g_.linear(x, g_.param(name + ".weight"), g_.param(name + ".bias"));
  }

 private:
  Var mlp_residual(const std::string& p, const std::string& norm_name, Var y) {
    Var h = g_.gelu(lin(p + "mlp.fc1", norm(p + norm_name, y)));
    return g_.add(y, lin(p + "mlp.fc2", h));
  }

  Graph<T>& g_;
  const ModelConfig& cfg_;
};

/// Stacks patchified images into one [n * n_patches, patch_dim] block.
template <typename T>
BasicTensor<T> stack_patches(std::span<const BasicTensor<T>> images, std::size_t patch_size) {
  if (images.empty()) throw ContractError("empty image batch");
  std::vector<T> data;
  Shape shape;
  for (const auto& img : images) {
    auto p = patchify(img, patch_size);
    if (shape.empty()) shape = p.shape();
    else if (p.shape() != shape) throw DimensionError("images in a batch differ in shape");
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  return BasicTensor<T>({images.size() * shape[0], shape[1]}, std::move(data));
}

// Tensor-level entry points. Each builds an inference graph.

template <typename T>
BasicTensor<T> embed(const BasicTensor<T>& patches, const BasicParamStore<T>& params, const ModelConfig& cfg) {
  Graph<T> g(params, Graph<T>::Mode::inference);
  PerceiverGraph<T> m(g, cfg);
  return g.value(m.embed(g.constant(patches), 1));
}

/// Cross-attention block for one example. `weights` receives [k, n_x].
template <typename T>
BasicTensor<T> cross_attend(const BasicTensor<T>& inputs, const BasicTensor<T>& queries,
                            const BasicParamStore<T>& params, const ModelConfig& cfg,
                            BasicTensor<T>* weights = nullptr, BasicTensor<T>* attn_out = nullptr) {
  if (queries.rows() == 0) throw ContractError("cross_attend: need at least one query");
  Graph<T> g(params, Graph<T>::Mode::inference);
  PerceiverGraph<T> m(g, cfg);
  auto r = m.cross_attend(g.constant(inputs), g.constant(queries), 1);
  if (weights) *weights = g.aux(r.attn);
  if (attn_out) *attn_out = g.value(r.attn);
  return g.value(r.out);
}

template <typename T>
BasicTensor<T> encoder_block(const BasicTensor<T>& tokens, const BasicParamStore<T>& params,
                             const ModelConfig& cfg, std::size_t layer) {
  Graph<T> g(params, Graph<T>::Mode::inference);
  PerceiverGraph<T> m(g, cfg);
  return g.value(m.encoder_block(layer, g.constant(tokens), 1));
}

/// Logits [n_classes] from k latent tokens.
template <typename T>
BasicTensor<T> decode_classify(const BasicTensor<T>& tokens, const BasicParamStore<T>& params,
                               const ModelConfig& cfg) {
  if (tokens.rows() == 0) throw ContractError("decode_classify: need at least one token");
  Graph<T> g(params, Graph<T>::Mode::inference);
  PerceiverGraph<T> m(g, cfg);
  return g.value(m.decode_classify(g.constant(tokens), 1)).reshaped({cfg.n_classes});
}

/// Logits [batch, n_classes] using the selected latent queries.
template <typename T>
BasicTensor<T> forward_batch(std::span<const BasicTensor<T>> images, const QuerySelection& sel,
                             const BasicParamStore<T>& params, const ModelConfig& cfg,
                             ForwardTrace* trace = nullptr) {
  Graph<T> g(params, Graph<T>::Mode::inference);
  PerceiverGraph<T> m(g, cfg);
  Var patches = g.constant(stack_patches(images, cfg.patch_size));
  return g.value(m.logits(patches, images.size(), sel, trace));
}

/// Logits [n_classes] using the first k latent queries.
template <typename T>
BasicTensor<T> forward(const BasicTensor<T>& image, std::size_t k, const BasicParamStore<T>& params,
                       const ModelConfig& cfg, ForwardTrace* trace = nullptr) {
  return forward_batch<T>(std::span(&image, 1), QuerySelection::prefix(k), params, cfg, trace)
      .reshaped({cfg.n_classes});
}

}  // namespace vpq
