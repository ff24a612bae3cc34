// Copyright (c) 2026 The vpq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "vpq/errors.hpp"

namespace vpq {

/// Architecture hyperparameters. Defaults are the CIFAR-10 configuration:
/// 4x4 patches on 32x32 images, width 192, 12 self-attention layers with
/// 3 heads and 64 latent queries.
struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t in_channels = 3;
  std::size_t dim = 192;
  std::size_t n_queries = 64;
  std::size_t n_sa_layers = 12;
  std::size_t n_heads = 3;
  std::size_t mlp_ratio = 4;
  std::size_t n_classes = 10;
  float ln_eps = 1e-5f;

  /// The cross-attention and decoder blocks are single-head.
  static constexpr std::size_t cross_attn_heads = 1;

  std::size_t grid() const noexcept { return image_size / patch_size; }
  std::size_t n_patches() const noexcept { return grid() * grid(); }
  std::size_t patch_dim() const noexcept { return patch_size * patch_size * in_channels; }
  std::size_t hidden() const noexcept { return dim * mlp_ratio; }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      throw ConfigError("image_size must be a positive multiple of patch_size");
    if (in_channels == 0) throw ConfigError("in_channels must be positive");
    if (dim == 0 || n_heads == 0 || dim % n_heads != 0)
      throw ConfigError("dim must be a positive multiple of n_heads");
    if (n_queries == 0) throw ConfigError("n_queries must be at least 1");
    if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
    if (n_classes < 2) throw ConfigError("n_classes must be at least 2");
    if (!(ln_eps >= 0.0f)) throw ConfigError("ln_eps must be non-negative");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class TrainMode : std::uint32_t { query_masking = 0, fixed_q = 1 };

/// Optimisation settings. Defaults follow the CIFAR-10 recipe (350k steps,
/// batch 512, lr 5e-4); warmup, decay and clipping are DeiT-style choices.
struct TrainConfig {
  std::size_t steps = 350000;
  std::size_t batch_size = 512;
  double base_lr = 5e-4;
  double min_lr = 1e-6;
  std::size_t warmup_steps = 17500;
  double weight_decay = 0.05;
  double grad_clip = 1.0;
  TrainMode mode = TrainMode::query_masking;
  std::size_t fixed_k = 0;  // 0 means "all queries" in fixed_q mode
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;
  bool augment = true;

  // Data source. dataset is "synthetic" or "cifar10".
  std::string dataset = "cifar10";
  std::string data_dir;
  std::uint64_t data_seed = 0;
  std::size_t synthetic_train_per_class = 500;
  std::size_t synthetic_test_per_class = 100;
  double synthetic_noise = 0.1;

  void validate(const ModelConfig& model) const {
    if (steps == 0) throw ConfigError("steps must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
    if (min_lr < 0.0 || min_lr > base_lr) throw ConfigError("min_lr must be in [0, base_lr]");
    if (warmup_steps >= steps) throw ConfigError("warmup_steps must be smaller than steps");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (mode == TrainMode::fixed_q && fixed_k > model.n_queries)
      throw ConfigError("fixed_k must be in [1, n_queries]");
    if (dataset != "synthetic" && dataset != "cifar10")
      throw ConfigError("dataset must be 'synthetic' or 'cifar10'");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Flat `key = value` file, `#` starts a comment.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text) {
    KeyValueConfig cfg;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
      cfg.values_[key] = value;
    }
    return cfg;
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  template <typename V>
  void read(const std::string& key, V& out) const {
    auto it = values_.find(key);
    if (it == values_.end()) return;
    used_[key] = true;
    const std::string& s = it->second;
    if constexpr (std::is_same_v<V, std::string>) {
      out = s;
    } else if constexpr (std::is_same_v<V, bool>) {
      if (s == "true" || s == "1") out = true;
      else if (s == "false" || s == "0") out = false;
      else throw ConfigError("config key '" + key + "': expected a boolean, got '" + s + "'");
    } else {
      V v{};
      auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc{} || ptr != s.data() + s.size())
        throw ConfigError("config key '" + key + "': cannot parse '" + s + "'");
      out = v;
    }
  }

  /// Keys present in the file that no read() consumed.
  std::string first_unused() const {
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) return k;
    return {};
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
  mutable std::map<std::string, bool> used_;
};

inline void apply(const KeyValueConfig& kv, ModelConfig& m) {
  kv.read("image_size", m.image_size);
  kv.read("patch_size", m.patch_size);
  kv.read("in_channels", m.in_channels);
  kv.read("dim", m.dim);
  kv.read("n_queries", m.n_queries);
  kv.read("n_sa_layers", m.n_sa_layers);
  kv.read("n_heads", m.n_heads);
  kv.read("mlp_ratio", m.mlp_ratio);
  kv.read("n_classes", m.n_classes);
  kv.read("ln_eps", m.ln_eps);
}

inline void apply(const KeyValueConfig& kv, TrainConfig& t) {
  kv.read("steps", t.steps);
  kv.read("batch_size", t.batch_size);
  kv.read("base_lr", t.base_lr);
  kv.read("min_lr", t.min_lr);
  kv.read("warmup_steps", t.warmup_steps);
  kv.read("weight_decay", t.weight_decay);
  kv.read("grad_clip", t.grad_clip);
  if (kv.has("mode")) {
    std::string mode;
    kv.read("mode", mode);
    if (mode == "masking" || mode == "query_masking") t.mode = TrainMode::query_masking;
    else if (mode == "fixed-q" || mode == "fixed_q") t.mode = TrainMode::fixed_q;
    else throw ConfigError("mode must be 'masking' or 'fixed-q'");
  }
  kv.read("fixed_k", t.fixed_k);
  kv.read("seed", t.seed);
  kv.read("checkpoint_every", t.checkpoint_every);
  kv.read("augment", t.augment);
  kv.read("dataset", t.dataset);
  kv.read("data_dir", t.data_dir);
  kv.read("data_seed", t.data_seed);
  kv.read("synthetic_train_per_class", t.synthetic_train_per_class);
  kv.read("synthetic_test_per_class", t.synthetic_test_per_class);
  kv.read("synthetic_noise", t.synthetic_noise);
}

}  // namespace vpq
