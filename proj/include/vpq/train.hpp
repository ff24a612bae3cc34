// Copyright (c) 2026 The vpq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <vector>

#include "vpq/autograd.hpp"
#include "vpq/checkpoint.hpp"
#include "vpq/config.hpp"
#include "vpq/data.hpp"
#include "vpq/errors.hpp"
#include "vpq/masking.hpp"
#include "vpq/model.hpp"
#include "vpq/optim.hpp"
#include "vpq/rng.hpp"

namespace vpq {

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::size_t k = 0;
};

/// `step,loss,lr,k_drawn`
inline void write_step_csv(std::ostream& os, const StepRecord& r) {
  os << r.step << ',' << r.loss << ',' << r.lr << ',' << r.k << '\n';
}

/// Fresh state: initialised parameters and zero moments.
inline TrainState make_train_state(const ModelConfig& model, const TrainConfig& train) {
  model.validate();
  train.validate(model);
  TrainState s;
  s.model = model;
  s.train = train;
  s.params = init_params(model, derive_seed(train.seed, Stream::init, 0));
  s.m = s.params.zeros_like();
  s.v = s.params.zeros_like();
  return s;
}

/// Query count used at a given step.
inline std::size_t active_queries(const TrainState& s, std::size_t step) {
  const std::size_t q = s.model.n_queries;
  if (s.train.mode == TrainMode::query_masking) return sample_k(MaskSchedule{q, s.train.seed}, step);
  return s.train.fixed_k == 0 ? q : s.train.fixed_k;
}

/// Runs optimisation steps over a dataset. Every random draw is a function of
/// (seed, step), so continuing from a checkpoint is bit-identical to an
/// uninterrupted run.
class Trainer {
 public:
  using Observer = std::function<void(const StepRecord&)>;

  Trainer(TrainState state, const Dataset& data) : s_(std::move(state)), data_(data) {
    s_.model.validate();
    s_.train.validate(s_.model);
    if (data_.train.empty()) throw ContractError("empty training split");
  }

  const TrainState& state() const noexcept { return s_; }
  TrainState& state() noexcept { return s_; }

  /// Runs until `until` steps have completed (capped at the configured total).
  void run(std::size_t until, const Observer& observer = {},
           const std::filesystem::path& checkpoint_path = {}) {
    until = std::min(until, s_.train.steps);
    while (s_.step < until) {
      StepRecord rec;
      try {
        rec = step_once();
      } catch (const NumericError&) {
        if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path.string() + ".diag", s_);
        throw;
      }
      if (observer) observer(rec);
      if (!checkpoint_path.empty() && s_.train.checkpoint_every > 0 && s_.step % s_.train.checkpoint_every == 0)
        save_checkpoint(checkpoint_path, s_);
    }
    if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, s_);
  }

  /// Loss and gradients for one batch at the given query count, without
  /// updating anything.
  std::pair<double, GradStore> loss_and_grads(std::span<const std::size_t> indices, std::size_t k,
                                              std::size_t step) const {
    std::vector<Tensor> images;
    std::vector<int> labels;
    images.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const auto& sample = data_.train[indices[i]];
      auto rng = make_rng(s_.train.seed, Stream::augment, step, i);
      images.push_back(augment_normalize(sample.image, data_.meta, &rng, s_.train.augment));
      labels.push_back(sample.label);
    }
    Graph<float> g(s_.params);
    PerceiverGraph<float> m(g, s_.model);
    Var patches = g.constant(stack_patches<float>(images, s_.model.patch_size));
    Var logits = m.logits(patches, images.size(), QuerySelection::prefix(k));
    Var loss = g.cross_entropy(logits, labels);
    const double value = g.value(loss)[0];
    return {value, g.backward(loss)};
  }

  /// Training-set indices of the batch at `step`: consecutive slices of a
  /// per-epoch permutation.
  std::vector<std::size_t> batch_indices(std::size_t step) {
    const std::size_t n = data_.train.size(), b = s_.train.batch_size;
    std::vector<std::size_t> out(b);
    for (std::size_t i = 0; i < b; ++i) {
      const std::size_t pos = step * b + i;
      out[i] = permutation(pos / n)[pos % n];
    }
    return out;
  }

 private:
  StepRecord step_once() {
    const std::size_t step = s_.step;
    const std::size_t k = active_queries(s_, step);
    auto indices = batch_indices(step);
    auto [loss, grads] = loss_and_grads(indices, k, step);
    if (!std::isfinite(loss)) throw NumericError("non-finite loss at step " + std::to_string(step));
    clip_grad_norm(grads, s_.train.grad_clip);
    const double lr = lr_at(step, s_.train);
    AdamW{}.step(s_.params, grads, s_.m, s_.v, lr, s_.train.weight_decay, step + 1);
    ++s_.step;
    return {step, loss, lr, k};
  }

  const std::vector<std::size_t>& permutation(std::size_t epoch) {
    if (epoch != perm_epoch_ || perm_.empty()) {
      perm_.resize(data_.train.size());
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      auto rng = make_rng(s_.train.seed, Stream::batch, epoch);
      std::shuffle(perm_.begin(), perm_.end(), rng);
      perm_epoch_ = epoch;
    }
    return perm_;
  }

  TrainState s_;
  const Dataset& data_;
  std::vector<std::size_t> perm_;
  std::size_t perm_epoch_ = 0;
};

/// Trains from scratch for the configured number of steps.
inline TrainState train_loop(const ModelConfig& model, const TrainConfig& train, const Dataset& data,
                             const Trainer::Observer& observer = {},
                             const std::filesystem::path& checkpoint_path = {}) {
  Trainer t(make_train_state(model, train), data);
  t.run(train.steps, observer, checkpoint_path);
  return t.state();
}

/// Dataset described by a training configuration.
inline Dataset load_dataset(const TrainConfig& train, const ModelConfig& model) {
  if (train.dataset == "synthetic") {
    SyntheticSpec spec;
    spec.seed = train.data_seed;
    spec.train_per_class = train.synthetic_train_per_class;
    spec.test_per_class = train.synthetic_test_per_class;
    spec.n_classes = model.n_classes;
    spec.image_size = model.image_size;
    spec.noise = train.synthetic_noise;
    return make_synthetic(spec);
  }
  if (train.data_dir.empty()) throw ConfigError("dataset 'cifar10' needs data_dir");
  if (model.image_size != kCifarSide || model.in_channels != 3 || model.n_classes != 10)
    throw ConfigError("CIFAR-10 needs image_size 32, 3 channels and 10 classes");
  return load_cifar10(train.data_dir);
}

}  // namespace vpq
