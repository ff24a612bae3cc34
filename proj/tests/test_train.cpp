// Copyright (c) 2026 The vpq Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <vector>

#include "test_support.hpp"
#include "vpq/checkpoint.hpp"
#include "vpq/train.hpp"

namespace {

using vpq::ModelConfig;
using vpq::TrainConfig;
using vpq::testing::TempDir;

ModelConfig tiny_model() {
  ModelConfig m = vpq::testing::tiny_config();
  m.n_classes = 2;
  return m;
}

TrainConfig tiny_train(std::size_t steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 8;
  t.base_lr = 3e-3;
  t.warmup_steps = steps / 10;
  t.seed = 17;
  t.augment = true;
  t.dataset = "synthetic";
  t.synthetic_train_per_class = 40;
  t.synthetic_test_per_class = 10;
  t.synthetic_noise = 0.05;
  return t;
}

// --- loss -------------------------------------------------------------------

TEST(ComputeLoss, UniformLogitsGiveLogClasses) {
  const std::vector<double> z(7, 0.3);
  for (int label = 0; label < 7; ++label) EXPECT_NEAR(vpq::compute_loss<double>(z, label), std::log(7.0), 1e-12);
}

TEST(ComputeLoss, SaturatedTrueLogitGivesZero) {
  std::vector<float> z(5, 0.0f);
  z[2] = 1e4f;
  EXPECT_NEAR(vpq::compute_loss<float>(z, 2), 0.0f, 1e-6);
}

TEST(ComputeLoss, MatchesHighPrecisionOracle) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> z(10);
    for (auto& v : z) v = static_cast<float>(g(rng));
    long double s = 0;
    for (float v : z) s += std::exp(static_cast<long double>(v));
    const int label = trial % 10;
    const double want = static_cast<double>(std::log(s) - z[label]);
    EXPECT_NEAR(vpq::compute_loss<float>(z, label), want, 1e-6 * std::max(1.0, want));
  }
}

TEST(ComputeLoss, BadLabelIsContractError) {
  const std::vector<float> z(3, 0.0f);
  EXPECT_THROW(vpq::compute_loss<float>(z, 3), vpq::ContractError);
  EXPECT_THROW(vpq::compute_loss<float>(z, -1), vpq::ContractError);
}

// --- optimiser --------------------------------------------------------------

vpq::ParamStore scalar_store(const std::string& name, float v) {
  vpq::ParamStore s;
  s.add(name, vpq::Tensor({1}, v));
  return s;
}

TEST(AdamW, ZeroGradientAndDecayIsFixedPoint) {
  const auto cfg = vpq::testing::tiny_config();
  vpq::ParamStore p = vpq::testing::random_params(cfg, 1);
  const vpq::ParamStore before = p;
  auto m = p.zeros_like(), v = p.zeros_like();
  for (std::size_t step = 1; step <= 3; ++step) vpq::AdamW{}.step(p, p.zeros_like(), m, v, 1e-2, 0.0, step);
  EXPECT_EQ(p, before);
}

TEST(AdamW, SingleStepMatchesClosedForm) {
  const double theta = 0.75, lr = 0.01, wd = 0.05, g = 1.0;
  auto p = scalar_store("w.weight", static_cast<float>(theta));
  auto grads = scalar_store("w.weight", static_cast<float>(g));
  auto m = p.zeros_like(), v = p.zeros_like();
  vpq::AdamW{}.step(p, grads, m, v, lr, wd, 1);
  const double m1 = 0.1 * g, v1 = 0.001 * g * g;
  const double mhat = m1 / (1 - 0.9), vhat = v1 / (1 - 0.999);
  const double want = theta - lr * (mhat / (std::sqrt(vhat) + 1e-8)) - lr * wd * theta;
  EXPECT_NEAR(p["w.weight"][0], want, 1e-7);
  EXPECT_FLOAT_EQ(m["w.weight"][0], static_cast<float>(m1));
  EXPECT_FLOAT_EQ(v["w.weight"][0], static_cast<float>(v1));
}

TEST(AdamW, DecayAloneShrinksMagnitude) {
  for (float start : {2.0f, -2.0f}) {
    auto p = scalar_store("w.weight", start);
    auto m = p.zeros_like(), v = p.zeros_like();
    vpq::AdamW{}.step(p, p.zeros_like(), m, v, 0.1, 0.05, 1);
    EXPECT_LT(std::abs(p["w.weight"][0]), std::abs(start));
  }
}

TEST(AdamW, NoDecayOnBiasNormsPositionsAndQueries) {
  for (const char* name : {"x.bias", "x.gamma", "x.beta", "pos_embed", "latent_queries", "decoder.query"}) {
    EXPECT_FALSE(vpq::decays(name)) << name;
    auto p = scalar_store(name, 2.0f);
    auto m = p.zeros_like(), v = p.zeros_like();
    vpq::AdamW{}.step(p, p.zeros_like(), m, v, 0.1, 0.05, 1);
    EXPECT_EQ(p[name][0], 2.0f) << name;
  }
  EXPECT_TRUE(vpq::decays("encoder.0.attn.q.weight"));
  EXPECT_TRUE(vpq::decays("head.weight"));
}

TEST(ClipGradNorm, ScalesOnlyAboveThreshold) {
  vpq::GradStore g;
  g.add("a", vpq::Tensor::from_rows({{3.0f, 4.0f}}));
  EXPECT_DOUBLE_EQ(vpq::clip_grad_norm(g, 10.0), 5.0);
  EXPECT_EQ(g["a"], vpq::Tensor::from_rows({{3.0f, 4.0f}}));
  EXPECT_DOUBLE_EQ(vpq::clip_grad_norm(g, 1.0), 5.0);
  EXPECT_FLOAT_EQ(g["a"][0], 0.6f);
  EXPECT_FLOAT_EQ(g["a"][1], 0.8f);
  g["a"][0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(vpq::clip_grad_norm(g, 1.0), vpq::NumericError);
}

// --- schedule ---------------------------------------------------------------

TEST(LearningRate, WarmupThenCosineToFloor) {
  TrainConfig t;
  t.steps = 1000;
  t.warmup_steps = 50;
  t.base_lr = 5e-4;
  t.min_lr = 1e-6;
  EXPECT_EQ(vpq::lr_at(0, t), 0.0);
  EXPECT_DOUBLE_EQ(vpq::lr_at(25, t), 2.5e-4);
  EXPECT_DOUBLE_EQ(vpq::lr_at(50, t), 5e-4);
  EXPECT_NEAR(vpq::lr_at(999, t), 1e-6, 1e-8);
  for (std::size_t s = 51; s < 1000; ++s) EXPECT_LE(vpq::lr_at(s, t), vpq::lr_at(s - 1, t));
  EXPECT_THROW(vpq::lr_at(1000, t), vpq::ContractError);
}

TEST(LearningRate, CifarDefaults) {
  TrainConfig t;
  EXPECT_EQ(t.steps, 350000u);
  EXPECT_EQ(t.batch_size, 512u);
  EXPECT_DOUBLE_EQ(t.base_lr, 5e-4);
}

// --- configuration ----------------------------------------------------------

TEST(KeyValue, ParsesFlatFile) {
  auto kv = vpq::KeyValueConfig::parse("# toy\n dim = 64 \nmode=fixed-q\n\nsynthetic_noise = 0.25 # inline\n");
  ModelConfig m;
  TrainConfig t;
  vpq::apply(kv, m);
  vpq::apply(kv, t);
  EXPECT_EQ(m.dim, 64u);
  EXPECT_EQ(t.mode, vpq::TrainMode::fixed_q);
  EXPECT_DOUBLE_EQ(t.synthetic_noise, 0.25);
  EXPECT_EQ(kv.first_unused(), "");
}

TEST(KeyValue, ReportsUnknownKeysAndBadValues) {
  auto kv = vpq::KeyValueConfig::parse("dimm = 64\n");
  ModelConfig m;
  vpq::apply(kv, m);
  EXPECT_EQ(kv.first_unused(), "dimm");
  EXPECT_THROW(vpq::KeyValueConfig::parse("just words\n"), vpq::ConfigError);
  EXPECT_THROW(vpq::apply(vpq::KeyValueConfig::parse("dim = sixty\n"), m), vpq::ConfigError);
  TrainConfig t;
  EXPECT_THROW(vpq::apply(vpq::KeyValueConfig::parse("mode = sometimes\n"), t), vpq::ConfigError);
  EXPECT_THROW(vpq::apply(vpq::KeyValueConfig::parse("augment = maybe\n"), t), vpq::ConfigError);
  EXPECT_THROW(vpq::KeyValueConfig::load("/nonexistent/vpq.cfg"), vpq::ConfigError);
}

TEST(TrainConfigTest, InvalidValuesRejected) {
  const ModelConfig m = tiny_model();
  TrainConfig t = tiny_train(10);
  t.mode = vpq::TrainMode::fixed_q;
  t.fixed_k = m.n_queries + 1;
  EXPECT_THROW(t.validate(m), vpq::ConfigError);
  t = tiny_train(10);
  t.warmup_steps = 10;
  EXPECT_THROW(t.validate(m), vpq::ConfigError);
  t = tiny_train(10);
  t.dataset = "mnist";
  EXPECT_THROW(t.validate(m), vpq::ConfigError);
}

// --- training loop ----------------------------------------------------------

TEST(TrainLoop, LossDecreasesOnSyntheticTask) {
  const ModelConfig m = tiny_model();
  const TrainConfig t = tiny_train(500);
  auto data = vpq::load_dataset(t, m);
  std::vector<double> losses;
  vpq::train_loop(m, t, data, [&](const vpq::StepRecord& r) { losses.push_back(r.loss); });
  ASSERT_EQ(losses.size(), 500u);
  const double first = std::accumulate(losses.begin(), losses.begin() + 50, 0.0) / 50;
  const double last = std::accumulate(losses.end() - 50, losses.end(), 0.0) / 50;
  EXPECT_LT(last, first);
}

TEST(TrainLoop, MaskingWithOneQueryEqualsFixedOne) {
  ModelConfig m = tiny_model();
  m.n_queries = 1;
  TrainConfig a = tiny_train(12);
  TrainConfig b = a;
  b.mode = vpq::TrainMode::fixed_q;
  b.fixed_k = 1;
  auto data = vpq::load_dataset(a, m);
  std::vector<vpq::StepRecord> ra, rb;
  auto sa = vpq::train_loop(m, a, data, [&](const vpq::StepRecord& r) { ra.push_back(r); });
  auto sb = vpq::train_loop(m, b, data, [&](const vpq::StepRecord& r) { rb.push_back(r); });
  ASSERT_EQ(ra.size(), rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    EXPECT_EQ(ra[i].loss, rb[i].loss);
    EXPECT_EQ(ra[i].k, 1u);
    EXPECT_EQ(rb[i].k, 1u);
  }
  EXPECT_EQ(sa.params, sb.params);
  EXPECT_EQ(sa.m, sb.m);
  EXPECT_EQ(sa.v, sb.v);
}

TEST(TrainLoop, ResumeFromCheckpointIsBitExact) {
  const ModelConfig m = tiny_model();
  const TrainConfig t = tiny_train(10);
  auto data = vpq::load_dataset(t, m);
  const auto straight = vpq::train_loop(m, t, data);

  TempDir dir("resume");
  const auto path = dir.file("half.ckpt");
  vpq::Trainer first(vpq::make_train_state(m, t), data);
  first.run(5, {}, path);
  vpq::Trainer second(vpq::load_checkpoint(path), data);
  EXPECT_EQ(second.state().step, 5u);
  second.run(10);
  EXPECT_TRUE(second.state() == straight);
  EXPECT_EQ(vpq::serialize(second.state()), vpq::serialize(straight));
}

TEST(TrainLoop, IdenticalSeedsGiveIdenticalCheckpoints) {
  const ModelConfig m = tiny_model();
  TrainConfig t = tiny_train(6);
  auto data = vpq::load_dataset(t, m);
  auto a = vpq::serialize(vpq::train_loop(m, t, data));
  EXPECT_EQ(a, vpq::serialize(vpq::train_loop(m, t, data)));
  t.seed += 1;
  EXPECT_NE(a, vpq::serialize(vpq::train_loop(m, t, data)));
}

TEST(TrainLoop, QueriesBeyondDrawnCountGetZeroGradient) {
  ModelConfig m = tiny_model();
  m.n_queries = 6;
  const TrainConfig t = tiny_train(10);
  auto data = vpq::load_dataset(t, m);
  vpq::Trainer trainer(vpq::make_train_state(m, t), data);
  auto idx = trainer.batch_indices(0);
  for (std::size_t k = 1; k <= m.n_queries; ++k) {
    auto [loss, grads] = trainer.loss_and_grads(idx, k, 0);
    const auto& g = grads["latent_queries"];
    for (std::size_t r = 0; r < m.n_queries; ++r) {
      const bool zero = std::all_of(g.row(r).begin(), g.row(r).end(), [](float v) { return v == 0.0f; });
      EXPECT_EQ(zero, r >= k) << "k=" << k << " row " << r;
    }
  }
}

TEST(TrainLoop, QueryParticipationFollowsPrefixLaw) {
  ModelConfig m = tiny_model();
  m.n_queries = 16;
  TrainConfig t = tiny_train(10);
  vpq::TrainState s = vpq::make_train_state(m, t);
  const std::size_t n = 64000;
  std::vector<double> used(m.n_queries, 0.0);
  for (std::size_t step = 0; step < n; ++step) {
    const std::size_t k = vpq::active_queries(s, step);
    for (std::size_t i = 0; i < k; ++i) used[i] += 1;
  }
  for (std::size_t i = 0; i < m.n_queries; ++i) {
    const double p = static_cast<double>(m.n_queries - i) / m.n_queries;
    const double sigma = std::sqrt(n * p * (1 - p));
    EXPECT_NEAR(used[i], n * p, 5 * sigma + 1e-9) << "query " << i;
  }
}

TEST(TrainLoop, FixedModeAlwaysUsesConfiguredCount) {
  ModelConfig m = tiny_model();
  TrainConfig t = tiny_train(10);
  t.mode = vpq::TrainMode::fixed_q;
  auto s = vpq::make_train_state(m, t);
  for (std::size_t step = 0; step < 100; ++step) EXPECT_EQ(vpq::active_queries(s, step), m.n_queries);
  s.train.fixed_k = 2;
  for (std::size_t step = 0; step < 100; ++step) EXPECT_EQ(vpq::active_queries(s, step), 2u);
}

TEST(TrainLoop, EpochVisitsEverySampleOnce) {
  const ModelConfig m = tiny_model();
  TrainConfig t = tiny_train(10);
  t.batch_size = 10;
  auto data = vpq::load_dataset(t, m);
  vpq::Trainer trainer(vpq::make_train_state(m, t), data);
  std::vector<int> seen(data.train.size(), 0);
  for (std::size_t step = 0; step < data.train.size() / t.batch_size; ++step)
    for (std::size_t i : trainer.batch_indices(step)) ++seen[i];
  for (int c : seen) EXPECT_EQ(c, 1);
}

TEST(TrainLoop, NonFiniteLossLeavesDiagnosticCheckpoint) {
  const ModelConfig m = tiny_model();
  const TrainConfig t = tiny_train(10);
  auto data = vpq::load_dataset(t, m);
  auto state = vpq::make_train_state(m, t);
  state.params["head.bias"][0] = std::numeric_limits<float>::infinity();
  TempDir dir("diag");
  const auto path = dir.file("run.ckpt");
  vpq::Trainer trainer(state, data);
  EXPECT_THROW(trainer.run(10, {}, path), vpq::NumericError);
  ASSERT_TRUE(std::filesystem::exists(path + ".diag"));
  EXPECT_EQ(vpq::load_checkpoint(path + ".diag").step, 0u);
}

TEST(TrainLoop, StepCsvLine) {
  std::ostringstream os;
  vpq::write_step_csv(os, {12, 0.5, 0.001, 3});
  EXPECT_EQ(os.str(), "12,0.5,0.001,3\n");
}

// --- checkpoint format ------------------------------------------------------

vpq::TrainState small_state() {
  const ModelConfig m = tiny_model();
  TrainConfig t = tiny_train(4);
  t.data_dir = "somewhere";
  auto data = vpq::load_dataset(t, m);
  return vpq::train_loop(m, t, data);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto s = small_state();
  TempDir dir("ckpt");
  vpq::save_checkpoint(dir.file("a.ckpt"), s);
  const auto back = vpq::load_checkpoint(dir.file("a.ckpt"));
  EXPECT_TRUE(back == s);
  EXPECT_EQ(vpq::serialize(back), vpq::serialize(s));
}

TEST(Checkpoint, StartsWithMagicAndVersion) {
  const auto bytes = vpq::serialize(small_state());
  ASSERT_GE(bytes.size(), 8u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "VPQM");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
}

TEST(Checkpoint, FlippedMagicRejected) {
  auto bytes = vpq::serialize(small_state());
  bytes[0] ^= 0x20;
  EXPECT_THROW(vpq::deserialize(bytes), vpq::FormatError);
}

TEST(Checkpoint, OtherVersionRejected) {
  auto bytes = vpq::serialize(small_state());
  bytes[4] = 2;
  try {
    vpq::deserialize(bytes);
    FAIL();
  } catch (const vpq::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, TruncationReportsOffset) {
  auto bytes = vpq::serialize(small_state());
  bytes.resize(bytes.size() / 2);
  try {
    vpq::deserialize(bytes);
    FAIL();
  } catch (const vpq::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, TrailingBytesRejected) {
  auto bytes = vpq::serialize(small_state());
  bytes.push_back(0);
  EXPECT_THROW(vpq::deserialize(bytes), vpq::FormatError);
}

TEST(Checkpoint, MissingFileRejected) {
  EXPECT_THROW(vpq::load_checkpoint("/nonexistent/x.ckpt"), vpq::FormatError);
}

}  // namespace
