// Copyright (c) 2026 The vpq Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "test_support.hpp"
#include "vpq/profiler.hpp"

namespace {

using vpq::ModelConfig;

ModelConfig cifar_config() { return ModelConfig{}; }

double mflops(std::size_t k) { return static_cast<double>(vpq::flop_model(cifar_config(), k).total) / 1e6; }

TEST(FlopModel, ReferenceTableWithinTolerance) {
  const std::vector<std::pair<std::size_t, double>> table{{2, 17},  {4, 29},   {8, 52},   {16, 99},
                                                          {32, 195}, {48, 293}, {64, 394}};
  for (auto [k, want] : table) EXPECT_LT(std::abs(mflops(k) - want) / want, 0.15) << "k=" << k << " " << mflops(k);
  EXPECT_LT(std::abs(mflops(1) - 11) / 11, 0.25) << mflops(1);
}

TEST(FlopModel, QuadraticInK) {
  const auto cfg = cifar_config();
  auto total = [&](std::size_t k) { return static_cast<double>(vpq::flop_model(cfg, k).total); };
  // Fit a + b k + c k^2 through k = 1, 2, 3 and check every k.
  const double f1 = total(1), f2 = total(2), f3 = total(3);
  const double c = (f3 - 2 * f2 + f1) / 2, b = f2 - f1 - 3 * c, a = f1 - b - c;
  for (std::size_t k = 1; k <= cfg.n_queries; ++k) EXPECT_EQ(total(k), a + b * k + c * k * k) << k;
  EXPECT_GT(c, 0.0);
}

TEST(FlopModel, StrictlyIncreasingWithConstantSecondDifference) {
  const auto cfg = cifar_config();
  std::vector<std::int64_t> t;
  for (std::size_t k = 1; k <= cfg.n_queries; ++k) t.push_back(static_cast<std::int64_t>(vpq::flop_model(cfg, k).total));
  const std::int64_t second = t[2] - 2 * t[1] + t[0];
  EXPECT_GT(second, 0);
  for (std::size_t i = 1; i < t.size(); ++i) EXPECT_GT(t[i], t[i - 1]);
  for (std::size_t i = 2; i < t.size(); ++i) EXPECT_EQ(t[i] - 2 * t[i - 1] + t[i - 2], second);
}

TEST(FlopModel, MarginalCostMatchesTableSlope) {
  const double slope = (394.0 - 293.0) / 16.0;
  const double marginal = mflops(33) - mflops(32);
  EXPECT_LT(std::abs(marginal - slope) / slope, 0.20) << marginal;
}

TEST(FlopModel, ComponentsSumToTotal) {
  for (const ModelConfig& cfg : {cifar_config(), vpq::testing::tiny_config()})
    for (std::size_t k = 1; k <= cfg.n_queries; ++k) {
      auto f = vpq::flop_model(cfg, k);
      EXPECT_EQ(f.total, f.patch_embed + f.cross_attention + f.encoder + f.decoder + f.head);
      EXPECT_EQ(f.encoder, cfg.n_sa_layers * f.encoder_block);
      EXPECT_EQ(f.other(), f.patch_embed + f.decoder + f.head);
      EXPECT_EQ(f.k, k);
    }
}

TEST(FlopModel, HandCountForTinyConfig) {
  // d=8, r=4, 4 patches of dim 48, one encoder block, 3 classes, k=2.
  const auto f = vpq::flop_model(vpq::testing::tiny_config(), 2);
  EXPECT_EQ(f.patch_embed, 4u * 48 * 8);
  EXPECT_EQ(f.cross_attention, 2u * 4 * 64 + 2u * 2 * 64 + 2u * 2 * 4 * 8 + 2u * 4 * 2 * 64);
  EXPECT_EQ(f.encoder_block, 4u * 2 * 64 + 2u * 2 * 2 * 8 + 2u * 4 * 2 * 64);
  EXPECT_EQ(f.decoder, 2u * 64 + 2u * 4 * 64 + 2u * 2 * 64 + 2u * 2 * 8);
  EXPECT_EQ(f.head, 8u * 3);
}

TEST(FlopModel, OutOfRangeKIsContractError) {
  EXPECT_THROW(vpq::flop_model(cifar_config(), 0), vpq::ContractError);
  EXPECT_THROW(vpq::flop_model(cifar_config(), 65), vpq::ContractError);
}

TEST(DqsFlopModel, FullCrossAttentionThenKeptTokens) {
  const auto cfg = cifar_config();
  for (std::size_t kept : {1u, 7u, 64u}) {
    auto d = vpq::dqs_flop_model(cfg, kept);
    auto f = vpq::flop_model(cfg, kept);
    EXPECT_EQ(d.encoder, f.encoder);
    EXPECT_EQ(d.decoder, f.decoder);
    EXPECT_EQ(d.cross_attention, vpq::flop_model(cfg, cfg.n_queries).cross_attention);
    EXPECT_EQ(d.total, d.patch_embed + d.cross_attention + d.encoder + d.decoder + d.head);
  }
  EXPECT_EQ(vpq::dqs_flop_model(cfg, 64).total, vpq::flop_model(cfg, 64).total);
}

// --- timing -----------------------------------------------------------------

std::vector<vpq::Tensor> batch_of(const ModelConfig& cfg, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<vpq::Tensor> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(vpq::testing::random_image(cfg, rng));
  return out;
}

TEST(Timing, NeedsThreeRepeats) {
  const auto cfg = vpq::testing::tiny_config();
  auto params = vpq::init_params(cfg, 1);
  auto batch = batch_of(cfg, 2, 1);
  EXPECT_THROW(vpq::time_forward(params, cfg, batch, vpq::TimingControl::fixed(1), 2), vpq::ContractError);
  auto r = vpq::time_forward(params, cfg, batch, vpq::TimingControl::fixed(1), 3);
  EXPECT_EQ(r.repeats, 3u);
  EXPECT_EQ(r.threads, 1u);
  EXPECT_EQ(r.batch, 2u);
  EXPECT_GE(r.mean_ms, 0.0);
  auto d = vpq::time_forward(params, cfg, batch, vpq::TimingControl::dqs(0.9), 3);
  EXPECT_EQ(d.control.kind, vpq::TimingControl::Kind::threshold);
}

TEST(Timing, FullQueryRowIsExactlyOne) {
  const auto cfg = vpq::testing::tiny_config();
  auto params = vpq::init_params(cfg, 2);
  auto rows = vpq::profile(params, cfg, batch_of(cfg, 4, 2), {1, 2, cfg.n_queries}, 3);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[2].timing.relative, 1.0);
  auto partial = vpq::profile(params, cfg, batch_of(cfg, 4, 2), {1, 2}, 3);
  EXPECT_EQ(partial.size(), 2u);
}

TEST(Timing, StableAtBatch512OnTinyConfig) {
  const auto cfg = vpq::testing::tiny_config();
  auto params = vpq::init_params(cfg, 3);
  auto r = vpq::time_forward(params, cfg, batch_of(cfg, 512, 3), vpq::TimingControl::fixed(cfg.n_queries), 7, 2);
  EXPECT_LT(r.std_ms / r.mean_ms, 0.2) << r.mean_ms << " +- " << r.std_ms;
}

TEST(Timing, TimeGrowsWithQueryCount) {
  ModelConfig cfg;
  cfg.dim = 64;
  cfg.n_heads = 2;
  cfg.n_sa_layers = 4;
  auto params = vpq::init_params(cfg, 4);
  auto batch = batch_of(cfg, 8, 4);
  std::vector<double> med;
  for (std::size_t k : {1u, 8u, 32u, 64u})
    med.push_back(vpq::time_forward(params, cfg, batch, vpq::TimingControl::fixed(k), 5, 1).median_ms);
  for (std::size_t i = 1; i < med.size(); ++i) EXPECT_GE(med[i], med[i - 1]) << i;
}

TEST(ProfileCsv, HeaderAndRows) {
  const auto cfg = vpq::testing::tiny_config();
  std::vector<vpq::ProfileRow> rows{{vpq::flop_model(cfg, 2), {}}};
  rows[0].timing.mean_ms = 1.5;
  rows[0].timing.relative = 0.5;
  std::ostringstream os;
  vpq::write_profile_csv(os, rows);
  const auto f = rows[0].flops;
  std::ostringstream want;
  want << "k,flops_total,flops_xattn,flops_encoder,flops_other,time_ms_mean,time_ms_std,time_rel\n"
       << "2," << f.total << ',' << f.cross_attention << ',' << f.encoder << ',' << f.other() << ",1.5,0,0.5\n";
  EXPECT_EQ(os.str(), want.str());
}

TEST(NormalizeTimings, RequiresFullRow) {
  std::vector<vpq::TimingRecord> recs(1);
  recs[0].control = vpq::TimingControl::fixed(2);
  EXPECT_THROW(vpq::normalize_timings(recs, 4), vpq::ContractError);
}

}  // namespace
