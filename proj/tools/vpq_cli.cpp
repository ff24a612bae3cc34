// Copyright (c) 2026 The vpq Authors
// SPDX-License-Identifier: Apache-2.0
//
// vpq: train, evaluate, sweep, profile and inspect query-masked Perceivers.
//
// Exit codes: 0 success, 2 config error, 3 data-format error, 4 numeric failure.

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>

#include "vpq/vpq.hpp"

namespace {

enum ExitCode { kOk = 0, kInternal = 1, kConfig = 2, kFormat = 3, kNumeric = 4 };

struct Loaded {
  vpq::ModelConfig model;
  vpq::TrainConfig train;
};

Loaded read_config(const std::string& path) {
  Loaded out;
  auto kv = vpq::KeyValueConfig::load(path);
  vpq::apply(kv, out.model);
  vpq::apply(kv, out.train);
  if (auto key = kv.first_unused(); !key.empty()) throw vpq::ConfigError("unknown config key '" + key + "'");
  return out;
}

/// Writes to the named file, or stdout when the name is empty.
class Output {
 public:
  explicit Output(const std::string& path) {
    if (path.empty()) return;
    file_.open(path, std::ios::binary);
    if (!file_) throw vpq::ConfigError("cannot open '" + path + "' for writing");
  }
  std::ostream& stream() { return file_.is_open() ? file_ : std::cout; }

 private:
  std::ofstream file_;
};

// Checkpoint plus the split it is evaluated on.
struct EvalContext {
  vpq::TrainState state;
  vpq::EvalSet set;
};

EvalContext open_checkpoint(const std::string& ckpt, const std::string& data_dir, const std::string& split) {
  EvalContext ctx{vpq::load_checkpoint(ckpt), {}};
  auto train = ctx.state.train;
  if (!data_dir.empty()) {
    train.dataset = "cifar10";
    train.data_dir = data_dir;
  }
  auto data = vpq::load_dataset(train, ctx.state.model);
  if (split == "test") ctx.set = vpq::make_eval_set(data.test, data.meta);
  else if (split == "train") ctx.set = vpq::make_eval_set(data.train, data.meta);
  else throw vpq::ConfigError("split must be 'train' or 'test'");
  if (ctx.set.size() == 0) throw vpq::ConfigError("split '" + split + "' is empty");
  return ctx;
}

void check_k(std::size_t k, std::size_t q) {
  if (k == 0 || k > q)
    throw vpq::ConfigError("k=" + std::to_string(k) + " outside [1, " + std::to_string(q) + "]");
}

void check_t(double t) {
  if (!(t > 0.0 && t <= 1.0)) throw vpq::ConfigError("threshold must be in (0, 1]");
}

/// Default sweep counts that fit the model.
std::vector<std::size_t> default_k_list(std::size_t q) {
  std::vector<std::size_t> out;
  for (std::size_t k : {1, 2, 4, 8, 16, 32, 48, 64})
    if (k <= q) out.push_back(k);
  if (out.back() != q) out.push_back(q);
  return out;
}

// --- subcommands ------------------------------------------------------------

struct TrainArgs {
  std::string config, data_dir, mode, out, log;
  std::optional<std::size_t> fixed_k, steps;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a) {
  auto cfg = read_config(a.config);
  if (!a.data_dir.empty()) {
    cfg.train.dataset = "cifar10";
    cfg.train.data_dir = a.data_dir;
  }
  if (a.mode == "masking") cfg.train.mode = vpq::TrainMode::query_masking;
  else if (a.mode == "fixed-q") cfg.train.mode = vpq::TrainMode::fixed_q;
  else if (!a.mode.empty()) throw vpq::ConfigError("--mode must be 'masking' or 'fixed-q'");
  if (a.fixed_k) cfg.train.fixed_k = *a.fixed_k;
  if (a.steps) {
    cfg.train.steps = *a.steps;
    if (cfg.train.warmup_steps >= cfg.train.steps) {
      cfg.train.warmup_steps = cfg.train.steps / 20;
      std::cerr << "note: warmup_steps reduced to " << cfg.train.warmup_steps << " for --steps " << cfg.train.steps << '\n';
    }
  }
  if (a.seed) cfg.train.seed = *a.seed;
  cfg.model.validate();
  cfg.train.validate(cfg.model);

  auto data = vpq::load_dataset(cfg.train, cfg.model);
  std::cerr << "train: " << data.train.size() << " examples, " << vpq::count_params(cfg.model) << " parameters, "
            << cfg.train.steps << " steps\n";

  Output log(a.log.empty() ? a.out + ".log.csv" : a.log);
  log.stream() << "step,loss,lr,k_drawn\n";
  const std::size_t every = std::max<std::size_t>(1, cfg.train.steps / 20);
  auto observer = [&](const vpq::StepRecord& r) {
    vpq::write_step_csv(log.stream(), r);
    if (r.step % every == 0 || r.step == cfg.train.steps)
      std::cerr << "step " << r.step << " loss " << r.loss << " lr " << r.lr << '\n';
  };
  auto state = vpq::train_loop(cfg.model, cfg.train, data, observer, a.out);

  auto test = vpq::make_eval_set(data.test, data.meta);
  if (test.size() > 0)
    std::cout << "accuracy(k=" << cfg.model.n_queries
              << ") = " << vpq::eval_fixed_k(state.params, cfg.model, test, cfg.model.n_queries) << '\n';
  std::cout << "checkpoint: " << a.out << '\n';
  return kOk;
}

struct EvalArgs {
  std::string ckpt, data_dir, split = "test";
  std::optional<std::size_t> k;
  std::optional<double> threshold;
};

int run_eval(const EvalArgs& a) {
  auto ctx = open_checkpoint(a.ckpt, a.data_dir, a.split);
  const auto& cfg = ctx.state.model;
  if (a.threshold) {
    check_t(*a.threshold);
    auto recs = vpq::sweep_dqs(ctx.state.params, cfg, ctx.set, {*a.threshold});
    const auto& r = recs.front();
    std::cout << "threshold " << r.value << " accuracy " << r.accuracy << " queries mean " << r.q_mean << " std "
              << r.q_std << " min " << r.q_min << " max " << r.q_max << '\n';
    return kOk;
  }
  const std::size_t k = a.k.value_or(cfg.n_queries);
  check_k(k, cfg.n_queries);
  std::cout << "k " << k << " accuracy " << vpq::eval_fixed_k(ctx.state.params, cfg, ctx.set, k) << '\n';
  return kOk;
}

struct SweepArgs {
  std::string ckpt, data_dir, split = "test", out_csv;
  std::vector<std::size_t> k_list;
  std::vector<double> t_list;
  std::vector<std::string> modes{"fixed_k", "random_subset"};
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
  bool time = false;
};

vpq::SweepOptions sweep_options(const SweepArgs& a) {
  vpq::SweepOptions opt;
  opt.random_repeats = a.repeats;
  opt.seed = a.seed;
  opt.measure_time = a.time;
  return opt;
}

int run_sweep_k(const SweepArgs& a) {
  auto ctx = open_checkpoint(a.ckpt, a.data_dir, a.split);
  const auto& cfg = ctx.state.model;
  auto ks = a.k_list.empty() ? default_k_list(cfg.n_queries) : a.k_list;
  for (auto k : ks) check_k(k, cfg.n_queries);
  std::vector<vpq::SweepMode> modes;
  for (const auto& m : a.modes) {
    modes.push_back(vpq::parse_sweep_mode(m));
    if (modes.back() == vpq::SweepMode::dqs) throw vpq::ConfigError("use sweep-dqs for thresholds");
  }
  if (a.repeats == 0) throw vpq::ConfigError("--repeats must be positive");
  auto recs = vpq::sweep_queries(ctx.state.params, cfg, ctx.set, ks, modes, sweep_options(a));
  Output out(a.out_csv);
  vpq::write_sweep_csv(out.stream(), recs);
  return kOk;
}

int run_sweep_dqs(const SweepArgs& a) {
  auto ctx = open_checkpoint(a.ckpt, a.data_dir, a.split);
  auto ts = a.t_list.empty() ? std::vector<double>{0.6, 0.65, 0.7, 0.8, 0.9, 0.99} : a.t_list;
  for (double t : ts) check_t(t);
  auto recs = vpq::sweep_dqs(ctx.state.params, ctx.state.model, ctx.set, ts, sweep_options(a));
  Output out(a.out_csv);
  vpq::write_sweep_csv(out.stream(), recs);
  return kOk;
}

struct ProfileArgs {
  std::string config, out_csv;
  std::vector<std::size_t> k_list;
  std::size_t batch = 8, repeats = 5;
  bool no_time = false;
};

int run_profile(const ProfileArgs& a) {
  vpq::ModelConfig cfg;
  if (!a.config.empty()) cfg = read_config(a.config).model;
  cfg.validate();
  auto ks = a.k_list.empty() ? default_k_list(cfg.n_queries) : a.k_list;
  for (auto k : ks) check_k(k, cfg.n_queries);
  std::vector<vpq::ProfileRow> rows;
  if (a.no_time) {
    for (auto k : ks) rows.push_back({vpq::flop_model(cfg, k), {}});
  } else {
    if (a.batch == 0) throw vpq::ConfigError("--batch must be positive");
    if (a.repeats < 3) throw vpq::ConfigError("--repeats must be at least 3");
    auto params = vpq::init_params(cfg, 0);
    std::mt19937_64 rng(0);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::vector<vpq::Tensor> batch;
    for (std::size_t i = 0; i < a.batch; ++i) {
      vpq::Tensor img(vpq::Shape{cfg.in_channels, cfg.image_size, cfg.image_size});
      for (auto& v : img.data()) v = u(rng);
      batch.push_back(std::move(img));
    }
    rows = vpq::profile(params, cfg, batch, ks, a.repeats);
  }
  Output out(a.out_csv);
  vpq::write_profile_csv(out.stream(), rows);
  return kOk;
}

struct ExportArgs {
  std::string ckpt, data_dir, split = "test", out;
};

int run_export(const ExportArgs& a) {
  auto ctx = open_checkpoint(a.ckpt, a.data_dir, a.split);
  auto atlas = vpq::export_attention(ctx.state.params, ctx.state.model, ctx.set, a.out);
  std::cout << "query,entropy\n";
  for (std::size_t q = 0; q < atlas.n_queries; ++q) std::cout << q << ',' << vpq::entropy(atlas.map(q)) << '\n';
  std::cerr << "wrote " << a.out << ".csv and " << a.out << ".pgm\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Perceiver with query masking and dynamic query selection"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  train->add_option("--config", ta.config, "key = value config file")->required();
  train->add_option("--data-dir", ta.data_dir, "CIFAR-10 binary directory (overrides the config dataset)");
  train->add_option("--mode", ta.mode, "masking or fixed-q");
  train->add_option("--fixed-k", ta.fixed_k, "query count for fixed-q mode");
  train->add_option("--steps", ta.steps);
  train->add_option("--seed", ta.seed);
  train->add_option("--out", ta.out, "checkpoint path")->required();
  train->add_option("--log", ta.log, "step CSV path (default <out>.log.csv)");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "top-1 accuracy of a checkpoint");
  eval->add_option("--ckpt", ea.ckpt)->required();
  auto* k_opt = eval->add_option("--k", ea.k, "first k queries (default all)");
  eval->add_option("--threshold", ea.threshold, "dynamic query selection threshold")->excludes(k_opt);
  eval->add_option("--split", ea.split, "train or test");
  eval->add_option("--data-dir", ea.data_dir);

  SweepArgs ka;
  auto* sweep_k = app.add_subcommand("sweep-k", "accuracy over query counts");
  sweep_k->add_option("--ckpt", ka.ckpt)->required();
  sweep_k->add_option("--k-list", ka.k_list)->delimiter(',');
  sweep_k->add_option("--modes", ka.modes, "fixed_k and/or random_subset")->delimiter(',');
  sweep_k->add_option("--repeats", ka.repeats, "random subset repeats");
  sweep_k->add_option("--seed", ka.seed);
  sweep_k->add_option("--split", ka.split);
  sweep_k->add_option("--data-dir", ka.data_dir);
  sweep_k->add_option("--out-csv", ka.out_csv);
  sweep_k->add_flag("--time", ka.time, "record wall time per row");

  SweepArgs da;
  auto* sweep_dqs = app.add_subcommand("sweep-dqs", "accuracy and query counts over thresholds");
  sweep_dqs->add_option("--ckpt", da.ckpt)->required();
  sweep_dqs->add_option("--t-list", da.t_list)->delimiter(',');
  sweep_dqs->add_option("--split", da.split);
  sweep_dqs->add_option("--data-dir", da.data_dir);
  sweep_dqs->add_option("--out-csv", da.out_csv);
  sweep_dqs->add_flag("--time", da.time, "record wall time per row");

  ProfileArgs pa;
  auto* profile = app.add_subcommand("profile", "analytic FLOPs and measured forward time per k");
  profile->add_option("--config", pa.config, "model config (default: 6.18M-parameter CIFAR model)");
  profile->add_option("--k-list", pa.k_list)->delimiter(',');
  profile->add_option("--batch", pa.batch);
  profile->add_option("--repeats", pa.repeats);
  profile->add_flag("--no-time", pa.no_time, "FLOPs only");
  profile->add_option("--out-csv", pa.out_csv);

  ExportArgs xa;
  auto* export_attn = app.add_subcommand("export-attn", "dataset-averaged cross-attention maps");
  export_attn->add_option("--ckpt", xa.ckpt)->required();
  export_attn->add_option("--out", xa.out, "output prefix for .csv and .pgm")->required();
  export_attn->add_option("--split", xa.split);
  export_attn->add_option("--data-dir", xa.data_dir);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  std::cout << std::setprecision(6);
  try {
    if (*train) return run_train(ta);
    if (*eval) return run_eval(ea);
    if (*sweep_k) return run_sweep_k(ka);
    if (*sweep_dqs) return run_sweep_dqs(da);
    if (*profile) return run_profile(pa);
    if (*export_attn) return run_export(xa);
  } catch (const vpq::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const vpq::FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kFormat;
  } catch (const vpq::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInternal;
  }
  return kInternal;
}
