// Copyright (c) 2026 The vpq Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint, all integers and floats little-endian:
//
//   "VPQM" | u32 version
//   model config  (9 x u64, f32 ln_eps)
//   train config  (field order as in serialize())
//   u64 step | u64 rng seed | u64 rng counter
//   params, first moments, second moments; each as
//     u32 count, then per entry: u32 name length, name bytes, u32 rank,
//     rank x u64 dims, product(dims) x f32

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "vpq/config.hpp"
#include "vpq/errors.hpp"
#include "vpq/params.hpp"

namespace vpq {

inline constexpr char kCheckpointMagic[4] = {'V', 'P', 'Q', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything needed to continue training bit-exactly. Random draws are
/// counter-based on (seed, step), so the generator state is that pair.
struct TrainState {
  ModelConfig model;
  TrainConfig train;
  std::size_t step = 0;  // number of completed optimiser steps
  ParamStore params;
  ParamStore m;
  ParamStore v;

  friend bool operator==(const TrainState&, const TrainState&) = default;
};

using Checkpoint = TrainState;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& b, std::string origin) : b_(b), origin_(std::move(origin)) {}

  std::uint8_t u8() {
    need(1, "u8");
    return b_[off_++];
  }
  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[off_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8, "u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[off_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n, "string");
    std::string s(b_.begin() + static_cast<std::ptrdiff_t>(off_), b_.begin() + static_cast<std::ptrdiff_t>(off_ + n));
    off_ += n;
    return s;
  }
  std::size_t offset() const { return off_; }
  bool at_end() const { return off_ == b_.size(); }

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(origin_ + ": " + what + " at offset " + std::to_string(off_));
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (b_.size() - off_ < n)
      throw FormatError(origin_ + ": truncated while reading " + what + " at offset " + std::to_string(off_));
  }

  const std::vector<std::uint8_t>& b_;
  std::string origin_;
  std::size_t off_ = 0;
};

inline void write_store(ByteWriter& w, const ParamStore& s) {
  w.u32(static_cast<std::uint32_t>(s.size()));
  for (const auto& e : s.entries()) {
    w.str(e.name);
    w.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape()) w.u64(d);
    for (float v : e.value.data()) w.f32(v);
  }
}

inline ParamStore read_store(ByteReader& r) {
  ParamStore s;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8) r.fail("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    const std::size_t count = shape_size(shape);
    if (count > (std::size_t{1} << 32)) r.fail("implausible tensor size");
    std::vector<float> data(count);
    for (auto& v : data) v = r.f32();
    if (s.contains(name)) r.fail("duplicate entry '" + name + "'");
    s.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return s;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const TrainState& s) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  const auto& m = s.model;
  for (std::size_t v : {m.image_size, m.patch_size, m.in_channels, m.dim, m.n_queries, m.n_sa_layers,
                        m.n_heads, m.mlp_ratio, m.n_classes})
    w.u64(v);
  w.f32(m.ln_eps);
  const auto& t = s.train;
  w.u64(t.steps);
  w.u64(t.batch_size);
  w.f64(t.base_lr);
  w.f64(t.min_lr);
  w.u64(t.warmup_steps);
  w.f64(t.weight_decay);
  w.f64(t.grad_clip);
  w.u32(static_cast<std::uint32_t>(t.mode));
  w.u64(t.fixed_k);
  w.u64(t.seed);
  w.u64(t.checkpoint_every);
  w.u8(t.augment ? 1 : 0);
  w.str(t.dataset);
  w.str(t.data_dir);
  w.u64(t.data_seed);
  w.u64(t.synthetic_train_per_class);
  w.u64(t.synthetic_test_per_class);
  w.f64(t.synthetic_noise);
  w.u64(s.step);
  w.u64(t.seed);
  w.u64(s.step);
  detail::write_store(w, s.params);
  detail::write_store(w, s.m);
  detail::write_store(w, s.v);
  return w.bytes();
}

inline TrainState deserialize(const std::vector<std::uint8_t>& bytes, const std::string& origin = "checkpoint") {
  detail::ByteReader r(bytes, origin);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.u8());
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError(origin + ": bad magic, not a VPQM checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError(origin + ": unsupported checkpoint version " + std::to_string(version));
  TrainState s;
  auto& m = s.model;
  for (std::size_t* f : {&m.image_size, &m.patch_size, &m.in_channels, &m.dim, &m.n_queries, &m.n_sa_layers,
                         &m.n_heads, &m.mlp_ratio, &m.n_classes})
    *f = r.u64();
  m.ln_eps = r.f32();
  auto& t = s.train;
  t.steps = r.u64();
  t.batch_size = r.u64();
  t.base_lr = r.f64();
  t.min_lr = r.f64();
  t.warmup_steps = r.u64();
  t.weight_decay = r.f64();
  t.grad_clip = r.f64();
  const std::uint32_t mode = r.u32();
  if (mode > 1) r.fail("unknown training mode " + std::to_string(mode));
  t.mode = static_cast<TrainMode>(mode);
  t.fixed_k = r.u64();
  t.seed = r.u64();
  t.checkpoint_every = r.u64();
  t.augment = r.u8() != 0;
  t.dataset = r.str();
  t.data_dir = r.str();
  t.data_seed = r.u64();
  t.synthetic_train_per_class = r.u64();
  t.synthetic_test_per_class = r.u64();
  t.synthetic_noise = r.f64();
  s.step = r.u64();
  const std::uint64_t rng_seed = r.u64();
  const std::uint64_t rng_counter = r.u64();
  if (rng_seed != t.seed || rng_counter != s.step) r.fail("random stream state disagrees with seed/step");
  s.params = detail::read_store(r);
  s.m = detail::read_store(r);
  s.v = detail::read_store(r);
  if (!r.at_end()) r.fail("trailing bytes");
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw FormatError(origin + ": invalid model config: " + e.what());
  }
  return s;
}

inline void save_checkpoint(const std::filesystem::path& path, const TrainState& s) {
  const auto bytes = serialize(s);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot write checkpoint '" + tmp + "'");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes, path.string());
}

}  // namespace vpq
