// Copyright (c) 2026 The vpq Authors
// SPDX-License-Identifier: Apache-2.0
//
// CIFAR-10 binary batches, a synthetic stand-in dataset written in the same
// layout, and the crop/flip/normalise input pipeline.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vpq/errors.hpp"
#include "vpq/rng.hpp"
#include "vpq/tensor.hpp"

namespace vpq {

struct Sample {
  Tensor image;  // [C, H, W], values in [0, 1]
  int label = 0;
};

struct DatasetMeta {
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::size_t n_classes = 10;
  std::size_t channels = 3;
  std::size_t image_size = 32;
  std::vector<float> mean;  // per channel, from the training split
  std::vector<float> std;
  std::string source;       // "cifar10" or "synthetic"
  std::uint64_t seed = 0;
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
  DatasetMeta meta;
};

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarRecord = 1 + kCifarPixels;
inline constexpr int kCifarClasses = 10;

/// One CIFAR-10 binary batch: records of 1 label byte and 3072 channel-planar
/// pixel bytes (R, G, B planes, each row-major).
inline std::vector<Sample> load_cifar10_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open CIFAR-10 batch '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() % kCifarRecord != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % kCifarRecord;
    throw FormatError(path.string() + ": truncated record at offset " + std::to_string(offset) + " (" +
                      std::to_string(bytes.size()) + " bytes is not a multiple of " +
                      std::to_string(kCifarRecord) + ")");
  }
  std::vector<Sample> out;
  out.reserve(bytes.size() / kCifarRecord);
  for (std::size_t off = 0; off < bytes.size(); off += kCifarRecord) {
    const int label = bytes[off];
    if (label >= kCifarClasses)
      throw FormatError(path.string() + ": label " + std::to_string(label) + " out of range at offset " +
                        std::to_string(off));
    Tensor img({3, kCifarSide, kCifarSide});
    for (std::size_t i = 0; i < kCifarPixels; ++i) img[i] = static_cast<float>(bytes[off + 1 + i]) / 255.0f;
    out.push_back({std::move(img), label});
  }
  return out;
}

/// Writes samples in the CIFAR-10 record layout. Pixels are rounded to the
/// nearest multiple of 1/255.
inline void write_cifar10_file(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write '" + path.string() + "'");
  std::vector<unsigned char> rec(kCifarRecord);
  for (const auto& s : samples) {
    if (s.image.shape() != Shape{3, kCifarSide, kCifarSide})
      throw FormatError("CIFAR-10 layout needs [3,32,32] images, got " + shape_string(s.image.shape()));
    if (s.label < 0 || s.label >= kCifarClasses) throw FormatError("CIFAR-10 label out of range");
    rec[0] = static_cast<unsigned char>(s.label);
    for (std::size_t i = 0; i < kCifarPixels; ++i)
      rec[1 + i] = static_cast<unsigned char>(std::lround(std::clamp(s.image[i], 0.0f, 1.0f) * 255.0f));
    f.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  }
  if (!f) throw FormatError("write failed for '" + path.string() + "'");
}

/// Per-channel mean and standard deviation over a split.
inline void compute_normalization(const std::vector<Sample>& split, DatasetMeta& meta) {
  if (split.empty()) throw ContractError("cannot normalise an empty split");
  const std::size_t c = split.front().image.shape()[0];
  const std::size_t plane = split.front().image.size() / c;
  std::vector<double> sum(c, 0.0), sq(c, 0.0);
  for (const auto& s : split)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = s.image[ch * plane + i];
        sum[ch] += v;
        sq[ch] += v * v;
      }
  const double n = static_cast<double>(split.size() * plane);
  meta.mean.assign(c, 0.0f);
  meta.std.assign(c, 1.0f);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double mu = sum[ch] / n;
    const double var = std::max(sq[ch] / n - mu * mu, 0.0);
    meta.mean[ch] = static_cast<float>(mu);
    meta.std[ch] = var > 1e-12 ? static_cast<float>(std::sqrt(var)) : 1.0f;
  }
}

inline Dataset load_cifar10(const std::filesystem::path& dir) {
  Dataset ds;
  for (int i = 1; i <= 5; ++i) {
    auto part = load_cifar10_file(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    ds.train.insert(ds.train.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  ds.test = load_cifar10_file(dir / "test_batch.bin");
  ds.meta.n_train = ds.train.size();
  ds.meta.n_test = ds.test.size();
  ds.meta.source = "cifar10";
  compute_normalization(ds.train, ds.meta);
  return ds;
}

struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 20;
  std::size_t n_classes = 10;
  std::size_t image_size = 32;
  double noise = 0.1;
};

namespace detail {

inline constexpr std::array<std::array<float, 3>, 6> kPalette{{
    {0.90f, 0.20f, 0.20f},
    {0.20f, 0.80f, 0.30f},
    {0.20f, 0.30f, 0.90f},
    {0.90f, 0.85f, 0.20f},
    {0.80f, 0.30f, 0.80f},
    {0.20f, 0.85f, 0.85f},
}};
inline constexpr float kBackground = 0.4f;
inline constexpr std::size_t kMaxSyntheticClasses = kPalette.size() * (kPalette.size() - 1);

/// Colours of the (top, bottom) squares for a class. Unordered colour pairs
/// are listed by palette distance, then first index; even classes put the
/// lower index on top and odd classes swap the two.
inline std::pair<std::size_t, std::size_t> class_colors(std::size_t label) {
  const std::size_t n = kPalette.size();
  std::size_t pair = label / 2;
  for (std::size_t dist = 1; dist <= n / 2; ++dist) {
    const std::size_t count = dist * 2 == n ? n / 2 : n;
    if (pair < count) {
      const std::size_t a = pair, b = (pair + dist) % n;
      return label % 2 == 0 ? std::pair{a, b} : std::pair{b, a};
    }
    pair -= count;
  }
  throw ConfigError("synthetic class " + std::to_string(label) + " out of range");
}

inline Sample synthetic_sample(int label, std::size_t size, double noise, std::mt19937_64& rng) {
  const auto [top, bottom] = class_colors(static_cast<std::size_t>(label));
  const long side = static_cast<long>(size / 4);
  const long half = static_cast<long>(size / 2);
  std::uniform_int_distribution<long> across(0, static_cast<long>(size) - side);
  std::uniform_int_distribution<long> down(0, half - side);
  const long ty = down(rng), tx = across(rng);
  const long by = half + down(rng), bx = across(rng);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto inside = [side](long y, long x, long y0, long x0) {
    return y >= y0 && x >= x0 && y < y0 + side && x < x0 + side;
  };
  Tensor img({3, size, size});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const long yy = static_cast<long>(y), xx = static_cast<long>(x);
        double v = kBackground;
        if (inside(yy, xx, ty, tx)) v = kPalette[top][c];
        else if (inside(yy, xx, by, bx)) v = kPalette[bottom][c];
        if (noise > 0.0) v += noise * gauss(rng);
        v = std::clamp(v, 0.0, 1.0);
        img[(c * size + y) * size + x] = static_cast<float>(std::lround(v * 255.0)) / 255.0f;
      }
  return {std::move(img), label};
}

}  // namespace detail

/// Class c shows two squares of side size/4, one anywhere in the top half and
/// one anywhere in the bottom half, coloured by detail::class_colors(c). Each
/// colour pair appears in both orders, so telling classes apart needs both
/// colours and which one is on top. Gaussian pixel noise follows, and pixels
/// are quantised to multiples of 1/255 so the CIFAR-10 layout stores them
/// exactly.
inline Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.n_classes < 2 || spec.n_classes > detail::kMaxSyntheticClasses)
    throw ConfigError("synthetic dataset supports 2.." + std::to_string(detail::kMaxSyntheticClasses) + " classes");
  if (spec.image_size < 8) throw ConfigError("synthetic images must be at least 8 pixels wide");
  if (spec.train_per_class == 0 || spec.test_per_class == 0) throw ConfigError("empty synthetic split");
  Dataset ds;
  auto fill = [&](std::vector<Sample>& split, std::size_t per_class, std::uint64_t which) {
    auto rng = make_rng(spec.seed, Stream::data, which);
    for (std::size_t i = 0; i < per_class; ++i)
      for (std::size_t c = 0; c < spec.n_classes; ++c)
        split.push_back(detail::synthetic_sample(static_cast<int>(c), spec.image_size, spec.noise, rng));
  };
  fill(ds.train, spec.train_per_class, 0);
  fill(ds.test, spec.test_per_class, 1);
  ds.meta.n_train = ds.train.size();
  ds.meta.n_test = ds.test.size();
  ds.meta.n_classes = spec.n_classes;
  ds.meta.image_size = spec.image_size;
  ds.meta.source = "synthetic";
  ds.meta.seed = spec.seed;
  compute_normalization(ds.train, ds.meta);
  return ds;
}

/// Eval mode normalises per channel. Train mode first pads by `pad` zero
/// pixels, takes a random crop of the original size and flips horizontally
/// with probability 1/2.
inline Tensor augment_normalize(const Tensor& image, const DatasetMeta& meta, std::mt19937_64* rng,
                                bool train_mode, std::size_t pad = 4) {
  const std::size_t c = image.shape()[0], h = image.shape()[1], w = image.shape()[2];
  if (meta.mean.size() != c || meta.std.size() != c) throw ContractError("normalisation constants do not match channels");
  Tensor out = image;
  if (train_mode) {
    if (!rng) throw ContractError("train-mode augmentation needs an rng");
    std::uniform_int_distribution<long> off(0, static_cast<long>(2 * pad));
    const long dy = off(*rng) - static_cast<long>(pad);
    const long dx = off(*rng) - static_cast<long>(pad);
    const bool flip = std::bernoulli_distribution(0.5)(*rng);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const long sx0 = flip ? static_cast<long>(w - 1 - x) : static_cast<long>(x);
          const long sy = static_cast<long>(y) + dy, sx = sx0 + dx;
          const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<long>(h) && sx < static_cast<long>(w);
          out[(ch * h + y) * w + x] = inside ? image[(ch * h + sy) * w + sx] : 0.0f;
        }
  }
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * w; ++i) {
      float& v = out[ch * h * w + i];
      v = (v - meta.mean[ch]) / meta.std[ch];
    }
  return out;
}

}  // namespace vpq
