// Copyright (c) 2026 The vpq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>

namespace vpq {

/// Named random streams so that every draw is a function of (seed, stream,
/// counter) and nothing has to be carried between steps.
enum class Stream : std::uint64_t {
  init = 1,
  query_count = 2,
  batch = 3,
  augment = 4,
  subset = 5,
  data = 6,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t counter,
                                 std::uint64_t sub = 0) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(stream));
  h = splitmix64(h ^ counter);
  return splitmix64(h ^ sub);
}

inline std::mt19937_64 make_rng(std::uint64_t seed, Stream stream, std::uint64_t counter,
                                std::uint64_t sub = 0) {
  return std::mt19937_64(derive_seed(seed, stream, counter, sub));
}

}  // namespace vpq
