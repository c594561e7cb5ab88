#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace infodiff {

using Rng = std::mt19937_64;

// Independent stream keyed by (seed, k0, k1, ...), e.g. (seed, step) in
// training or (seed, source, candidate) in sampling.
inline Rng make_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys = {}) {
  std::vector<std::uint32_t> words;
  words.push_back(static_cast<std::uint32_t>(seed));
  words.push_back(static_cast<std::uint32_t>(seed >> 32));
  for (auto k : keys) {
    words.push_back(static_cast<std::uint32_t>(k));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return Rng(seq);
}

inline double standard_normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

}  // namespace infodiff
