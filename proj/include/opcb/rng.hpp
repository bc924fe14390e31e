#pragma once

#include <cstdint>
#include <random>

namespace opcb {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent streams from (master, index).
inline constexpr std::uint64_t mix_seed(std::uint64_t master, std::uint64_t index) noexcept {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t master, std::uint64_t stream = 0) { return Rng{mix_seed(master, stream)}; }

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>{lo, hi}(rng); }

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  return std::normal_distribution<double>{mean, stddev}(rng);
}

}  // namespace opcb
