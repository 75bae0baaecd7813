#pragma once

#include <cstdint>
#include <random>

namespace convrec {

// splitmix64; used to derive independent stream seeds from (seed, index) pairs
// so parallel workers and per-record draws stay reproducible.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL + b * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::mt19937 make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return std::mt19937(static_cast<std::uint32_t>(mix_seed(seed, stream)));
}

// Normal(0, std) truncated to +-2 std, the usual embedding init.
template <class S>
S truncated_normal(std::mt19937& rng, S stddev) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (;;) {
    double v = dist(rng);
    if (std::abs(v) <= 2.0 * static_cast<double>(stddev)) return static_cast<S>(v);
  }
}

}  // namespace convrec
