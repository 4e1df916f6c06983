#pragma once

#include <cstdint>
#include <random>

namespace skimba {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent child seed for a named stream; keeps every consumer of a root
/// seed reproducible regardless of call order elsewhere.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream) {
  return splitmix64(splitmix64(root) ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

template <typename T>
T standard_normal(Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  return static_cast<T>(dist(rng));
}

template <typename T>
T uniform(Rng& rng, T lo, T hi) {
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  return static_cast<T>(dist(rng));
}

inline std::size_t uniform_index(Rng& rng, std::size_t lo, std::size_t hi_inclusive) {
  std::uniform_int_distribution<std::size_t> dist(lo, hi_inclusive);
  return dist(rng);
}

}  // namespace skimba
