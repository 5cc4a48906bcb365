#pragma once

// Seed derivation. Every random stream in a run is seeded from the run seed and
// a stream label, so adding a stream never shifts the others.

#include <cstdint>
#include <random>
#include <string_view>

namespace afseg {

using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t& state);

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label, std::uint64_t first, Rest... rest) {
  std::uint64_t s = derive_seed(derive_seed(seed, label), first);
  ((s = derive_seed(s, std::uint64_t(rest))), ...);
  return s;
}

}  // namespace afseg
