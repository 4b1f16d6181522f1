#pragma once

#include <cstdint>
#include <random>

namespace mstkd {

using Rng = std::mt19937_64;

// splitmix64 finalizer; derives independent stream seeds from a base seed and
// a small integer tag so that e.g. teacher g always gets the same stream.
constexpr uint64_t derive_seed(uint64_t base, uint64_t tag) {
  uint64_t z = base + 0x9E3779B97F4A7C15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Rng make_rng(uint64_t base, uint64_t tag) {
  return Rng(derive_seed(base, tag));
}

}  // namespace mstkd
