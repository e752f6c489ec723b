#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedser {

/// splitmix64 finalizer; used to derive independent stream seeds from an
/// experiment seed plus structural coordinates (fold, trial, round, device).
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic seed derivation independent of evaluation order or thread
/// scheduling: derive_seed(seed, round, device) is a pure function.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = mix64(base);
  for (std::uint64_t p : parts) h = mix64(h ^ mix64(p));
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a) {
  return derive_seed(base, {a});
}
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  return derive_seed(base, {a, b});
}
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b,
                                 std::uint64_t c) {
  return derive_seed(base, {a, b, c});
}

inline std::mt19937_64 make_rng(std::uint64_t seed) { return std::mt19937_64(seed); }

}  // namespace fedser
