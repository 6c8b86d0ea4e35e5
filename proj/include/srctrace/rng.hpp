#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace srctrace {

// All randomness in the library flows through the helpers below. mt19937_64
// output is pinned by the standard, and the distribution transforms are
// hand-rolled, so identical seeds give identical streams on every platform
// and standard library.

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// One deterministic stream per (seed, stream) pair; streams decorrelate the
// epoch counter, layer index etc. from the user seed.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return std::mt19937_64(splitmix64(seed) ^ splitmix64(stream * 0x9E3779B97F4A7C15ULL + 1));
}

// Uniform in [0, 1), 53-bit resolution.
inline double uniform_unit(std::mt19937_64& rng) { return (rng() >> 11) * 0x1.0p-53; }

inline double uniform_in(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform_unit(rng);
}

// Unbiased draw from [0, n) by rejection.
inline std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t min = (0 - n) % n;
  std::uint64_t x = rng();
  while (x < min) x = rng();
  return x % n;
}

// Standard normal via Box-Muller; u1 is kept strictly positive.
inline double gaussian(std::mt19937_64& rng) {
  const double u1 = ((rng() >> 11) + 1) * 0x1.0p-53;
  const double u2 = (rng() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

// Fisher-Yates with the unbiased draw above.
template <typename T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(uniform_below(rng, i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace srctrace
