#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "mvcca/mat.hpp"

namespace mvcca::rng {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Deterministic sub-stream seed from a master seed and a purpose label.
inline std::uint64_t derive(std::uint64_t master, std::string_view purpose) {
  std::uint64_t h = splitmix64(master ^ 0x51e03cb1f4c1d7a3ULL);
  for (unsigned char c : purpose) h = splitmix64(h ^ c);
  return h;
}

// Counter-based draws: value at a given index is a pure function of
// (seed, index), so parallel fills are order-independent.
inline double uniform_at(std::uint64_t seed, std::uint64_t index) {
  const std::uint64_t bits = splitmix64(seed ^ splitmix64(index));
  return static_cast<double>(bits >> 11) * 0x1.0p-53;  // [0, 1)
}

inline double normal_at(std::uint64_t seed, std::uint64_t index) {
  const double u1 = uniform_at(seed, 2 * index);
  const double u2 = uniform_at(seed, 2 * index + 1);
  const double r = std::sqrt(-2.0 * std::log(1.0 - u1));  // 1-u1 in (0,1]
  return r * std::cos(2.0 * 3.14159265358979323846 * u2);
}

/// Sequential stream for shuffles and one-off scalar draws.
class SeqRng {
 public:
  explicit SeqRng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    return r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  /// Unbiased draw from {0, ..., n-1} by rejection.
  std::uint64_t index_below(std::uint64_t n) {
    require(n > 0, "index_below: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

 private:
  std::uint64_t state_;
};

template <typename T>
void fill_normal(Dense<T>& m, std::uint64_t seed) {
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(m.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i)
    m.v[static_cast<std::size_t>(i)] = static_cast<T>(normal_at(seed, static_cast<std::uint64_t>(i)));
}

template <typename T>
void fill_uniform(Dense<T>& m, std::uint64_t seed, T lo, T hi) {
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(m.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i)
    m.v[static_cast<std::size_t>(i)] =
        lo + (hi - lo) * static_cast<T>(uniform_at(seed, static_cast<std::uint64_t>(i)));
}

/// Fisher-Yates shuffle driven by a SeqRng.
template <typename It>
void shuffle(It first, It last, SeqRng& r) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const std::uint64_t j = r.index_below(i);
    std::swap(first[i - 1], first[j]);
  }
}

}  // namespace mvcca::rng
