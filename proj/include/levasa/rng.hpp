#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>

namespace levasa {

// splitmix64 stream. Uniforms take the top 53 bits; normals use Box-Muller on
// two consecutive uniforms (cosine branch only, nothing cached) so that any
// other implementation following the same rule reproduces the stream exactly.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  std::size_t uniform_index(std::size_t n) {
    auto k = static_cast<std::size_t>(uniform() * static_cast<double>(n));
    return k < n ? k : n - 1;
  }

  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(1.0 - u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t state() const { return state_; }

  // Independent child stream, e.g. one per sample or per worker.
  SeededRng derive(std::uint64_t stream) const { return SeededRng(mix(state_, stream)); }

  static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
    SeededRng r(seed ^ (stream * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL));
    return r.next_u64();
  }

 private:
  std::uint64_t state_;
};

template <class RandomIt>
void shuffle(RandomIt first, RandomIt last, SeededRng& rng) {
  const auto n = static_cast<std::size_t>(last - first);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.uniform_index(i);
    std::swap(first[i - 1], first[j]);
  }
}

}  // namespace levasa
