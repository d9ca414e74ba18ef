#pragma once

#include <cstdint>
#include <cmath>

namespace sfnmt {

// Counter-based PRNG: every draw is a pure hash of (seed, stream, counter),
// so a given draw index yields the same value on every platform and in any
// evaluation order. Streams are cheap to split off for independent consumers
// (per-layer dropout, data shuffling, init).
class Rng {
 public:
  Rng() = default;
  Rng(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t counter = 0)
      : seed_(seed), stream_(stream), counter_(counter) {}

  std::uint64_t next_u64() { return mix(seed_, stream_, counter_++); }

  // uniform in [0, 1)
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_uniform();
  }

  // standard normal via Box-Muller (one value per pair of draws)
  double next_normal() {
    double u1 = next_uniform();
    double u2 = next_uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // integer in [0, n)
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  Rng split(std::uint64_t substream) const {
    return Rng(seed_, mix(stream_, substream, 0x9e3779b97f4a7c15ull), 0);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

 private:
  // splitmix64-style finalizer over the three words
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z += b + 0x94d049bb133111ebull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    z += c + 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 31)) * 0xd6e8feb86659fd93ull;
    return z ^ (z >> 32);
  }

  std::uint64_t seed_ = 0;
  std::uint64_t stream_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace sfnmt
