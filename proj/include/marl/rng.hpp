#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <vector>

namespace marl {

/// Counter-based generator: every draw is a pure function of
/// (seed, stream, counter), so samples do not depend on evaluation order or
/// on how work is split across workers.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  static constexpr std::uint64_t mix(std::uint64_t x) {
    // splitmix64 finalizer
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  }

  std::uint64_t bits(std::uint64_t stream, std::uint64_t counter) const {
    return mix(mix(seed_ ^ mix(stream)) ^ mix(counter + 0x632BE59BD9B4E019ULL));
  }

  /// Uniform in [0, 1).
  double uniform(std::uint64_t stream, std::uint64_t counter) const {
    return static_cast<double>(bits(stream, counter) >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller on counters (2c, 2c+1).
  double normal(std::uint64_t stream, std::uint64_t counter) const {
    const double u1 = 1.0 - uniform(stream, 2 * counter);  // (0, 1]
    const double u2 = uniform(stream, 2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t seed_;
};

/// Combines identifiers into one stream id.
inline std::uint64_t stream_id(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x243F6A8885A308D3ULL;
  for (std::uint64_t p : parts) h = CounterRng::mix(h ^ CounterRng::mix(p + 0x13198A2E03707344ULL));
  return h;
}

/// Sequential view over one stream of a CounterRng.
class RngStream {
 public:
  RngStream(const CounterRng& gen, std::uint64_t stream) : gen_(gen), stream_(stream) {}

  double uniform() { return gen_.uniform(stream_, counter_++); }
  double normal() { return gen_.normal(stream_, counter_++); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    const unsigned __int128 wide =
        static_cast<unsigned __int128>(gen_.bits(stream_, counter_++)) * n;
    return static_cast<std::uint64_t>(wide >> 64);
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

  std::uint64_t stream() const { return stream_; }

 private:
  CounterRng gen_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
};

}  // namespace marl
