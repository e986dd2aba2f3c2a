#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace condenser {

/// Seeded pseudo-random source. Streams are derived from a list of words
/// (seed, purpose tag, counters) so that any batch, mask or dropout draw can be
/// regenerated from its coordinates alone.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : Rng({seed}) {}
  Rng(std::initializer_list<std::uint64_t> words) {
    std::vector<std::uint32_t> seq;
    for (auto w : words) {
      seq.push_back(static_cast<std::uint32_t>(w));
      seq.push_back(static_cast<std::uint32_t>(w >> 32));
    }
    std::seed_seq ss(seq.begin(), seq.end());
    engine_.seed(ss);
  }

  /// Uniform in [0, 1).
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  /// Normal resampled until it lies within two standard deviations.
  double truncated_normal(double stddev) {
    std::normal_distribution<double> dist(0.0, 1.0);
    for (;;) {
      double z = dist(engine_);
      if (z >= -2.0 && z <= 2.0) return z * stddev;
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

// Purpose tags for derived streams.
namespace stream {
inline constexpr std::uint64_t kInit = 0x1;
inline constexpr std::uint64_t kShuffle = 0x2;
inline constexpr std::uint64_t kMask = 0x3;
inline constexpr std::uint64_t kDropout = 0x4;
inline constexpr std::uint64_t kNegatives = 0x5;
inline constexpr std::uint64_t kSynthetic = 0x6;
}  // namespace stream

}  // namespace condenser
