#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>

namespace tomolab {

/// Mixes an arbitrary tuple of 64-bit words into one key. Used to derive an
/// independent stream per (seed, replication, scheme, probe, link) so that
/// results never depend on evaluation order.
std::uint64_t stream_key(std::initializer_list<std::uint64_t> words);

/// SplitMix64 generator; satisfies UniformRandomBitGenerator.
class StreamRng {
 public:
  using result_type = std::uint64_t;

  explicit StreamRng(std::uint64_t key) : state_(key) {}
  StreamRng(std::initializer_list<std::uint64_t> words) : state_(stream_key(words)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

 private:
  std::uint64_t state_;
};

}  // namespace tomolab
