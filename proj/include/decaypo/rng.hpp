#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace decaypo {

// SplitMix64 finalizer; used to derive independent seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Named substream of a root seed ("data", "sampling", "sampo", "init", ...).
constexpr std::uint64_t substream(std::uint64_t root, std::string_view name) {
  return mix64(root ^ mix64(fnv1a(name)));
}

/// Indexed substream, e.g. one generator per prompt or per example.
constexpr std::uint64_t substream(std::uint64_t root, std::uint64_t index) {
  return mix64(mix64(root) + 0x632BE59BD9B4E019ull * (index + 1));
}

/// Deterministic generator. The engine is std::mt19937_64, whose output
/// sequence is fixed by the standard; the conversions to real numbers are
/// done here rather than with std::*_distribution so that draws are
/// identical across standard-library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal();

  /// Exponential(1).
  double exponential();

 private:
  std::mt19937_64 engine_;
};

}  // namespace decaypo
