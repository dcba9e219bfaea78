#pragma once

#include <cstdint>
#include <random>

namespace ldpm {

/// Stream identifiers used when splitting a root seed. Every consumer of
/// randomness draws from its own stream so modules never share RNG state.
enum class Stream : std::uint64_t {
  FeatureMap = 1,
  Centers = 2,
  Embeddings = 3,
  Errors = 4,
  SurrogateInit = 5,
  SurrogateShuffle = 6,
  BackboneInit = 7,
  BatchShuffle = 8,
  KMeans = 9,
  Replication = 10,
  Diagnostics = 11,
};

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derive an independent seed for (root, stream, index).
constexpr std::uint64_t derive_seed(std::uint64_t root, Stream stream, std::uint64_t index = 0) noexcept {
  return mix64(mix64(root ^ mix64(static_cast<std::uint64_t>(stream))) + index);
}

/// Seedable 64-bit Mersenne Twister (std::mt19937_64) with the few draws the
/// project needs. Normal draws go through std::normal_distribution, so streams
/// are bit-reproducible for a given standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t root, Stream stream, std::uint64_t index = 0)
      : engine_(derive_seed(root, stream, index)) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_(engine_); }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace ldpm
