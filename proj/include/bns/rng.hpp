#pragma once

#include <cstdint>
#include <random>

namespace bns {

enum class Purpose : std::uint64_t {
  plan = 1,
  shuffle = 2,
  virtual_samples = 3,
  init = 4,
  node_choice = 5,
  data = 6,
  bench = 7,
  test = 8,
};

/// Identifies one substream under a master seed. `index` is a layer, an
/// iteration or a node depending on the purpose; `sub` disambiguates further.
struct StreamKey {
  std::uint64_t epoch = 0;
  std::uint64_t index = 0;
  Purpose purpose = Purpose::test;
  std::uint64_t sub = 0;
};

std::uint64_t splitmix64(std::uint64_t x);

/// Hashes (seed, key) into the seed of an independent 64-bit generator.
std::uint64_t substream_seed(std::uint64_t seed, const StreamKey& key);

/// Deterministic random stream: identical (seed, key) pairs always yield the
/// same sequence.
class RngStream {
public:
  RngStream(std::uint64_t seed, const StreamKey& key)
      : seed_(seed), key_(key), engine_(substream_seed(seed, key)) {}

  std::uint64_t seed() const { return seed_; }
  const StreamKey& key() const { return key_; }

  /// Derives another stream from the same master seed.
  RngStream substream(const StreamKey& key) const { return RngStream(seed_, key); }

  /// Uniform integer in [lo, hi].
  std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi) {
    return std::uniform_int_distribution<std::uint64_t>(lo, hi)(engine_);
  }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

private:
  std::uint64_t seed_;
  StreamKey key_;
  std::mt19937_64 engine_;
};

}  // namespace bns
