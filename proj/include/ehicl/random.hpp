// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace ehicl {

/// Deterministic random stream.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. The distributions are implemented here rather than taken from
/// <random>, whose algorithms are implementation-defined, so a seed yields
/// the same doubles on every toolchain.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed);

  std::uint64_t next_u64();

  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi);

  /// Standard normal via the Box-Muller transform.
  double normal();
  double normal(double mean, double stddev);

  /// Uniform integer on [0, n). n must be positive.
  std::size_t below(std::size_t n);

  bool bernoulli(double p);

  /// Uniformly random permutation of 0..n-1 (Fisher-Yates).
  std::vector<std::size_t> permutation(std::size_t n);

  /// Independent child stream keyed by `stream_id`; does not advance *this.
  RandomStream fork(std::uint64_t stream_id) const;

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finalizer, used to derive well-mixed seeds from structured keys.
std::uint64_t mix_seed(std::uint64_t x);

}  // namespace ehicl
