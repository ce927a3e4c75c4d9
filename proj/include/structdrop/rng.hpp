#pragma once

#include <cstdint>
#include <random>

namespace structdrop {

/// Reproducible random source.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard. All conversions (uniform reals, bounded integers, normals) are
/// implemented here rather than through <random> distributions, whose
/// algorithms are implementation-defined. The same seed therefore yields the
/// same draws with every conforming toolchain.
class SeededRng
{
public:
  explicit SeededRng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Uniform on {0, ..., n-1}; n must be positive. Unbiased (Lemire rejection).
  std::uint64_t below(std::uint64_t n);
  /// Uniform on the closed range {lo, ..., hi}.
  std::int64_t between(std::int64_t lo, std::int64_t hi);
  /// Standard normal via Box-Muller (one value per call, no cached spare).
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  /// Independent stream keyed by (base, stream). Used to give every region
  /// or worker its own generator without sharing state.
  static SeededRng derive(std::uint64_t base, std::uint64_t stream);

private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// SplitMix64 finalizer; exposed for seed derivation.
std::uint64_t mix64(std::uint64_t x);

} // namespace structdrop
