#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace mflow {

/// Seeded random stream with platform-independent output.
///
/// Only the engine comes from the standard library; the distributions in
/// <random> are implementation-defined, so the transforms here are written out.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (one value per call).
  double normal();

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  bool bernoulli(double p) { return uniform() < p; }

  std::string state() const;
  void restore(const std::string& state);

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::mt19937_64 engine_;
};

/// Derives an independent child seed (splitmix64 finaliser).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace mflow
