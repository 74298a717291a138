// SPDX-License-Identifier: Apache-2.0
//
// Seeded randomness with platform-independent conversions. The standard
// <random> distributions are implementation defined, so only raw engine
// output is used and mapped to reals here.

#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace fgmoe {

std::uint64_t splitmix64(std::uint64_t x);
/// Order-sensitive combination used for per-sample and per-epoch seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  /// Normal(0, stddev) resampled until within +-2 stddev.
  double trunc_normal(double stddev);

  std::string state() const;
  void set_state(const std::string& text);

 private:
  std::mt19937_64 engine_;
};

}  // namespace fgmoe
