// SPDX-License-Identifier: Apache-2.0
//
// Random inputs shared by the guidance tests and the acceptance binary.

#pragma once

#include <algorithm>

#include "fgmoe/guidance.hpp"
#include "fgmoe/rng.hpp"
#include "fgmoe/tensor.hpp"

namespace fixtures {

inline fgmoe::BinaryMask full_mask(std::size_t side, std::uint8_t value) {
  fgmoe::BinaryMask m = fgmoe::BinaryMask::zeros(side, side);
  std::fill(m.bits.begin(), m.bits.end(), value);
  return m;
}

/// Softmax over tokens of normal logits with standard deviation `spread`.
inline fgmoe::Tensor<double> random_dispatch(std::size_t batch, std::size_t m, std::size_t s, fgmoe::Rng& rng,
                                             double spread) {
  std::vector<double> logits(batch * m * s);
  for (auto& v : logits) v = spread * rng.normal();
  return fgmoe::softmax(fgmoe::Tensor<double>::from({batch, m, s}, std::move(logits)), 1);
}

/// Empty (20%), a random rectangle (40%) or sparse speckle (40%).
inline fgmoe::BinaryMask random_mask(std::size_t side, fgmoe::Rng& rng) {
  fgmoe::BinaryMask m = fgmoe::BinaryMask::zeros(side, side);
  const double kind = rng.uniform();
  if (kind < 0.2) return m;
  if (kind < 0.6) {
    const std::size_t y0 = rng.below(side), x0 = rng.below(side);
    const std::size_t h = 1 + rng.below(side - y0), w = 1 + rng.below(side - x0);
    for (std::size_t y = y0; y < y0 + h; ++y)
      for (std::size_t x = x0; x < x0 + w; ++x) m.bits[y * side + x] = 1;
    return m;
  }
  const double density = rng.uniform(0.0, 0.1);
  for (auto& b : m.bits) b = rng.uniform() < density ? 1 : 0;
  return m;
}

}  // namespace fixtures
