// SPDX-License-Identifier: Apache-2.0
//
// Brute-force reference for the foreground-alignment loss, written with plain
// loops over std::vector and sharing no code with the library. Pixel-to-cell
// ownership is decided by exact integer interval overlap.

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

struct PixelMask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> bits;
};

// dispatch[b] is an m x S row-major matrix.
struct Layer {
  std::vector<std::vector<double>> dispatch;
  std::size_t tokens = 0, slots = 0;
  bool background = false;
};

inline std::vector<std::uint8_t> resize_any(const PixelMask& mask, std::size_t side) {
  std::vector<std::uint8_t> grid(side * side, 0);
  for (std::size_t cy = 0; cy < side; ++cy) {
    for (std::size_t cx = 0; cx < side; ++cx) {
      for (std::size_t py = 0; py < mask.height; ++py) {
        // pixel row [py, py+1) scaled by side vs cell row [cy, cy+1) scaled by height
        if (!(py * side < (cy + 1) * mask.height && (py + 1) * side > cy * mask.height)) continue;
        for (std::size_t px = 0; px < mask.width; ++px) {
          if (!(px * side < (cx + 1) * mask.width && (px + 1) * side > cx * mask.width)) continue;
          if (mask.bits[py * mask.width + px] != 0) grid[cy * side + cx] = 1;
        }
      }
    }
  }
  return grid;
}

inline double aux_loss(const std::vector<Layer>& layers, const std::vector<PixelMask>& masks, double eps) {
  if (layers.empty()) return 0.0;
  double total = 0.0;
  for (const Layer& layer : layers) {
    std::size_t side = 0;
    while (side * side < layer.tokens) ++side;
    double sum_h = 0.0;
    std::size_t valid = 0;
    for (std::size_t b = 0; b < layer.dispatch.size(); ++b) {
      const auto& x = layer.dispatch[b];
      std::vector<double> w(layer.tokens, 0.0);
      for (std::size_t i = 0; i < layer.tokens; ++i) {
        for (std::size_t j = 0; j < layer.slots; ++j) w[i] += x[i * layer.slots + j];
        w[i] /= static_cast<double>(layer.slots);
      }
      double mean_w = 0.0;
      for (double v : w) mean_w += v;
      mean_w /= static_cast<double>(layer.tokens);
      auto m = resize_any(masks[b], side);
      if (layer.background) {
        for (auto& v : m) v = v ? 0 : 1;
      }
      std::size_t count = 0;
      for (auto v : m) count += v;
      if (count == 0) continue;
      double inter = 0.0, uni = 0.0;
      for (std::size_t i = 0; i < layer.tokens; ++i) {
        const bool bi = w[i] >= mean_w;
        if (bi && m[i]) inter += w[i];
        if (bi || m[i]) uni += w[i];
      }
      const double p = inter / (uni + eps);
      sum_h += -std::log(p + eps);
      ++valid;
    }
    total += valid == 0 ? 0.0 : sum_h / static_cast<double>(valid);
  }
  return total / static_cast<double>(layers.size());
}

}  // namespace oracle
