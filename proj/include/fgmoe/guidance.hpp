// SPDX-License-Identifier: Apache-2.0
//
// Foreground-alignment auxiliary loss for soft MoE dispatch weights.
//
// Per sample and guided layer:
//   W_i = mean_j D_ij                    (average dispatch, sums to 1)
//   B_i = [W_i >= mean(W)]               (binary attention mask)
//   M'  = foreground mask on the token grid (complemented for background)
//   O = B and M', U = B or M'
//   p   = sum(W*O) / (sum(W*U) + eps)
//   h   = -log(p + eps)
// Samples whose M' is empty are skipped; the loss is the mean of h over the
// remaining samples, averaged with equal weight over guided layers. B, O and
// U are data; gradients reach the model only through W.

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fgmoe/tensor.hpp"

namespace fgmoe {

enum class MaskPolarity { foreground, background };

struct GuidanceTarget {
  int layer = 0;
  MaskPolarity polarity = MaskPolarity::foreground;
};

struct GuidanceConfig {
  bool enabled = false;
  double lambda = 0.01;
  double epsilon = 1e-6;
  std::vector<GuidanceTarget> targets;

  /// Throws std::invalid_argument on lambda < 0 or epsilon <= 0.
  void validate() const;
};

/// "4:fg,3:bg" <-> targets. Polarity tokens: fg|foreground|bg|background.
std::vector<GuidanceTarget> parse_targets(const std::string& text);
std::string format_targets(const std::vector<GuidanceTarget>& targets);

/// Row-major binary mask; any nonzero byte counts as set.
struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;

  static BinaryMask zeros(std::size_t height, std::size_t width);
  std::size_t count() const;
  bool empty() const { return count() == 0; }
  BinaryMask complement() const;
  bool at(std::size_t row, std::size_t col) const { return bits[row * width + col] != 0; }
};

/// Side of the square token grid holding m tokens; throws if m is not a
/// perfect square.
std::size_t grid_side(std::size_t tokens);

/// Mean of the dispatch weights over the slot axis: [m,S] -> [m] or
/// [B,m,S] -> [B,m]. The token count must be a perfect square.
template <typename T>
Tensor<T> average_dispatch(const Tensor<T>& dispatch);

/// B_i = 1 iff w_i >= mean(w).
template <typename T>
std::vector<std::uint8_t> binarize_by_mean(std::span<const T> w);

/// Downsamples a pixel mask to side x side cells. A cell is set iff any
/// source pixel overlapping it with positive area is set.
BinaryMask resample_mask(const BinaryMask& mask, std::size_t side);

/// Weighted overlap score for one sample. `w` is the [m] average dispatch.
/// Throws std::logic_error if `grid_mask` is empty.
template <typename T>
Tensor<T> alignment_score(const Tensor<T>& w, std::span<const std::uint8_t> attention,
                          std::span<const std::uint8_t> grid_mask, T eps);

template <typename T>
struct LayerDispatch {
  int layer = 0;
  MaskPolarity polarity = MaskPolarity::foreground;
  Tensor<T> dispatch;  // [B, m, N*p]
};

/// Binary attention masks keyed by layer, one vector per sample.
using AttentionMasks = std::map<int, std::vector<std::vector<std::uint8_t>>>;

template <typename T>
struct AuxLoss {
  Tensor<T> loss;
  AttentionMasks attention;
  std::size_t valid_pairs = 0;
};

/// `masks` holds one pixel mask per sample. When `frozen` is given its
/// attention masks replace the thresholded ones (used to hold B fixed while
/// probing the loss with finite differences).
template <typename T>
AuxLoss<T> aux_loss(const std::vector<LayerDispatch<T>>& layers, std::span<const BinaryMask> masks,
                    double eps, const AttentionMasks* frozen = nullptr);

/// L_cls + lambda * L_aux; throws NumericError naming a non-finite term.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& loss_cls, const Tensor<T>& loss_aux, double lambda);

/// Unweighted |a and b| / |a or b|; 0 when the union is empty.
double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

}  // namespace fgmoe
