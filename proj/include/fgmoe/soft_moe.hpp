// SPDX-License-Identifier: Apache-2.0
//
// Soft mixture-of-experts block.
//
// With tokens x (m x d) and slot parameters phi (d x N*p), the shared logits
// x*phi are normalized two ways: over tokens (dispatch D, column stochastic)
// and over slots (combine C, row stochastic). Slots D^T x are processed by
// the expert owning them, mixed back with C, and joined to the skip branch
// through a LayerScale variant.

#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "fgmoe/rng.hpp"
#include "fgmoe/tensor.hpp"

namespace fgmoe {

template <typename T>
struct Param {
  std::string name;
  Tensor<T> tensor;
  bool decay = true;
};

template <typename T>
using ParamList = std::vector<Param<T>>;

enum class LayerScaleVariant { identity, scalar, vector, scalar_linear, no_skip };

std::string_view to_string(LayerScaleVariant v);
/// Accepts identity | scalar | vector | scalar_linear | no_skip.
LayerScaleVariant parse_layerscale(std::string_view text);

/// phi is d x (experts * slots); column i*slots + j is slot j of expert i.
template <typename T>
struct SlotParams {
  Tensor<T> phi;
  std::size_t experts = 0;
  std::size_t slots = 0;

  std::size_t total() const { return experts * slots; }
  static SlotParams init(std::size_t dim, std::size_t experts, std::size_t slots, Rng& rng);
};

/// Softmax of x*phi over the token axis. x is [m,d] or [B,m,d].
template <typename T>
Tensor<T> compute_dispatch_weights(const Tensor<T>& x, const SlotParams<T>& slots);
/// Softmax of x*phi over the slot axis.
template <typename T>
Tensor<T> compute_combine_weights(const Tensor<T>& x, const SlotParams<T>& slots);

/// N independent two-layer GELU perceptrons stored stacked so that all
/// experts run as one batched product. Expert i owns w1[i], b1[i], w2[i], b2[i].
template <typename T>
struct ExpertMlp {
  Tensor<T> w1;  // [N, d, h]
  Tensor<T> b1;  // [N, 1, h]
  Tensor<T> w2;  // [N, h, d]
  Tensor<T> b2;  // [N, 1, d]
  std::size_t experts = 0, dim = 0, hidden = 0;

  static ExpertMlp init(std::size_t experts, std::size_t dim, std::size_t hidden, Rng& rng);

  /// Applies expert `index` to each row of `rows` ([r, d]).
  Tensor<T> forward(std::size_t index, const Tensor<T>& rows) const;
  /// slots is [N, r, d]; slice i goes through expert i.
  Tensor<T> forward_all(const Tensor<T>& slots) const;
};

template <typename T>
struct LayerScale {
  LayerScaleVariant variant = LayerScaleVariant::identity;
  Tensor<T> gamma;          // [1] for scalar and scalar_linear, [d] for vector
  Tensor<T> linear_weight;  // [d, d], scalar_linear only
  Tensor<T> linear_bias;    // [d]

  static LayerScale init(LayerScaleVariant variant, std::size_t dim, Rng& rng);

  /// Joins the combine output `r` with the skip input `x`.
  Tensor<T> apply(const Tensor<T>& r, const Tensor<T>& x) const;
};

template <typename T>
struct SoftMoeOutput {
  Tensor<T> y;         // combine output joined with the skip branch
  Tensor<T> combined;  // r = C * expert outputs, before the skip
  Tensor<T> dispatch;  // [B, m, N*p]
  Tensor<T> combine;   // [B, m, N*p]
};

template <typename T>
class SoftMoe {
 public:
  SoftMoe(std::size_t dim, std::size_t experts, std::size_t slots, std::size_t hidden,
          LayerScaleVariant variant, Rng& rng);

  /// Routes `x` and uses it as the skip input as well.
  SoftMoeOutput<T> forward(const Tensor<T>& x) const { return forward(x, x); }
  /// Routes `route` ([m,d] or [B,m,d]); `skip` feeds the residual branch.
  SoftMoeOutput<T> forward(const Tensor<T>& route, const Tensor<T>& skip) const;

  void collect(const std::string& prefix, ParamList<T>& out) const;

  SlotParams<T> slots;
  ExpertMlp<T> experts;
  LayerScale<T> layerscale;
};

}  // namespace fgmoe
