// SPDX-License-Identifier: Apache-2.0
//
// Pre-norm vision transformer over pure patch tokens (no class token) with
// soft MoE substituted for the MLP in selected blocks. Block indices are
// 1-based throughout.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "fgmoe/soft_moe.hpp"
#include "fgmoe/tensor.hpp"

namespace fgmoe {

struct ModelConfig {
  std::size_t image_side = 32;
  std::size_t patch_side = 4;
  std::size_t channels = 3;
  std::size_t dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::vector<int> moe_blocks{3, 4};
  std::size_t experts = 8;
  std::size_t slots = 1;
  std::size_t mlp_expansion = 4;
  /// MoE blocks not listed use the identity skip.
  std::map<int, LayerScaleVariant> layerscale{{4, LayerScaleVariant::vector}};
  std::size_t classes = 8;

  std::size_t grid() const { return image_side / patch_side; }
  std::size_t tokens() const { return grid() * grid(); }
  bool is_moe(int block) const;
  LayerScaleVariant layerscale_for(int block) const;

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Eight blocks, MoE in the last two with 32 single-slot experts.
ModelConfig reference_model_config();
/// image 8, patch 4, d 8, depth 2, MoE at {2}, N 2, p 1, 2 classes.
ModelConfig tiny_model_config();

std::string format_layerscale(const std::map<int, LayerScaleVariant>& map);
std::map<int, LayerScaleVariant> parse_layerscale_map(const std::string& text);

template <typename T>
struct ForwardTrace {
  Tensor<T> logits;                   // [B, classes]
  std::map<int, Tensor<T>> dispatch;  // block -> [B, m, N*p]
};

template <typename T>
struct Block {
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> qkv_weight, qkv_bias;    // [d, 3d], [3d]
  Tensor<T> proj_weight, proj_bias;  // [d, d], [d]
  Tensor<T> ln2_gain, ln2_bias;
  // Dense blocks only.
  Tensor<T> fc1_weight, fc1_bias, fc2_weight, fc2_bias;
  std::optional<SoftMoe<T>> moe;
};

template <typename T>
struct BlockOutput {
  Tensor<T> x;
  std::optional<Tensor<T>> dispatch;
};

template <typename T>
class VisionTransformer {
 public:
  VisionTransformer(const ModelConfig& config, std::uint64_t seed);

  /// images: [B, C, H, W] with H = W = image_side.
  ForwardTrace<T> forward(const Tensor<T>& images) const;

  /// [B, C, H, W] -> [B, m, d]; patches are taken row-major.
  Tensor<T> patch_embed(const Tensor<T>& images) const;
  /// x + MSA(LN(x)) for block `index` (1-based).
  Tensor<T> attention(const Tensor<T>& x, int index) const;
  BlockOutput<T> block_forward(const Tensor<T>& x, int index) const;

  /// Parameters in a fixed order with stable names.
  ParamList<T> parameters() const;

  const ModelConfig& config() const { return config_; }
  Block<T>& block(int index) { return blocks_.at(static_cast<std::size_t>(index - 1)); }
  const Block<T>& block(int index) const { return blocks_.at(static_cast<std::size_t>(index - 1)); }

  Tensor<T> patch_weight, patch_bias;  // [C*P*P, d], [d]
  Tensor<T> pos_embed;                 // [m, d]
  Tensor<T> norm_gain, norm_bias;
  Tensor<T> head_weight, head_bias;  // [d, classes], [classes]

 private:
  ModelConfig config_;
  std::vector<Block<T>> blocks_;
};

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// Copies parameter values between models of identical configuration,
/// converting precision as needed.
template <typename To, typename From>
void copy_parameters(const VisionTransformer<From>& from, VisionTransformer<To>& to);

}  // namespace fgmoe
