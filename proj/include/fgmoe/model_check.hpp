// SPDX-License-Identifier: Apache-2.0
//
// End-to-end gradient check of L_cls + lambda * L_aux through the whole
// model, 64-bit only. The binary attention masks are computed once at the
// starting point and held fixed, so the loss is smooth in every parameter.

#pragma once

#include <cstdint>

#include "fgmoe/grad_check.hpp"
#include "fgmoe/vit.hpp"

namespace fgmoe {

/// Upper bound on tokens * dim * depth accepted by model_grad_check.
inline constexpr std::size_t kGradCheckBudget = 1024;

struct ModelGradCheckOptions {
  ModelConfig model = tiny_model_config();
  /// Skip variant installed on the last MoE block (the guided one).
  LayerScaleVariant variant = LayerScaleVariant::vector;
  double lambda = 0.01;
  std::size_t batch = 2;
  std::uint64_t seed = 0;
  double rel_tol = 1e-4;
};

/// tokens * dim * depth of `model`.
std::size_t grad_check_cost(const ModelConfig& model);

/// Throws std::invalid_argument if the model exceeds kGradCheckBudget.
GradCheckReport model_grad_check(const ModelGradCheckOptions& options);

}  // namespace fgmoe
