// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "fgmoe/config.hpp"
#include "fgmoe/soft_moe.hpp"

namespace fgmoe {

/// Per-step schedule: linear from warmup_lr to base_lr over the warmup
/// steps, then cosine from base_lr down to min_lr at the last step.
double lr_at(std::uint64_t step, std::uint64_t steps_per_epoch, const TrainConfig& config);

/// AdamW with decoupled weight decay applied only to parameters flagged
/// `decay`.
template <typename T>
class AdamW {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  AdamW(ParamList<T> params, double weight_decay);

  /// Throws NumericError naming the parameter if any gradient is non-finite;
  /// no parameter is modified in that case.
  void step(double lr);
  void zero_grad();

  std::uint64_t steps() const { return step_; }
  const ParamList<T>& params() const { return params_; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  void set_steps(std::uint64_t steps) { step_ = steps; }

 private:
  ParamList<T> params_;
  double weight_decay_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace fgmoe
