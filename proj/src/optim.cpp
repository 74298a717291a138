// SPDX-License-Identifier: Apache-2.0

#include "fgmoe/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace fgmoe {

double lr_at(std::uint64_t step, std::uint64_t steps_per_epoch, const TrainConfig& config) {
  const std::uint64_t warmup = config.warmup_epochs * steps_per_epoch;
  const std::uint64_t total = config.epochs * steps_per_epoch;
  if (step < warmup) {
    const double frac = static_cast<double>(step) / static_cast<double>(warmup);
    return config.warmup_lr + (config.base_lr - config.warmup_lr) * frac;
  }
  const std::uint64_t span = total > warmup + 1 ? total - 1 - warmup : 1;
  const double t = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
  return config.min_lr + 0.5 * (config.base_lr - config.min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

template <typename T>
AdamW<T>::AdamW(ParamList<T> params, double weight_decay)
    : params_(std::move(params)), weight_decay_(weight_decay) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.size(), T(0));
    v_.emplace_back(p.tensor.size(), T(0));
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
void AdamW<T>::step(double lr) {
  for (auto& p : params_) {
    if (!p.tensor.has_grad()) p.tensor.zero_grad();
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("adamw: non-finite gradient in " + p.name);
    }
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_));
  const T b1 = T(kBeta1), b2 = T(kBeta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = T(kEps);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    auto value = p.tensor.mutable_data();
    const auto grad = p.tensor.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    const T decay = p.decay ? static_cast<T>(1.0 - lr * weight_decay_) : T(1);
    for (std::size_t i = 0; i < value.size(); ++i) {
      const T g = grad[i];
      value[i] *= decay;
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      value[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace fgmoe
