// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fgmoe/tensor.hpp"

namespace fgmoe {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

struct GradCheckEntry {
  std::string name;
  std::size_t count = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  double rel_tol = 0.0;
  std::vector<GradCheckEntry> entries;

  bool passed() const;
  double worst() const;
};

/// Relative error with an absolute floor on the denominator so that
/// gradients that are exactly zero compare against finite-difference noise
/// instead of dividing by it.
double grad_rel_error(double analytic, double numeric);
inline constexpr double kGradRelFloor = 1e-5;

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step max(1e-6, 1e-4 |x|), one input element at a time.
/// `f` must rebuild its graph from the tensors in `inputs` on every call.
/// Throws NumericError naming the op if any evaluation goes non-finite.
GradCheckReport grad_check(const std::function<Tensor<double>()>& f,
                           std::vector<NamedTensor<double>> inputs, double rel_tol);

}  // namespace fgmoe
