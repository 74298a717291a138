// SPDX-License-Identifier: Apache-2.0

#include "fgmoe/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace fgmoe {

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(),
                     [this](const GradCheckEntry& e) { return e.max_rel_error <= rel_tol; });
}

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& e : entries) w = std::max(w, e.max_rel_error);
  return w;
}

double grad_rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradRelFloor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const std::function<Tensor<double>()>& f,
                           std::vector<NamedTensor<double>> inputs, double rel_tol) {
  FiniteCheckGuard finite;
  for (auto& in : inputs) {
    if (!in.tensor.requires_grad()) {
      throw std::invalid_argument("grad_check: input '" + in.name + "' does not require grad");
    }
    in.tensor.zero_grad();
  }
  const Tensor<double> y = f();
  if (y.size() != 1) throw ShapeError("grad_check: f must be scalar, got " + shape_str(y.shape()));
  y.backward();

  GradCheckReport report;
  report.rel_tol = rel_tol;
  NoGradGuard no_grad;
  for (auto& in : inputs) {
    GradCheckEntry entry;
    entry.name = in.name;
    entry.count = in.tensor.size();
    const std::vector<double> analytic(in.tensor.grad().begin(), in.tensor.grad().end());
    auto values = in.tensor.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double x = values[i];
      const double h = std::max(1e-6, 1e-4 * std::abs(x));
      values[i] = x + h;
      const double fp = f().item();
      values[i] = x - h;
      const double fm = f().item();
      values[i] = x;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = grad_rel_error(analytic[i], numeric);
      if (i == 0 || err > entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.analytic = analytic[i];
        entry.numeric = numeric;
      }
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace fgmoe
