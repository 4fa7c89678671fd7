#pragma once

#include "bfr/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace bfr {

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error < tolerance; }
};

/// ‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor). Gradients with norm below `floor` are
/// compared absolutely.
double relative_error(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b, double floor = 1e-6);

/// Compares backward() of `loss_fn` against central finite differences
/// (step `eps`) for every element of every tensor in `leaves`. The leaves are
/// perturbed in place and restored.
GradCheckResult check_gradients(std::string name, const std::function<Tensor<double>()>& loss_fn,
                                std::vector<Tensor<double>> leaves, double tolerance,
                                double eps = 1e-5);

/// Central finite-difference gradient of a scalar function w.r.t. one leaf.
Eigen::ArrayXd numeric_gradient(const std::function<Tensor<double>()>& loss_fn, Tensor<double> leaf,
                                double eps = 1e-5);

}  // namespace bfr
