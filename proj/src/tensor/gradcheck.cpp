#include "bfr/gradcheck.hpp"

#include <algorithm>

namespace bfr {

double relative_error(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b, double floor) {
  const double diff = (a - b).matrix().norm();
  const double denom = std::max({a.matrix().norm(), b.matrix().norm(), floor});
  return diff / denom;
}

Eigen::ArrayXd numeric_gradient(const std::function<Tensor<double>()>& loss_fn, Tensor<double> leaf,
                                double eps) {
  NoGradGuard no_grad;
  auto& values = leaf.mutable_values();
  Eigen::ArrayXd grad(values.size());
  for (Index i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double up = loss_fn().item();
    values[i] = saved - eps;
    const double down = loss_fn().item();
    values[i] = saved;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

GradCheckResult check_gradients(std::string name, const std::function<Tensor<double>()>& loss_fn,
                                std::vector<Tensor<double>> leaves, double tolerance, double eps) {
  std::vector<bool> saved_flags;
  for (auto& leaf : leaves) {
    saved_flags.push_back(leaf.requires_grad());
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  loss_fn().backward();

  GradCheckResult result{std::move(name), 0.0, tolerance};
  for (auto& leaf : leaves) {
    const Eigen::ArrayXd analytic = leaf.grad_tensor().values();
    const Eigen::ArrayXd numeric = numeric_gradient(loss_fn, leaf, eps);
    result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic, numeric));
  }
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    leaves[i].zero_grad();
    leaves[i].set_requires_grad(saved_flags[i]);
  }
  return result;
}

}  // namespace bfr
