#pragma once

// Test-only reference computations, kept separate from the library's own
// gradient-check machinery.

#include "bfr/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

using bfr::Tensor;

/// Central finite differences, perturbing `leaf` in place.
inline Eigen::ArrayXd fd_gradient(const std::function<double()>& f, Tensor<double> leaf,
                                  double eps = 1e-5) {
  auto& v = leaf.mutable_values();
  Eigen::ArrayXd g(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double keep = v[i];
    v[i] = keep + eps;
    const double up = f();
    v[i] = keep - eps;
    const double down = f();
    v[i] = keep;
    g[i] = (up - down) / (2 * eps);
  }
  return g;
}

inline double rel_err(const Eigen::ArrayXd& a, const Eigen::ArrayXd& b) {
  const double denom = std::max({a.matrix().norm(), b.matrix().norm(), 1e-6});
  return (a - b).matrix().norm() / denom;
}

/// Analytic gradient of scalar `loss` w.r.t. `leaf` via backward().
inline Eigen::ArrayXd analytic_gradient(const std::function<Tensor<double>()>& loss,
                                        Tensor<double> leaf) {
  leaf.set_requires_grad(true);
  leaf.zero_grad();
  loss().backward();
  Eigen::ArrayXd g = leaf.grad_tensor().values();
  leaf.zero_grad();
  return g;
}

/// Relative error between backward() and finite differences for `leaf`.
inline double grad_error(const std::function<Tensor<double>()>& loss, Tensor<double> leaf) {
  const Eigen::ArrayXd analytic = analytic_gradient(loss, leaf);
  const Eigen::ArrayXd numeric = fd_gradient([&] { return loss().item(); }, leaf);
  return rel_err(analytic, numeric);
}

/// Like grad_error but finite-differences at most `samples` coordinates of
/// `leaf` (evenly strided), for leaves too large to scan fully. Coordinates
/// whose one-sided differences disagree sit on a kink (relu family) and are
/// skipped.
inline double grad_error_sampled(const std::function<Tensor<double>()>& loss, Tensor<double> leaf,
                                 Eigen::Index samples = 24, double eps = 1e-5) {
  const Eigen::ArrayXd analytic = analytic_gradient(loss, leaf);
  auto& v = leaf.mutable_values();
  const Eigen::Index n = v.size();
  const Eigen::Index stride = std::max<Eigen::Index>(1, n / samples);
  const double center = loss().item();
  std::vector<double> a, fd;
  for (Eigen::Index i = stride / 2; i < n; i += stride) {
    const double keep = v[i];
    v[i] = keep + eps;
    const double up = loss().item();
    v[i] = keep - eps;
    const double down = loss().item();
    v[i] = keep;
    const double forward = (up - center) / eps, backward = (center - down) / eps;
    const double central = (up - down) / (2 * eps);
    if (std::abs(forward - backward) > 5e-5 * (1 + std::abs(central))) continue;
    a.push_back(analytic[i]);
    fd.push_back(central);
  }
  return rel_err(Eigen::Map<Eigen::ArrayXd>(a.data(), a.size()), Eigen::Map<Eigen::ArrayXd>(fd.data(), fd.size()));
}

/// Central differences over every `stride`-th coordinate of `leaf`. A
/// coordinate is kept only when the differences at eps and eps/4 agree (no
/// kink inside the stencil); returns 1 when fewer than half survive. The
/// denominator floor follows the difference resolution, ~1e-11·|loss|/eps.
inline double grad_error_strided(const std::function<Tensor<double>()>& loss, Tensor<double> leaf,
                                 Eigen::Index stride, double eps = 1e-5) {
  const Eigen::ArrayXd analytic = analytic_gradient(loss, leaf);
  auto& v = leaf.mutable_values();
  auto diff = [&](Eigen::Index i, double h) {
    const double keep = v[i];
    v[i] = keep + h;
    const double up = loss().item();
    v[i] = keep - h;
    const double down = loss().item();
    v[i] = keep;
    return (up - down) / (2 * h);
  };
  double num = 0, na = 0, nf = 0;
  Eigen::Index kept = 0, seen = 0;
  for (Eigen::Index i = stride / 2; i < v.size(); i += stride) {
    ++seen;
    const double wide = diff(i, eps), narrow = diff(i, eps / 4);
    if (std::abs(wide - narrow) > 1e-6 * (1 + std::abs(narrow))) continue;
    ++kept;
    num += (analytic[i] - wide) * (analytic[i] - wide);
    na += analytic[i] * analytic[i];
    nf += wide * wide;
  }
  if (2 * kept < seen) return 1.0;
  const double floor = std::max(1e-6, 1e-5 * std::abs(loss().item()));
  return std::sqrt(num) / std::max({std::sqrt(na), std::sqrt(nf), floor});
}

/// Largest singular value by power iteration on AᵀA in double precision.
inline double top_singular_value(const Eigen::MatrixXd& a, int iters = 500) {
  Eigen::VectorXd v = Eigen::VectorXd::Ones(a.cols()).normalized();
  for (int i = 0; i < iters; ++i) v = (a.transpose() * (a * v)).normalized();
  return (a * v).norm();
}

}  // namespace oracle
