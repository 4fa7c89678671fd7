#pragma once

#include "bfr/gradcheck.hpp"
#include "bfr/tensor.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace bfr {

/// One finite-difference check: a scalar loss and the tensors to perturb.
struct GradCase {
  std::string module;  // ops, wavelet, blocks, model, losses
  std::string name;
  std::function<Tensor<double>()> loss;
  std::vector<Tensor<double>> leaves;   // every coordinate checked, kinks skipped
  std::vector<Tensor<double>> sampled;  // strided coordinate subset, kinks skipped
  double tolerance = 1e-6;
  std::shared_ptr<void> owner;  // modules the loss closes over
};

/// Case groups in suite order.
std::vector<std::string> gradient_modules();

/// Cases for `module` (empty for all) built from `seed`. Throws ConfigError
/// for an unknown module name.
std::vector<GradCase> gradient_cases(const std::string& module, std::uint64_t seed);

/// Runs one case against central differences.
GradCheckResult run_gradient_case(const GradCase& c, Index samples = 24, double eps = 1e-5);

/// Every case of `module` over `seeds` seeds; results named "module/name#seed".
std::vector<GradCheckResult> gradient_suite(const std::string& module = "", int seeds = 5);

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Quick invariant checks over the whole stack (seconds, not minutes).
std::vector<CheckResult> selftest();

}  // namespace bfr
