#include "bfr/errors.hpp"
#include "bfr/trainkit.hpp"

#include <cmath>

namespace bfr {

template <typename S>
void adam_update(Tensor<S>& param, const Eigen::Array<S, Eigen::Dynamic, 1>& grad, AdamMoments<S>& moments,
                 const AdamHyper& hyper, std::int64_t step) {
  auto& w = param.mutable_values();
  if (grad.size() != w.size()) throw DimensionError("adam_update: gradient size does not match parameter");
  if (step < 1) throw ContractError("adam_update: step counts from 1");
  if (moments.m.size() != w.size()) {
    moments.m = Eigen::Array<S, Eigen::Dynamic, 1>::Zero(w.size());
    moments.v = Eigen::Array<S, Eigen::Dynamic, 1>::Zero(w.size());
  }
  const double b1 = hyper.beta1, b2 = hyper.beta2;
  const double c1 = 1 - std::pow(b1, static_cast<double>(step));
  const double c2 = 1 - std::pow(b2, static_cast<double>(step));
  for (Index i = 0; i < w.size(); ++i) {
    const double g = grad[i];
    const double m = b1 * moments.m[i] + (1 - b1) * g;
    const double v = b2 * moments.v[i] + (1 - b2) * g * g;
    moments.m[i] = static_cast<S>(m);
    moments.v[i] = static_cast<S>(v);
    w[i] = static_cast<S>(w[i] - hyper.lr * (m / c1) / (std::sqrt(v / c2) + hyper.eps));
  }
}

template <typename S>
Adam<S>::Adam(std::vector<std::pair<std::string, Parameter<S>*>> params, AdamHyper hyper)
    : params_(std::move(params)), hyper_(hyper) {
  for (const auto& [name, p] : params_) {
    const Index n = p->value.numel();
    moments_.push_back({Eigen::Array<S, Eigen::Dynamic, 1>::Zero(n), Eigen::Array<S, Eigen::Dynamic, 1>::Zero(n)});
  }
}

template <typename S>
void Adam<S>::step() {
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<S>& value = params_[i].second->value;
    AdamHyper hyper = hyper_;
    hyper.lr *= params_[i].second->lr_scale;
    if (value.has_grad()) {
      adam_update(value, value.grad(), moments_[i], hyper, t_);
    } else {
      const Eigen::Array<S, Eigen::Dynamic, 1> zero = Eigen::Array<S, Eigen::Dynamic, 1>::Zero(value.numel());
      adam_update(value, zero, moments_[i], hyper, t_);
    }
  }
}

template void adam_update(Tensor<float>&, const Eigen::Array<float, Eigen::Dynamic, 1>&, AdamMoments<float>&,
                          const AdamHyper&, std::int64_t);
template void adam_update(Tensor<double>&, const Eigen::Array<double, Eigen::Dynamic, 1>&, AdamMoments<double>&,
                          const AdamHyper&, std::int64_t);
template class Adam<float>;
template class Adam<double>;

}  // namespace bfr
