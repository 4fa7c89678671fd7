#include "bfr/module.hpp"

#include "bfr/errors.hpp"
#include "bfr/ops.hpp"

#include <cmath>

namespace bfr {

namespace {

constexpr double kSpectralEps = 1e-8;

template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <typename S>
using ConstMat = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename S>
Vec<S> normalized(const Vec<S>& x) {
  return x / std::max(x.norm(), static_cast<S>(kSpectralEps));
}

template <typename S>
ConstMat<S> as_matrix(const Tensor<S>& w) {
  const Index rows = w.dim(0);
  return ConstMat<S>(w.values().data(), rows, w.numel() / rows);
}

}  // namespace

template <typename S>
SpectralState<S> init_spectral_state(const Tensor<S>& weight, Rng& rng) {
  const auto w = as_matrix(weight);
  SpectralState<S> state;
  std::normal_distribution<double> dist(0.0, 1.0);
  state.u.resize(w.rows());
  for (Index i = 0; i < w.rows(); ++i) state.u[i] = static_cast<S>(dist(rng));
  state.u = normalized<S>(state.u);
  state.v = normalized<S>(w.transpose() * state.u);
  state.sigma = std::max(state.u.dot(w * state.v), static_cast<S>(kSpectralEps));
  return state;
}

template <typename S>
Tensor<S> spectral_normalize(const Tensor<S>& weight, SpectralState<S>& state, int iters, bool update) {
  if (weight.ndim() < 2) throw DimensionError("spectral_normalize needs a rank >= 2 weight");
  const auto w = as_matrix(weight);
  if (state.u.size() != w.rows() || state.v.size() != w.cols()) {
    throw DimensionError("spectral state does not match weight " + to_string(weight.shape()));
  }
  if (update) {
    for (int i = 0; i < iters; ++i) {
      state.v = normalized<S>(w.transpose() * state.u);
      state.u = normalized<S>(w * state.v);
    }
    state.sigma = std::max(state.u.dot(w * state.v), static_cast<S>(kSpectralEps));
  }
  return scale(weight, S(1) / state.sigma);
}

template <typename S>
Linear<S>::Linear(Index in, Index out, Rng& rng, LayerOptions options) {
  const S stddev = static_cast<S>(options.gain / std::sqrt(static_cast<double>(in)));
  auto w = options.zero_init ? Tensor<S>::zeros({out, in}) : Tensor<S>::randn({out, in}, rng, stddev);
  weight_ = &this->register_parameter("weight", w, options.spectral, &rng);
  weight_->lr_scale = options.lr_mul;
  if (options.bias) {
    bias_ = &this->register_parameter("bias", Tensor<S>::zeros({out}));
    bias_->lr_scale = options.lr_mul;
  }
}

template <typename S>
Tensor<S> Linear<S>::operator()(const Tensor<S>& x) {
  auto y = matmul(x, transpose(this->weight(*weight_)));
  return bias_ ? add(y, bias_->value) : y;
}

template <typename S>
Conv2d<S>::Conv2d(Index in, Index out, Index kernel, Rng& rng, LayerOptions options, Index stride)
    : kernel_(kernel), stride_(stride) {
  const S stddev = static_cast<S>(options.gain / std::sqrt(static_cast<double>(in * kernel * kernel)));
  const Shape shape{out, in, kernel, kernel};
  auto w = options.zero_init ? Tensor<S>::zeros(shape) : Tensor<S>::randn(shape, rng, stddev);
  weight_ = &this->register_parameter("weight", w, options.spectral, &rng);
  weight_->lr_scale = options.lr_mul;
  if (options.bias) {
    bias_ = &this->register_parameter("bias", Tensor<S>::zeros({out}));
    bias_->lr_scale = options.lr_mul;
  }
}

template <typename S>
Tensor<S> Conv2d<S>::operator()(const Tensor<S>& x) {
  auto w = this->weight(*weight_);
  if (bias_) return conv2d(x, w, bias_->value, stride_, kernel_ / 2);
  return conv2d(x, w, stride_, kernel_ / 2);
}

template SpectralState<float> init_spectral_state(const Tensor<float>&, Rng&);
template SpectralState<double> init_spectral_state(const Tensor<double>&, Rng&);
template Tensor<float> spectral_normalize(const Tensor<float>&, SpectralState<float>&, int, bool);
template Tensor<double> spectral_normalize(const Tensor<double>&, SpectralState<double>&, int, bool);
template class Linear<float>;
template class Linear<double>;
template class Conv2d<float>;
template class Conv2d<double>;

}  // namespace bfr
