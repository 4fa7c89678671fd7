#pragma once

#include "bfr/tensor.hpp"

#include <Eigen/Core>

#include <deque>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace bfr {

/// Persistent power-iteration vectors of a spectrally normalized weight
/// viewed as a matrix [out, everything-else].
template <typename S>
struct SpectralState {
  Eigen::Matrix<S, Eigen::Dynamic, 1> u;  // left singular estimate, length out
  Eigen::Matrix<S, Eigen::Dynamic, 1> v;  // right singular estimate
  S sigma = S(1);                         // last estimate
};

template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  std::optional<SpectralState<S>> spectral;
  // Per-parameter learning-rate multiplier applied by the optimizer.
  double lr_scale = 1.0;
};

/// W / σ̂ with σ̂ from `iters` power-iteration steps on `state`. With
/// `update` false the stored σ̂ is reused as is. σ̂ is a constant in backward.
template <typename S>
Tensor<S> spectral_normalize(const Tensor<S>& weight, SpectralState<S>& state, int iters = 1,
                             bool update = true);

/// Fresh SN state for `weight`: random unit u, v = normalize(Wᵀu).
template <typename S>
SpectralState<S> init_spectral_state(const Tensor<S>& weight, Rng& rng);

/// Owner of named parameters and child modules. Children register by
/// reference, so modules are neither copyable nor movable.
template <typename S>
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  /// Every parameter in this subtree, names joined with '.'.
  std::vector<std::pair<std::string, Parameter<S>*>> named_parameters() {
    std::vector<std::pair<std::string, Parameter<S>*>> out;
    collect("", out);
    return out;
  }

  std::vector<Tensor<S>> parameters() {
    std::vector<Tensor<S>> out;
    for (auto& [name, p] : named_parameters()) out.push_back(p->value);
    return out;
  }

  Index parameter_count() {
    Index n = 0;
    for (auto& [name, p] : named_parameters()) n += p->value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, p] : named_parameters()) p->value.zero_grad();
  }

  /// Toggles requires_grad on every parameter of the subtree.
  void set_trainable(bool flag) {
    for (auto& [name, p] : named_parameters()) p->value.set_requires_grad(flag);
  }

  /// Whether forward passes advance the power iteration of SN weights.
  void set_spectral_update(bool flag) {
    spectral_update_ = flag;
    for (auto& [name, child] : children_) child->set_spectral_update(flag);
  }
  bool spectral_update() const { return spectral_update_; }

  /// Runs `iters` extra power iterations on every SN weight.
  void refine_spectral(int iters) {
    for (auto& [name, p] : named_parameters()) {
      if (p->spectral) spectral_normalize(p->value, *p->spectral, iters, true);
    }
  }

 protected:
  Parameter<S>& register_parameter(std::string name, Tensor<S> init, bool spectral = false,
                                   Rng* rng = nullptr) {
    init.set_requires_grad(true);
    Parameter<S>& p = params_.emplace_back(Parameter<S>{std::move(name), std::move(init), std::nullopt});
    if (spectral) {
      Rng fallback(0);
      p.spectral = init_spectral_state(p.value, rng ? *rng : fallback);
    }
    return p;
  }

  void register_module(std::string name, Module& child) { children_.emplace_back(std::move(name), &child); }

  /// The weight as forward should see it.
  Tensor<S> weight(Parameter<S>& p) {
    if (!p.spectral) return p.value;
    return spectral_normalize(p.value, *p.spectral, 1, spectral_update_);
  }

 private:
  void collect(const std::string& prefix, std::vector<std::pair<std::string, Parameter<S>*>>& out) {
    for (auto& p : params_) out.emplace_back(prefix + p.name, &p);
    for (auto& [name, child] : children_) child->collect(prefix + name + ".", out);
  }

  std::deque<Parameter<S>> params_;
  std::vector<std::pair<std::string, Module*>> children_;
  bool spectral_update_ = true;
};

struct LayerOptions {
  bool bias = true;
  bool spectral = false;
  bool zero_init = false;
  double gain = 1.0;  // weight std = gain / sqrt(fan_in)
  double lr_mul = 1.0;  // optimizer learning-rate multiplier for weight and bias
};

/// y = x Wᵀ + b over the last axis of a [n, in] input.
template <typename S>
class Linear : public Module<S> {
 public:
  Linear(Index in, Index out, Rng& rng, LayerOptions options = {});
  Tensor<S> operator()(const Tensor<S>& x);
  Parameter<S>& weight_param() { return *weight_; }
  Parameter<S>* bias_param() { return bias_; }

 private:
  Parameter<S>* weight_;
  Parameter<S>* bias_ = nullptr;
};

/// Square-kernel convolution with "same" padding (k/2).
template <typename S>
class Conv2d : public Module<S> {
 public:
  Conv2d(Index in, Index out, Index kernel, Rng& rng, LayerOptions options = {}, Index stride = 1);
  Tensor<S> operator()(const Tensor<S>& x);
  Parameter<S>& weight_param() { return *weight_; }
  Parameter<S>* bias_param() { return bias_; }

 private:
  Parameter<S>* weight_;
  Parameter<S>* bias_ = nullptr;
  Index kernel_;
  Index stride_;
};

extern template class Linear<float>;
extern template class Linear<double>;
extern template class Conv2d<float>;
extern template class Conv2d<double>;

}  // namespace bfr
