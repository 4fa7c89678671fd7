#pragma once

#include <Eigen/Core>

#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace bfr {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Rng = std::mt19937_64;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

template <typename Scalar>
struct Node {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Array value;
  Array grad;  // empty until something flows into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Propagates this->grad into the grads of `inputs`.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  Array& grad_buffer() {
    if (grad.size() != value.size()) grad = Array::Zero(value.size());
    return grad;
  }
};

}  // namespace detail

/// Whether newly created op results are recorded for differentiation.
bool grad_enabled();

/// Disables recording for its lifetime (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major N-d array with reverse-mode differentiation.
///
/// A Tensor is a cheap handle: copies share the underlying node, so a
/// parameter held by a module and the same parameter seen by an optimizer
/// are one object. Values are treated as immutable once an op has consumed
/// them; only leaves are edited in place (initialization, optimizer steps).
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Node = detail::Node<Scalar>;
  using Array = typename Node::Array;

  Tensor() = default;
  Tensor(Shape shape, Array values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape);
  static Tensor ones(const Shape& shape);
  static Tensor constant(const Shape& shape, Scalar value);
  static Tensor scalar(Scalar value);
  static Tensor from_values(const Shape& shape, std::initializer_list<Scalar> values);
  static Tensor randn(const Shape& shape, Rng& rng, Scalar stddev = Scalar(1));
  static Tensor uniform(const Shape& shape, Rng& rng, Scalar lo, Scalar hi);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  /// Extent of `axis`; negative axes count from the back.
  Index dim(int axis) const;
  Index numel() const { return node_->value.size(); }

  const Array& values() const { return node_->value; }
  Array& mutable_values() { return node_->value; }
  Scalar item() const;
  Scalar at(std::initializer_list<Index> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return node_->grad.size() == node_->value.size() && numel() > 0; }
  const Array& grad() const { return node_->grad; }
  Tensor grad_tensor() const;
  void zero_grad();

  /// Accumulates d(this)/d(leaf) into every reachable leaf requiring grad.
  /// `this` must be a scalar (one element).
  void backward() const;

  Tensor detach() const;
  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape(), values().template cast<Other>(), false);
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

/// Creates an op result, attaching `backward` only when recording is on and
/// some input requires grad.
template <typename Scalar>
Tensor<Scalar> record(const char* op, Shape shape, typename Node<Scalar>::Array value,
                      std::vector<Tensor<Scalar>> inputs,
                      std::function<void(Node<Scalar>&)> backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor<Scalar>(std::move(node));
}

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace bfr
