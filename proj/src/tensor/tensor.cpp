#include "bfr/tensor.hpp"

#include "bfr/errors.hpp"

#include <sstream>
#include <unordered_set>

namespace bfr {

namespace {
thread_local bool g_grad_enabled = true;
}

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Array values, bool requires_grad) {
  for (Index d : shape) {
    if (d <= 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
  }
  if (bfr::numel(shape) != values.size()) {
    throw DimensionError("tensor of shape " + to_string(shape) + " given " +
                         std::to_string(values.size()) + " values");
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(const Shape& shape) {
  return Tensor(shape, Array::Zero(bfr::numel(shape)));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::ones(const Shape& shape) {
  return Tensor(shape, Array::Ones(bfr::numel(shape)));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::constant(const Shape& shape, Scalar value) {
  return Tensor(shape, Array::Constant(bfr::numel(shape), value));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value) {
  return Tensor(Shape{}, Array::Constant(1, value));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_values(const Shape& shape, std::initializer_list<Scalar> values) {
  Array a(static_cast<Index>(values.size()));
  Index i = 0;
  for (Scalar v : values) a[i++] = v;
  return Tensor(shape, std::move(a));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::randn(const Shape& shape, Rng& rng, Scalar stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Array a(bfr::numel(shape));
  for (Index i = 0; i < a.size(); ++i) a[i] = static_cast<Scalar>(dist(rng)) * stddev;
  return Tensor(shape, std::move(a));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::uniform(const Shape& shape, Rng& rng, Scalar lo, Scalar hi) {
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  Array a(bfr::numel(shape));
  for (Index i = 0; i < a.size(); ++i) a[i] = static_cast<Scalar>(dist(rng));
  return Tensor(shape, std::move(a));
}

template <typename Scalar>
Index Tensor<Scalar>::dim(int axis) const {
  const int n = ndim();
  const int a = axis < 0 ? axis + n : axis;
  if (a < 0 || a >= n) {
    throw ContractError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
  }
  return node_->shape[static_cast<std::size_t>(a)];
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

template <typename Scalar>
Scalar Tensor<Scalar>::at(std::initializer_list<Index> index) const {
  if (static_cast<int>(index.size()) != ndim()) throw ContractError("at(): wrong number of indices");
  Index offset = 0;
  std::size_t i = 0;
  for (Index v : index) {
    const Index extent = node_->shape[i++];
    if (v < 0 || v >= extent) throw ContractError("at(): index out of range");
    offset = offset * extent + v;
  }
  return node_->value[offset];
}

template <typename Scalar>
Tensor<Scalar>& Tensor<Scalar>::set_requires_grad(bool flag) {
  if (!node_->is_leaf()) throw ContractError("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = flag;
  return *this;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::grad_tensor() const {
  if (!has_grad()) return Tensor::zeros(shape());
  return Tensor(shape(), node_->grad);
}

template <typename Scalar>
void Tensor<Scalar>::zero_grad() {
  node_->grad.resize(0);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(std::move(node));
}

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + to_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Post-order DFS gives a topological order (inputs before consumers).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Interior grads are per-pass scratch; leaves accumulate across passes.
  for (Node* n : order) {
    if (!n->is_leaf()) n->grad = Array::Zero(n->value.size());
    else n->grad_buffer();
  }
  node_->grad[0] += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf()) continue;
    n->backward(*n);
  }
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace bfr
