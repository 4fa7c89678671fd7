#include "bfr/ops.hpp"

#include "bfr/errors.hpp"
#include "strided.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bfr {

using detail::broadcast_strides;
using detail::contiguous_strides;
using detail::record;
using detail::StridedLoop;

namespace {

template <typename S>
using Node = detail::Node<S>;
template <typename S>
using Array = typename Node<S>::Array;
template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMatrix<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMatrix<S>>;

int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ContractError("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  }
  return a;
}

template <typename S>
Node<S>& input(Node<S>& self, std::size_t i) {
  return *self.inputs[i];
}

// ---- elementwise binary --------------------------------------------------

StridedLoop<3> binary_plan(const Shape& a, const Shape& b, const Shape& out) {
  StridedLoop<3> loop;
  loop.extents = out;
  loop.strides = {broadcast_strides(a, out), broadcast_strides(b, out), contiguous_strides(out)};
  loop.coalesce();
  return loop;
}

// Fwd: (x, y) -> z; DA/DB: (x, y, z, g) -> contribution to dx / dy.
template <typename S, typename Fwd, typename DA, typename DB>
Tensor<S> binary(const char* name, const Tensor<S>& a, const Tensor<S>& b, Fwd fwd, DA da, DB db) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  Array<S> out(numel(out_shape));
  const auto& av = a.values();
  const auto& bv = b.values();
  const bool same = a.shape() == b.shape();
  if (same) {
    for (Index i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    binary_plan(a.shape(), b.shape(), out_shape).run([&](const std::array<Index, 3>& ix) {
      out[ix[2]] = fwd(av[ix[0]], bv[ix[1]]);
    });
  }
  return record<S>(name, out_shape, std::move(out), {a, b}, [da, db, same](Node<S>& self) {
    Node<S>& A = input(self, 0);
    Node<S>& B = input(self, 1);
    const auto& g = self.grad;
    const auto& z = self.value;
    if (same) {
      if (A.requires_grad) {
        auto& ga = A.grad_buffer();
        for (Index i = 0; i < z.size(); ++i) ga[i] += da(A.value[i], B.value[i], z[i], g[i]);
      }
      if (B.requires_grad) {
        auto& gb = B.grad_buffer();
        for (Index i = 0; i < z.size(); ++i) gb[i] += db(A.value[i], B.value[i], z[i], g[i]);
      }
      return;
    }
    const auto plan = binary_plan(A.shape, B.shape, self.shape);
    if (A.requires_grad) {
      auto& ga = A.grad_buffer();
      plan.run([&](const std::array<Index, 3>& ix) {
        ga[ix[0]] += da(A.value[ix[0]], B.value[ix[1]], z[ix[2]], g[ix[2]]);
      });
    }
    if (B.requires_grad) {
      auto& gb = B.grad_buffer();
      plan.run([&](const std::array<Index, 3>& ix) {
        gb[ix[1]] += db(A.value[ix[0]], B.value[ix[1]], z[ix[2]], g[ix[2]]);
      });
    }
  });
}

// Unary op built from Eigen array expressions. Grad: (x, y, g) -> dx.
template <typename S, typename Fwd, typename Grad>
Tensor<S> unary(const char* name, const Tensor<S>& x, Fwd fwd, Grad grad) {
  Array<S> out = fwd(x.values());
  return record<S>(name, x.shape(), std::move(out), {x}, [grad](Node<S>& self) {
    Node<S>& X = input(self, 0);
    X.grad_buffer() += grad(X.value, self.value, self.grad);
  });
}

// Reduction plan: iterate over `in`, accumulate into `out` (keepdim shape).
StridedLoop<2> reduce_plan(const Shape& in, const Shape& out_keep) {
  StridedLoop<2> loop;
  loop.extents = in;
  loop.strides = {contiguous_strides(in), broadcast_strides(out_keep, in)};
  loop.coalesce();
  return loop;
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const Index da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const Index db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast shapes " + to_string(a) + " and " + to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary<S>("add", a, b, [](S x, S y) { return x + y; },
                   [](S, S, S, S g) { return g; }, [](S, S, S, S g) { return g; });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary<S>("sub", a, b, [](S x, S y) { return x - y; },
                   [](S, S, S, S g) { return g; }, [](S, S, S, S g) { return -g; });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary<S>("mul", a, b, [](S x, S y) { return x * y; },
                   [](S, S y, S, S g) { return g * y; }, [](S x, S, S, S g) { return g * x; });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return binary<S>("div", a, b, [](S x, S y) { return x / y; },
                   [](S, S y, S, S g) { return g / y; },
                   [](S, S y, S z, S g) { return -g * z / y; });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
  return unary<S>("scale", x, [factor](const Array<S>& v) -> Array<S> { return v * factor; },
                  [factor](const Array<S>&, const Array<S>&, const Array<S>& g) -> Array<S> {
                    return g * factor;
                  });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& x, S value) {
  return unary<S>("add_scalar", x, [value](const Array<S>& v) -> Array<S> { return v + value; },
                  [](const Array<S>&, const Array<S>&, const Array<S>& g) -> Array<S> { return g; });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& x) {
  return scale(x, S(-1));
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  const S k0 = S(0.7978845608028654);  // sqrt(2/pi)
  const S k1 = S(0.044715);
  return unary<S>(
      "gelu", x,
      [k0, k1](const Array<S>& v) -> Array<S> {
        return S(0.5) * v * (S(1) + (k0 * (v + k1 * v.cube())).tanh());
      },
      [k0, k1](const Array<S>& v, const Array<S>&, const Array<S>& g) -> Array<S> {
        const Array<S> t = (k0 * (v + k1 * v.cube())).tanh();
        const Array<S> dt = (S(1) - t.square()) * k0 * (S(1) + S(3) * k1 * v.square());
        return g * (S(0.5) * (S(1) + t) + S(0.5) * v * dt);
      });
}

template <typename S>
Tensor<S> leaky_relu(const Tensor<S>& x, S slope) {
  return unary<S>(
      "leaky_relu", x,
      [slope](const Array<S>& v) -> Array<S> { return (v > S(0)).select(v, v * slope); },
      [slope](const Array<S>& v, const Array<S>&, const Array<S>& g) -> Array<S> {
        return (v > S(0)).select(g, g * slope);
      });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return leaky_relu(x, S(0));
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return unary<S>(
      "sigmoid", x, [](const Array<S>& v) -> Array<S> { return S(1) / (S(1) + (-v).exp()); },
      [](const Array<S>&, const Array<S>& y, const Array<S>& g) -> Array<S> {
        return g * y * (S(1) - y);
      });
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& x) {
  return unary<S>(
      "tanh", x, [](const Array<S>& v) -> Array<S> { return v.tanh(); },
      [](const Array<S>&, const Array<S>& y, const Array<S>& g) -> Array<S> {
        return g * (S(1) - y.square());
      });
}

template <typename S>
Tensor<S> softplus(const Tensor<S>& x) {
  return unary<S>(
      "softplus", x,
      [](const Array<S>& v) -> Array<S> { return v.max(S(0)) + (-v.abs()).exp().log1p(); },
      [](const Array<S>& v, const Array<S>&, const Array<S>& g) -> Array<S> {
        return g / (S(1) + (-v).exp());
      });
}

template <typename S>
Tensor<S> abs(const Tensor<S>& x) {
  return unary<S>(
      "abs", x, [](const Array<S>& v) -> Array<S> { return v.abs(); },
      [](const Array<S>& v, const Array<S>&, const Array<S>& g) -> Array<S> {
        return g * v.sign();
      });
}

template <typename S>
Tensor<S> square(const Tensor<S>& x) {
  return unary<S>(
      "square", x, [](const Array<S>& v) -> Array<S> { return v.square(); },
      [](const Array<S>& v, const Array<S>&, const Array<S>& g) -> Array<S> {
        return S(2) * g * v;
      });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& x) {
  return unary<S>(
      "sqrt", x, [](const Array<S>& v) -> Array<S> { return v.sqrt(); },
      [](const Array<S>&, const Array<S>& y, const Array<S>& g) -> Array<S> {
        return g / (S(2) * y);
      });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& x) {
  return unary<S>(
      "exp", x, [](const Array<S>& v) -> Array<S> { return v.exp(); },
      [](const Array<S>&, const Array<S>& y, const Array<S>& g) -> Array<S> { return g * y; });
}

template <typename S>
Tensor<S> log(const Tensor<S>& x) {
  return unary<S>(
      "log", x, [](const Array<S>& v) -> Array<S> { return v.log(); },
      [](const Array<S>& v, const Array<S>&, const Array<S>& g) -> Array<S> { return g / v; });
}

// ---- reductions ------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  Array<S> out = Array<S>::Constant(1, x.values().sum());
  return record<S>("sum", Shape{}, std::move(out), {x}, [](Node<S>& self) {
    input(self, 0).grad_buffer() += self.grad[0];
  });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x, std::vector<int> axes, bool keepdim) {
  const int rank = x.ndim();
  Shape keep = x.shape();
  std::vector<bool> reduced(static_cast<std::size_t>(rank), false);
  for (int& a : axes) {
    a = normalize_axis(a, rank);
    reduced[static_cast<std::size_t>(a)] = true;
    keep[static_cast<std::size_t>(a)] = 1;
  }
  Shape out_shape;
  for (int i = 0; i < rank; ++i) {
    if (keepdim || !reduced[static_cast<std::size_t>(i)]) out_shape.push_back(keep[static_cast<std::size_t>(i)]);
  }
  Array<S> out = Array<S>::Zero(numel(keep));
  const auto& xv = x.values();
  reduce_plan(x.shape(), keep).run([&](const std::array<Index, 2>& ix) { out[ix[1]] += xv[ix[0]]; });
  return record<S>("sum_axes", out_shape, std::move(out), {x}, [keep](Node<S>& self) {
    Node<S>& X = input(self, 0);
    auto& gx = X.grad_buffer();
    const auto& g = self.grad;
    reduce_plan(X.shape, keep).run([&](const std::array<Index, 2>& ix) { gx[ix[0]] += g[ix[1]]; });
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.numel()));
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x, std::vector<int> axes, bool keepdim) {
  Index count = 1;
  for (int a : axes) count *= x.dim(a);
  return scale(sum(x, std::move(axes), keepdim), S(1) / static_cast<S>(count));
}

// ---- layout ----------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  return record<S>("reshape", std::move(shape), x.values(), {x}, [](Node<S>& self) {
    input(self, 0).grad_buffer() += self.grad;
  });
}

template <typename S>
Tensor<S> permute(const Tensor<S>& x, std::vector<int> order) {
  const int rank = x.ndim();
  if (static_cast<int>(order.size()) != rank) throw ContractError("permute: order has wrong length");
  std::vector<bool> used(static_cast<std::size_t>(rank), false);
  Shape out_shape(static_cast<std::size_t>(rank));
  const auto in_strides = contiguous_strides(x.shape());
  std::vector<Index> read_strides(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i) {
    const int a = normalize_axis(order[static_cast<std::size_t>(i)], rank);
    if (used[static_cast<std::size_t>(a)]) throw ContractError("permute: repeated axis");
    used[static_cast<std::size_t>(a)] = true;
    out_shape[static_cast<std::size_t>(i)] = x.shape()[static_cast<std::size_t>(a)];
    read_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(a)];
  }
  StridedLoop<2> plan;
  plan.extents = out_shape;
  plan.strides = {read_strides, contiguous_strides(out_shape)};
  plan.coalesce();
  Array<S> out(x.numel());
  const auto& xv = x.values();
  plan.run([&](const std::array<Index, 2>& ix) { out[ix[1]] = xv[ix[0]]; });
  return record<S>("permute", out_shape, std::move(out), {x}, [plan](Node<S>& self) {
    auto& gx = input(self, 0).grad_buffer();
    const auto& g = self.grad;
    plan.run([&](const std::array<Index, 2>& ix) { gx[ix[0]] += g[ix[1]]; });
  });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x, int axis_a, int axis_b) {
  const int rank = x.ndim();
  std::vector<int> order(static_cast<std::size_t>(rank));
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[static_cast<std::size_t>(normalize_axis(axis_a, rank))],
            order[static_cast<std::size_t>(normalize_axis(axis_b, rank))]);
  return permute(x, order);
}

template <typename S>
Tensor<S> broadcast_to(const Tensor<S>& x, const Shape& shape) {
  if (broadcast_shapes(x.shape(), shape) != shape) {
    throw DimensionError("cannot broadcast " + to_string(x.shape()) + " to " + to_string(shape));
  }
  StridedLoop<2> plan;
  plan.extents = shape;
  plan.strides = {broadcast_strides(x.shape(), shape), contiguous_strides(shape)};
  plan.coalesce();
  Array<S> out(numel(shape));
  const auto& xv = x.values();
  plan.run([&](const std::array<Index, 2>& ix) { out[ix[1]] = xv[ix[0]]; });
  return record<S>("broadcast_to", shape, std::move(out), {x}, [plan](Node<S>& self) {
    auto& gx = input(self, 0).grad_buffer();
    const auto& g = self.grad;
    plan.run([&](const std::array<Index, 2>& ix) { gx[ix[0]] += g[ix[1]]; });
  });
}

namespace {

// Moves data between a block of `full_shape` (starting at `start` along
// `axis`) and a dense tensor of `part_shape`.
enum class BlockMode { PartToFull, FullToPartAdd, FullToPart, PartToFullAdd };

template <typename S>
void block_copy(const Shape& part_shape, const Shape& full_shape, int axis, Index start,
                const Array<S>& src, Array<S>& dst, BlockMode mode) {
  StridedLoop<2> plan;
  plan.extents = part_shape;
  const auto full_strides = contiguous_strides(full_shape);
  plan.strides = {contiguous_strides(part_shape), full_strides};
  plan.offsets = {0, start * full_strides[static_cast<std::size_t>(axis)]};
  plan.coalesce();
  switch (mode) {
    case BlockMode::PartToFull:
      plan.run([&](const std::array<Index, 2>& ix) { dst[ix[1]] = src[ix[0]]; });
      break;
    case BlockMode::PartToFullAdd:
      plan.run([&](const std::array<Index, 2>& ix) { dst[ix[1]] += src[ix[0]]; });
      break;
    case BlockMode::FullToPart:
      plan.run([&](const std::array<Index, 2>& ix) { dst[ix[0]] = src[ix[1]]; });
      break;
    case BlockMode::FullToPartAdd:
      plan.run([&](const std::array<Index, 2>& ix) { dst[ix[0]] += src[ix[1]]; });
      break;
  }
}

}  // namespace

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const int rank = parts.front().ndim();
  const int ax = normalize_axis(axis, rank);
  Shape out_shape = parts.front().shape();
  out_shape[static_cast<std::size_t>(ax)] = 0;
  std::vector<Index> starts;
  for (const auto& p : parts) {
    if (p.ndim() != rank) throw DimensionError("concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != ax && p.shape()[static_cast<std::size_t>(i)] != parts.front().shape()[static_cast<std::size_t>(i)]) {
        throw DimensionError("concat: shapes " + to_string(parts.front().shape()) + " and " +
                             to_string(p.shape()) + " differ off axis " + std::to_string(ax));
      }
    }
    starts.push_back(out_shape[static_cast<std::size_t>(ax)]);
    out_shape[static_cast<std::size_t>(ax)] += p.shape()[static_cast<std::size_t>(ax)];
  }
  Array<S> out(numel(out_shape));
  for (std::size_t k = 0; k < parts.size(); ++k) {
    block_copy<S>(parts[k].shape(), out_shape, ax, starts[k], parts[k].values(), out, BlockMode::PartToFull);
  }
  return record<S>("concat", out_shape, std::move(out), parts, [ax, starts](Node<S>& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      Node<S>& P = input(self, k);
      if (!P.requires_grad) continue;
      block_copy<S>(P.shape, self.shape, ax, starts[k], self.grad, P.grad_buffer(), BlockMode::FullToPartAdd);
    }
  });
}

template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, Index start, Index length) {
  const int ax = normalize_axis(axis, x.ndim());
  const Index extent = x.shape()[static_cast<std::size_t>(ax)];
  if (start < 0 || length <= 0 || start + length > extent) {
    throw DimensionError("slice [" + std::to_string(start) + ", +" + std::to_string(length) +
                         ") out of range for axis of extent " + std::to_string(extent));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(ax)] = length;
  Array<S> out(numel(out_shape));
  block_copy<S>(out_shape, x.shape(), ax, start, x.values(), out, BlockMode::FullToPart);
  return record<S>("slice", out_shape, std::move(out), {x}, [ax, start](Node<S>& self) {
    Node<S>& X = input(self, 0);
    block_copy<S>(self.shape, X.shape, ax, start, self.grad, X.grad_buffer(), BlockMode::PartToFullAdd);
  });
}

template <typename S>
Tensor<S> roll(const Tensor<S>& x, int axis, Index shift) {
  const int ax = normalize_axis(axis, x.ndim());
  const Index n = x.shape()[static_cast<std::size_t>(ax)];
  const Index s = ((shift % n) + n) % n;
  if (s == 0) return reshape(x, x.shape());
  return concat<S>({slice(x, ax, n - s, s), slice(x, ax, 0, n - s)}, ax);
}

template <typename S>
Tensor<S> flip(const Tensor<S>& x, int axis) {
  const int ax = normalize_axis(axis, x.ndim());
  StridedLoop<2> plan;
  plan.extents = x.shape();
  auto in_strides = contiguous_strides(x.shape());
  const auto a = static_cast<std::size_t>(ax);
  plan.offsets = {(x.shape()[a] - 1) * in_strides[a], 0};
  in_strides[a] = -in_strides[a];
  plan.strides = {in_strides, contiguous_strides(x.shape())};
  plan.coalesce();
  Array<S> out(x.numel());
  const auto& xv = x.values();
  plan.run([&](const std::array<Index, 2>& ix) { out[ix[1]] = xv[ix[0]]; });
  return record<S>("flip", x.shape(), std::move(out), {x}, [plan](Node<S>& self) {
    auto& gx = input(self, 0).grad_buffer();
    const auto& g = self.grad;
    plan.run([&](const std::array<Index, 2>& ix) { gx[ix[0]] += g[ix[1]]; });
  });
}

template <typename S>
Tensor<S> take_last(const Tensor<S>& x, const std::vector<Index>& indices) {
  const Index n = x.dim(-1);
  for (Index i : indices) {
    if (i < 0 || i >= n) throw ContractError("take_last: index out of range");
  }
  const Index m = static_cast<Index>(indices.size());
  const Index outer = x.numel() / n;
  Shape out_shape = x.shape();
  out_shape.back() = m;
  Array<S> out(outer * m);
  const auto& xv = x.values();
  for (Index o = 0; o < outer; ++o) {
    for (Index j = 0; j < m; ++j) out[o * m + j] = xv[o * n + indices[static_cast<std::size_t>(j)]];
  }
  return record<S>("take_last", out_shape, std::move(out), {x}, [indices, n, m, outer](Node<S>& self) {
    auto& gx = input(self, 0).grad_buffer();
    for (Index o = 0; o < outer; ++o) {
      for (Index j = 0; j < m; ++j) gx[o * n + indices[static_cast<std::size_t>(j)]] += self.grad[o * m + j];
    }
  });
}

// ---- linear algebra --------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() < 2 || b.ndim() < 2) throw DimensionError("matmul needs rank >= 2 operands");
  const Index m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2) {
    throw DimensionError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  // A rank-2 right operand folds every leading axis of `a` into its rows.
  if (b.ndim() == 2) {
    const Index rows = a.numel() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    Array<S> out(rows * n);
    MatMap<S>(out.data(), rows, n).noalias() =
        ConstMatMap<S>(a.values().data(), rows, k) * ConstMatMap<S>(b.values().data(), k, n);
    return record<S>("matmul", out_shape, std::move(out), {a, b}, [rows, k, n](Node<S>& self) {
      Node<S>& A = input(self, 0);
      Node<S>& B = input(self, 1);
      ConstMatMap<S> g(self.grad.data(), rows, n);
      if (A.requires_grad) {
        MatMap<S>(A.grad_buffer().data(), rows, k).noalias() +=
            g * ConstMatMap<S>(B.value.data(), k, n).transpose();
      }
      if (B.requires_grad) {
        MatMap<S>(B.grad_buffer().data(), k, n).noalias() +=
            ConstMatMap<S>(A.value.data(), rows, k).transpose() * g;
      }
    });
  }

  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  const Shape batch = broadcast_shapes(batch_a, batch_b);
  StridedLoop<3> plan;
  plan.extents = batch;
  plan.strides = {broadcast_strides(batch_a, batch), broadcast_strides(batch_b, batch),
                  contiguous_strides(batch)};
  for (auto& s : plan.strides[0]) s *= m * k;
  for (auto& s : plan.strides[1]) s *= k * n;
  for (auto& s : plan.strides[2]) s *= m * n;
  std::vector<std::array<Index, 3>> offsets;
  plan.run([&](const std::array<Index, 3>& ix) { offsets.push_back(ix); });

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Array<S> out(numel(out_shape));
  for (const auto& o : offsets) {
    MatMap<S>(out.data() + o[2], m, n).noalias() =
        ConstMatMap<S>(a.values().data() + o[0], m, k) * ConstMatMap<S>(b.values().data() + o[1], k, n);
  }
  return record<S>("matmul", out_shape, std::move(out), {a, b}, [offsets, m, k, n](Node<S>& self) {
    Node<S>& A = input(self, 0);
    Node<S>& B = input(self, 1);
    for (const auto& o : offsets) {
      ConstMatMap<S> g(self.grad.data() + o[2], m, n);
      if (A.requires_grad) {
        MatMap<S>(A.grad_buffer().data() + o[0], m, k).noalias() +=
            g * ConstMatMap<S>(B.value.data() + o[1], k, n).transpose();
      }
      if (B.requires_grad) {
        MatMap<S>(B.grad_buffer().data() + o[1], k, n).noalias() +=
            ConstMatMap<S>(A.value.data() + o[0], m, k).transpose() * g;
      }
    }
  });
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  const int ax = normalize_axis(axis, x.ndim());
  Index outer = 1, inner = 1;
  const Index n = x.shape()[static_cast<std::size_t>(ax)];
  for (int i = 0; i < ax; ++i) outer *= x.shape()[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < x.ndim(); ++i) inner *= x.shape()[static_cast<std::size_t>(i)];
  Array<S> out(x.numel());
  const auto& xv = x.values();
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * n * inner + i;
      S mx = xv[base];
      for (Index j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      S total = 0;
      for (Index j = 0; j < n; ++j) {
        const S e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      const S inv = S(1) / total;
      for (Index j = 0; j < n; ++j) out[base + j * inner] *= inv;
    }
  }
  return record<S>("softmax", x.shape(), std::move(out), {x}, [outer, inner, n](Node<S>& self) {
    auto& gx = input(self, 0).grad_buffer();
    const auto& y = self.value;
    const auto& g = self.grad;
    for (Index o = 0; o < outer; ++o) {
      for (Index i = 0; i < inner; ++i) {
        const Index base = o * n * inner + i;
        S dot = 0;
        for (Index j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (Index j = 0; j < n; ++j) {
          const Index p = base + j * inner;
          gx[p] += y[p] * (g[p] - dot);
        }
      }
    }
  });
}

// ---- spatial ---------------------------------------------------------------

namespace {

struct ConvGeometry {
  Index batch, channels, height, width;
  Index out_channels, kh, kw, stride, pad, out_h, out_w;
  Index patch() const { return channels * kh * kw; }
  Index out_plane() const { return out_h * out_w; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

ConvGeometry conv_geometry(const Shape& x, const Shape& k, Index stride, Index pad) {
  if (x.size() != 4 || k.size() != 4) {
    throw DimensionError("conv2d expects x [b,c,h,w] and kernel [o,c,kh,kw], got " + to_string(x) +
                         " and " + to_string(k));
  }
  if (x[1] != k[1]) {
    throw DimensionError("conv2d channel mismatch: " + to_string(x) + " vs kernel " + to_string(k));
  }
  if (k[2] % 2 == 0 || k[3] % 2 == 0) throw DimensionError("conv2d kernel extents must be odd");
  if (stride <= 0 || pad < 0) throw DimensionError("conv2d: invalid stride or padding");
  ConvGeometry g{x[0], x[1], x[2], x[3], k[0], k[2], k[3], stride, pad, 0, 0};
  const Index num_h = x[2] + 2 * pad - k[2];
  const Index num_w = x[3] + 2 * pad - k[3];
  if (num_h < 0 || num_w < 0) {
    throw DimensionError("conv2d output extent not positive for input " + to_string(x) +
                         " and kernel " + to_string(k));
  }
  g.out_h = num_h / stride + 1;
  g.out_w = num_w / stride + 1;
  return g;
}

// Output columns [lo, hi) whose input column for kernel tap kj is inside the image.
std::pair<Index, Index> valid_range(const ConvGeometry& g, Index kj) {
  const Index off = kj - g.pad;
  Index lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  Index hi = (g.width - off + g.stride - 1) / g.stride;
  hi = std::clamp<Index>(hi, 0, g.out_w);
  lo = std::min(lo, hi);
  return {lo, hi};
}

template <typename S>
void im2col(const ConvGeometry& g, const S* x, S* col) {
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        S* row = col + ((c * g.kh + ki) * g.kw + kj) * g.out_plane();
        const auto [ox0, ox1] = valid_range(g, kj);
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.stride - g.pad + ki;
          S* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, S(0));
            continue;
          }
          const S* src = x + (c * g.height + iy) * g.width + kj - g.pad;
          std::fill(dst, dst + ox0, S(0));
          if (g.stride == 1) {
            std::copy(src + ox0, src + ox1, dst + ox0);
          } else {
            for (Index ox = ox0; ox < ox1; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + ox1, dst + g.out_w, S(0));
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const ConvGeometry& g, const S* col, S* x) {
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const S* row = col + ((c * g.kh + ki) * g.kw + kj) * g.out_plane();
        const auto [ox0, ox1] = valid_range(g, kj);
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.height) continue;
          const S* src = row + oy * g.out_w;
          S* dst = x + (c * g.height + iy) * g.width + kj - g.pad;
          for (Index ox = ox0; ox < ox1; ++ox) dst[ox * g.stride] += src[ox];
        }
      }
    }
  }
}

template <typename S>
Tensor<S> conv2d_impl(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>* bias, Index stride,
                      Index pad) {
  const ConvGeometry g = conv_geometry(x.shape(), kernel.shape(), stride, pad);
  if (bias && (bias->ndim() != 1 || bias->dim(0) != g.out_channels)) {
    throw DimensionError("conv2d bias must have shape [" + std::to_string(g.out_channels) + "]");
  }
  const Shape out_shape{g.batch, g.out_channels, g.out_h, g.out_w};
  Array<S> out(numel(out_shape));
  ConstMatMap<S> w(kernel.values().data(), g.out_channels, g.patch());
  RowMatrix<S> col;
  if (!g.pointwise()) col.resize(g.patch(), g.out_plane());
  const Index in_size = g.channels * g.height * g.width;
  const Index out_size = g.out_channels * g.out_plane();
  for (Index b = 0; b < g.batch; ++b) {
    MatMap<S> y(out.data() + b * out_size, g.out_channels, g.out_plane());
    if (g.pointwise()) {
      y.noalias() = w * ConstMatMap<S>(x.values().data() + b * in_size, g.channels, g.out_plane());
    } else {
      im2col(g, x.values().data() + b * in_size, col.data());
      y.noalias() = w * col;
    }
    if (bias) y.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(bias->values().data(), g.out_channels);
  }
  std::vector<Tensor<S>> inputs{x, kernel};
  if (bias) inputs.push_back(*bias);
  return record<S>("conv2d", out_shape, std::move(out), std::move(inputs), [g, in_size, out_size](Node<S>& self) {
    Node<S>& X = input(self, 0);
    Node<S>& K = input(self, 1);
    Node<S>* B = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
    ConstMatMap<S> w(K.value.data(), g.out_channels, g.patch());
    RowMatrix<S> col, dcol;
    if (!g.pointwise()) col.resize(g.patch(), g.out_plane());
    for (Index b = 0; b < g.batch; ++b) {
      ConstMatMap<S> dy(self.grad.data() + b * out_size, g.out_channels, g.out_plane());
      if (B && B->requires_grad) {
        Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(B->grad_buffer().data(), g.out_channels) +=
            dy.rowwise().sum();
      }
      if (g.pointwise()) {
        ConstMatMap<S> xin(X.value.data() + b * in_size, g.channels, g.out_plane());
        if (K.requires_grad) MatMap<S>(K.grad_buffer().data(), g.out_channels, g.patch()).noalias() += dy * xin.transpose();
        if (X.requires_grad) MatMap<S>(X.grad_buffer().data() + b * in_size, g.channels, g.out_plane()).noalias() += w.transpose() * dy;
        continue;
      }
      if (K.requires_grad) {
        im2col(g, X.value.data() + b * in_size, col.data());
        MatMap<S>(K.grad_buffer().data(), g.out_channels, g.patch()).noalias() += dy * col.transpose();
      }
      if (X.requires_grad) {
        dcol.noalias() = w.transpose() * dy;
        col2im_add(g, dcol.data(), X.grad_buffer().data() + b * in_size);
      }
    }
  });
}

// Two-tap interpolation table for one axis.
struct Taps {
  std::vector<Index> lo, hi;
  std::vector<double> w_lo, w_hi;
};

Taps bilinear_taps(Index in, Index out) {
  Taps t;
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (Index i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    Index lo = static_cast<Index>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const Index hi = std::min(lo + 1, in - 1);
    const double frac = src - static_cast<double>(lo);
    t.lo.push_back(lo);
    t.hi.push_back(hi);
    t.w_lo.push_back(1.0 - frac);
    t.w_hi.push_back(frac);
  }
  return t;
}

}  // namespace

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernel, Index stride, Index pad) {
  return conv2d_impl<S>(x, kernel, nullptr, stride, pad);
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias, Index stride, Index pad) {
  return conv2d_impl<S>(x, kernel, &bias, stride, pad);
}

template <typename S>
Tensor<S> resize_bilinear(const Tensor<S>& x, Index out_h, Index out_w) {
  if (x.ndim() < 2 || out_h <= 0 || out_w <= 0) throw DimensionError("resize_bilinear: bad shape");
  const Index h = x.dim(-2), w = x.dim(-1);
  const Index planes = x.numel() / (h * w);
  const Taps ty = bilinear_taps(h, out_h);
  const Taps tx = bilinear_taps(w, out_w);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = out_h;
  out_shape.back() = out_w;
  Array<S> out(planes * out_h * out_w);
  const auto& xv = x.values();
  for (Index p = 0; p < planes; ++p) {
    const S* src = xv.data() + p * h * w;
    S* dst = out.data() + p * out_h * out_w;
    for (Index i = 0; i < out_h; ++i) {
      const auto iu = static_cast<std::size_t>(i);
      const S* r0 = src + ty.lo[iu] * w;
      const S* r1 = src + ty.hi[iu] * w;
      const S a = static_cast<S>(ty.w_lo[iu]), b = static_cast<S>(ty.w_hi[iu]);
      for (Index j = 0; j < out_w; ++j) {
        const auto ju = static_cast<std::size_t>(j);
        const S c = static_cast<S>(tx.w_lo[ju]), d = static_cast<S>(tx.w_hi[ju]);
        dst[i * out_w + j] = a * (c * r0[tx.lo[ju]] + d * r0[tx.hi[ju]]) +
                             b * (c * r1[tx.lo[ju]] + d * r1[tx.hi[ju]]);
      }
    }
  }
  return record<S>("resize_bilinear", out_shape, std::move(out), {x},
                   [ty, tx, planes, h, w, out_h, out_w](Node<S>& self) {
    auto& gx = input(self, 0).grad_buffer();
    for (Index p = 0; p < planes; ++p) {
      S* dst = gx.data() + p * h * w;
      const S* g = self.grad.data() + p * out_h * out_w;
      for (Index i = 0; i < out_h; ++i) {
        const auto iu = static_cast<std::size_t>(i);
        S* r0 = dst + ty.lo[iu] * w;
        S* r1 = dst + ty.hi[iu] * w;
        const S a = static_cast<S>(ty.w_lo[iu]), b = static_cast<S>(ty.w_hi[iu]);
        for (Index j = 0; j < out_w; ++j) {
          const auto ju = static_cast<std::size_t>(j);
          const S c = static_cast<S>(tx.w_lo[ju]), d = static_cast<S>(tx.w_hi[ju]);
          const S v = g[i * out_w + j];
          r0[tx.lo[ju]] += a * c * v;
          r0[tx.hi[ju]] += a * d * v;
          r1[tx.lo[ju]] += b * c * v;
          r1[tx.hi[ju]] += b * d * v;
        }
      }
    }
  });
}

template <typename S>
Tensor<S> upsample_bilinear(const Tensor<S>& x) {
  return resize_bilinear(x, 2 * x.dim(-2), 2 * x.dim(-1));
}

template <typename S>
Tensor<S> upsample_nearest(const Tensor<S>& x) {
  const Index h = x.dim(-2), w = x.dim(-1);
  const Index planes = x.numel() / (h * w);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = 2 * h;
  out_shape.back() = 2 * w;
  Array<S> out(x.numel() * 4);
  const auto& xv = x.values();
  for (Index p = 0; p < planes; ++p) {
    for (Index i = 0; i < 2 * h; ++i) {
      for (Index j = 0; j < 2 * w; ++j) out[(p * 2 * h + i) * 2 * w + j] = xv[(p * h + i / 2) * w + j / 2];
    }
  }
  return record<S>("upsample_nearest", out_shape, std::move(out), {x}, [planes, h, w](Node<S>& self) {
    auto& gx = input(self, 0).grad_buffer();
    for (Index p = 0; p < planes; ++p) {
      for (Index i = 0; i < 2 * h; ++i) {
        for (Index j = 0; j < 2 * w; ++j) gx[(p * h + i / 2) * w + j / 2] += self.grad[(p * 2 * h + i) * 2 * w + j];
      }
    }
  });
}

template <typename S>
Tensor<S> avgpool_global(const Tensor<S>& x) {
  if (x.ndim() != 4) throw DimensionError("avgpool_global expects [b,c,h,w], got " + to_string(x.shape()));
  return mean(x, {2, 3}, true);
}

template <typename S>
Tensor<S> instance_norm(const Tensor<S>& x, S eps) {
  if (x.ndim() != 4) throw DimensionError("instance_norm expects [b,c,h,w], got " + to_string(x.shape()));
  const Index plane = x.dim(2) * x.dim(3);
  const Index planes = x.numel() / plane;
  Array<S> out(x.numel());
  Array<S> inv_std(planes);
  using Vec = Eigen::Map<const Array<S>>;
  for (Index p = 0; p < planes; ++p) {
    Vec v(x.values().data() + p * plane, plane);
    const S mu = v.mean();
    const S var = (v - mu).square().mean();
    inv_std[p] = S(1) / std::sqrt(var + eps);
    Eigen::Map<Array<S>>(out.data() + p * plane, plane) = (v - mu) * inv_std[p];
  }
  return record<S>("instance_norm", x.shape(), std::move(out), {x}, [plane, planes, inv_std](Node<S>& self) {
    auto& gx = input(self, 0).grad_buffer();
    for (Index p = 0; p < planes; ++p) {
      Vec g(self.grad.data() + p * plane, plane);
      Vec xh(self.value.data() + p * plane, plane);
      const S g_mean = g.mean();
      const S gx_mean = (g * xh).mean();
      Eigen::Map<Array<S>>(gx.data() + p * plane, plane) += inv_std[p] * (g - g_mean - xh * gx_mean);
    }
  });
}

template <typename S>
Tensor<S> translate(const Tensor<S>& x, const std::vector<std::pair<Index, Index>>& shifts) {
  if (x.ndim() != 4 || static_cast<Index>(shifts.size()) != x.dim(0)) {
    throw DimensionError("translate expects [b,c,h,w] and one shift per sample");
  }
  const Index c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto apply = [c, h, w, shifts](const S* src, S* dst, bool adjoint) {
    for (Index b = 0; b < static_cast<Index>(shifts.size()); ++b) {
      const auto [dy, dx] = shifts[static_cast<std::size_t>(b)];
      for (Index ch = 0; ch < c; ++ch) {
        const Index base = (b * c + ch) * h * w;
        for (Index i = 0; i < h; ++i) {
          const Index si = i - dy;
          if (si < 0 || si >= h) continue;
          for (Index j = 0; j < w; ++j) {
            const Index sj = j - dx;
            if (sj < 0 || sj >= w) continue;
            if (adjoint) dst[base + si * w + sj] += src[base + i * w + j];
            else dst[base + i * w + j] = src[base + si * w + sj];
          }
        }
      }
    }
  };
  Array<S> out = Array<S>::Zero(x.numel());
  apply(x.values().data(), out.data(), false);
  return record<S>("translate", x.shape(), std::move(out), {x}, [apply](Node<S>& self) {
    apply(self.grad.data(), input(self, 0).grad_buffer().data(), true);
  });
}

#define BFR_INSTANTIATE_OPS(S)                                                              \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> div(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> scale(const Tensor<S>&, S);                                            \
  template Tensor<S> add_scalar(const Tensor<S>&, S);                                       \
  template Tensor<S> neg(const Tensor<S>&);                                                 \
  template Tensor<S> gelu(const Tensor<S>&);                                                \
  template Tensor<S> leaky_relu(const Tensor<S>&, S);                                       \
  template Tensor<S> relu(const Tensor<S>&);                                                \
  template Tensor<S> sigmoid(const Tensor<S>&);                                             \
  template Tensor<S> tanh(const Tensor<S>&);                                                \
  template Tensor<S> softplus(const Tensor<S>&);                                            \
  template Tensor<S> abs(const Tensor<S>&);                                                 \
  template Tensor<S> square(const Tensor<S>&);                                              \
  template Tensor<S> sqrt(const Tensor<S>&);                                                \
  template Tensor<S> exp(const Tensor<S>&);                                                 \
  template Tensor<S> log(const Tensor<S>&);                                                 \
  template Tensor<S> sum(const Tensor<S>&);                                                 \
  template Tensor<S> sum(const Tensor<S>&, std::vector<int>, bool);                         \
  template Tensor<S> mean(const Tensor<S>&);                                                \
  template Tensor<S> mean(const Tensor<S>&, std::vector<int>, bool);                        \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                      \
  template Tensor<S> permute(const Tensor<S>&, std::vector<int>);                           \
  template Tensor<S> transpose(const Tensor<S>&, int, int);                                 \
  template Tensor<S> broadcast_to(const Tensor<S>&, const Shape&);                          \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, int);                            \
  template Tensor<S> slice(const Tensor<S>&, int, Index, Index);                            \
  template Tensor<S> roll(const Tensor<S>&, int, Index);                                    \
  template Tensor<S> flip(const Tensor<S>&, int);                                           \
  template Tensor<S> take_last(const Tensor<S>&, const std::vector<Index>&);                \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                            \
  template Tensor<S> softmax(const Tensor<S>&, int);                                        \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, Index, Index);              \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Index, Index); \
  template Tensor<S> resize_bilinear(const Tensor<S>&, Index, Index);                       \
  template Tensor<S> upsample_bilinear(const Tensor<S>&);                                   \
  template Tensor<S> upsample_nearest(const Tensor<S>&);                                    \
  template Tensor<S> avgpool_global(const Tensor<S>&);                                      \
  template Tensor<S> instance_norm(const Tensor<S>&, S);                                    \
  template Tensor<S> translate(const Tensor<S>&, const std::vector<std::pair<Index, Index>>&);

BFR_INSTANTIATE_OPS(float)
BFR_INSTANTIATE_OPS(double)

}  // namespace bfr
