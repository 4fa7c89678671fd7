#pragma once

#include "bfr/tensor.hpp"

#include <optional>
#include <utility>
#include <vector>

namespace bfr {

// Differentiable free functions over Tensor<Scalar>. Binary elementwise ops
// broadcast numpy-style; reductions take a list of axes (negative allowed).

template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b);

template <typename S> Tensor<S> scale(const Tensor<S>& x, S factor);
template <typename S> Tensor<S> add_scalar(const Tensor<S>& x, S value);
template <typename S> Tensor<S> neg(const Tensor<S>& x);

/// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
template <typename S> Tensor<S> gelu(const Tensor<S>& x);
template <typename S> Tensor<S> leaky_relu(const Tensor<S>& x, S slope = S(0.2));
template <typename S> Tensor<S> relu(const Tensor<S>& x);
template <typename S> Tensor<S> sigmoid(const Tensor<S>& x);
template <typename S> Tensor<S> tanh(const Tensor<S>& x);
/// log(1 + eˣ), evaluated without overflow.
template <typename S> Tensor<S> softplus(const Tensor<S>& x);
template <typename S> Tensor<S> abs(const Tensor<S>& x);
template <typename S> Tensor<S> square(const Tensor<S>& x);
template <typename S> Tensor<S> sqrt(const Tensor<S>& x);
template <typename S> Tensor<S> exp(const Tensor<S>& x);
template <typename S> Tensor<S> log(const Tensor<S>& x);

template <typename S> Tensor<S> sum(const Tensor<S>& x);
template <typename S> Tensor<S> sum(const Tensor<S>& x, std::vector<int> axes, bool keepdim = false);
template <typename S> Tensor<S> mean(const Tensor<S>& x);
template <typename S> Tensor<S> mean(const Tensor<S>& x, std::vector<int> axes, bool keepdim = false);

template <typename S> Tensor<S> reshape(const Tensor<S>& x, Shape shape);
template <typename S> Tensor<S> permute(const Tensor<S>& x, std::vector<int> order);
/// Swaps two axes.
template <typename S> Tensor<S> transpose(const Tensor<S>& x, int axis_a = -2, int axis_b = -1);
template <typename S> Tensor<S> broadcast_to(const Tensor<S>& x, const Shape& shape);
template <typename S> Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis);
template <typename S> Tensor<S> slice(const Tensor<S>& x, int axis, Index start, Index length);
/// Cyclic shift: out[i] = x[(i - shift) mod n] along `axis`.
template <typename S> Tensor<S> roll(const Tensor<S>& x, int axis, Index shift);
template <typename S> Tensor<S> flip(const Tensor<S>& x, int axis);
/// Selects entries of the last axis: out[..., j] = x[..., indices[j]].
template <typename S> Tensor<S> take_last(const Tensor<S>& x, const std::vector<Index>& indices);

/// Batched matrix product over the last two axes; leading axes broadcast.
template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> softmax(const Tensor<S>& x, int axis = -1);

/// 2-D cross-correlation with zero padding.
/// x: [b,c,h,w], kernel: [o,c,kh,kw], bias (optional): [o].
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernel, Index stride = 1, Index pad = 0);
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias, Index stride,
                 Index pad);

/// Bilinear resize of the last two axes (half-pixel centers, edge clamp).
template <typename S> Tensor<S> resize_bilinear(const Tensor<S>& x, Index out_h, Index out_w);
template <typename S> Tensor<S> upsample_bilinear(const Tensor<S>& x);  // ×2
template <typename S> Tensor<S> upsample_nearest(const Tensor<S>& x);   // ×2
/// Spatial mean: [b,c,h,w] -> [b,c,1,1].
template <typename S> Tensor<S> avgpool_global(const Tensor<S>& x);
/// Per-(sample, channel) normalization over the spatial plane.
template <typename S> Tensor<S> instance_norm(const Tensor<S>& x, S eps = S(1e-5));
/// Integer translation of each sample of [b,c,h,w] with zero fill.
template <typename S>
Tensor<S> translate(const Tensor<S>& x, const std::vector<std::pair<Index, Index>>& shifts);

// Expression-friendly operators.
template <typename S> Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S> Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }
template <typename S> Tensor<S> operator*(const Tensor<S>& x, S factor) { return scale(x, factor); }
template <typename S> Tensor<S> operator*(S factor, const Tensor<S>& x) { return scale(x, factor); }
template <typename S> Tensor<S> operator-(const Tensor<S>& x) { return neg(x); }

/// Broadcast result shape of two operands; throws DimensionError.
Shape broadcast_shapes(const Shape& a, const Shape& b);

}  // namespace bfr
