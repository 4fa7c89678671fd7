#pragma once

#include "bfr/tensor.hpp"

namespace bfr {

/// Single-level 2-D Haar decomposition of a [b,c,h,w] tensor.
///
/// Per 2×2 block [[a, b], [c, d]]:
///   ll = (a + b + c + d) / 2
///   lh = (a + b − c − d) / 2   (vertical detail)
///   hl = (a − b + c − d) / 2   (horizontal detail)
///   hh = (a − b − c + d) / 2
/// The block transform is symmetric and orthonormal, so it is its own inverse
/// and energy is conserved exactly.
template <typename S>
struct SubbandQuad {
  Tensor<S> ll, lh, hl, hh;
};

/// [b,c,h,w] -> [b,4c,h/2,w/2] with channel blocks ordered ll, lh, hl, hh.
template <typename S> Tensor<S> dwt2_packed(const Tensor<S>& x);
/// Inverse of dwt2_packed.
template <typename S> Tensor<S> idwt2_packed(const Tensor<S>& packed);

template <typename S> SubbandQuad<S> dwt2(const Tensor<S>& x);
template <typename S> Tensor<S> idwt2(const SubbandQuad<S>& quad);

}  // namespace bfr
