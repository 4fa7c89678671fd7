#include "bfr/wavelet.hpp"

#include "bfr/errors.hpp"
#include "bfr/ops.hpp"

namespace bfr {

namespace {

struct HaarGeometry {
  Index batch, channels, half_h, half_w;
  Index plane() const { return half_h * half_w; }
};

// Spatial layout [b,c,2h,2w] <-> packed layout [b,4c,h,w].
template <typename S>
void analysis(const HaarGeometry& g, const S* src, S* dst, bool accumulate) {
  const Index w = 2 * g.half_w;
  for (Index b = 0; b < g.batch; ++b) {
    for (Index c = 0; c < g.channels; ++c) {
      const S* in = src + (b * g.channels + c) * 4 * g.plane();
      S* band[4];
      for (Index k = 0; k < 4; ++k) band[k] = dst + ((b * 4 + k) * g.channels + c) * g.plane();
      for (Index i = 0; i < g.half_h; ++i) {
        const S* r0 = in + (2 * i) * w;
        const S* r1 = r0 + w;
        for (Index j = 0; j < g.half_w; ++j) {
          const S a = r0[2 * j], bb = r0[2 * j + 1], cc = r1[2 * j], d = r1[2 * j + 1];
          const Index o = i * g.half_w + j;
          const S v[4] = {S(0.5) * (a + bb + cc + d), S(0.5) * (a + bb - cc - d),
                          S(0.5) * (a - bb + cc - d), S(0.5) * (a - bb - cc + d)};
          for (int k = 0; k < 4; ++k) band[k][o] = accumulate ? band[k][o] + v[k] : v[k];
        }
      }
    }
  }
}

template <typename S>
void synthesis(const HaarGeometry& g, const S* src, S* dst, bool accumulate) {
  const Index w = 2 * g.half_w;
  for (Index b = 0; b < g.batch; ++b) {
    for (Index c = 0; c < g.channels; ++c) {
      S* out = dst + (b * g.channels + c) * 4 * g.plane();
      const S* band[4];
      for (Index k = 0; k < 4; ++k) band[k] = src + ((b * 4 + k) * g.channels + c) * g.plane();
      for (Index i = 0; i < g.half_h; ++i) {
        S* r0 = out + (2 * i) * w;
        S* r1 = r0 + w;
        for (Index j = 0; j < g.half_w; ++j) {
          const Index o = i * g.half_w + j;
          const S ll = band[0][o], lh = band[1][o], hl = band[2][o], hh = band[3][o];
          const S v[4] = {S(0.5) * (ll + lh + hl + hh), S(0.5) * (ll + lh - hl - hh),
                          S(0.5) * (ll - lh + hl - hh), S(0.5) * (ll - lh - hl + hh)};
          S* targets[4] = {&r0[2 * j], &r0[2 * j + 1], &r1[2 * j], &r1[2 * j + 1]};
          for (int k = 0; k < 4; ++k) *targets[k] = accumulate ? *targets[k] + v[k] : v[k];
        }
      }
    }
  }
}

}  // namespace

template <typename S>
Tensor<S> dwt2_packed(const Tensor<S>& x) {
  if (x.ndim() != 4) throw DimensionError("dwt2 expects [b,c,h,w], got " + to_string(x.shape()));
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw DimensionError("dwt2 needs even spatial extents, got " + to_string(x.shape()));
  }
  const HaarGeometry g{x.dim(0), x.dim(1), x.dim(2) / 2, x.dim(3) / 2};
  typename Tensor<S>::Array out(x.numel());
  analysis(g, x.values().data(), out.data(), false);
  return detail::record<S>("dwt2", {g.batch, 4 * g.channels, g.half_h, g.half_w}, std::move(out), {x},
                           [g](detail::Node<S>& self) {
    synthesis(g, self.grad.data(), self.inputs[0]->grad_buffer().data(), true);
  });
}

template <typename S>
Tensor<S> idwt2_packed(const Tensor<S>& packed) {
  if (packed.ndim() != 4 || packed.dim(1) % 4 != 0) {
    throw DimensionError("idwt2 expects [b,4c,h,w], got " + to_string(packed.shape()));
  }
  const HaarGeometry g{packed.dim(0), packed.dim(1) / 4, packed.dim(2), packed.dim(3)};
  typename Tensor<S>::Array out(packed.numel());
  synthesis(g, packed.values().data(), out.data(), false);
  return detail::record<S>("idwt2", {g.batch, g.channels, 2 * g.half_h, 2 * g.half_w}, std::move(out),
                           {packed}, [g](detail::Node<S>& self) {
    analysis(g, self.grad.data(), self.inputs[0]->grad_buffer().data(), true);
  });
}

template <typename S>
SubbandQuad<S> dwt2(const Tensor<S>& x) {
  const auto packed = dwt2_packed(x);
  const Index c = x.dim(1);
  return {slice(packed, 1, 0, c), slice(packed, 1, c, c), slice(packed, 1, 2 * c, c),
          slice(packed, 1, 3 * c, c)};
}

template <typename S>
Tensor<S> idwt2(const SubbandQuad<S>& quad) {
  const Shape& s = quad.ll.shape();
  if (quad.lh.shape() != s || quad.hl.shape() != s || quad.hh.shape() != s) {
    throw DimensionError("idwt2: subband shapes differ");
  }
  return idwt2_packed(concat<S>({quad.ll, quad.lh, quad.hl, quad.hh}, 1));
}

template Tensor<float> dwt2_packed(const Tensor<float>&);
template Tensor<double> dwt2_packed(const Tensor<double>&);
template Tensor<float> idwt2_packed(const Tensor<float>&);
template Tensor<double> idwt2_packed(const Tensor<double>&);
template SubbandQuad<float> dwt2(const Tensor<float>&);
template SubbandQuad<double> dwt2(const Tensor<double>&);
template Tensor<float> idwt2(const SubbandQuad<float>&);
template Tensor<double> idwt2(const SubbandQuad<double>&);

}  // namespace bfr
