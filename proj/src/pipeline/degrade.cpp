#include "bfr/errors.hpp"
#include "bfr/ops.hpp"
#include "bfr/pipeline.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace bfr {

namespace {

using Plane = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Applies f to every [h, w] plane of x, producing planes of a new extent.
template <typename S, typename F>
Tensor<S> map_planes(const Tensor<S>& x, Index out_h, Index out_w, F&& f) {
  if (x.ndim() < 2) throw DimensionError("expected an image tensor, got " + to_string(x.shape()));
  const Index h = x.dim(-2), w = x.dim(-1);
  const Index planes = x.numel() / (h * w);
  Shape shape = x.shape();
  shape[shape.size() - 2] = out_h;
  shape[shape.size() - 1] = out_w;
  Eigen::Array<S, Eigen::Dynamic, 1> out(planes * out_h * out_w);
  for (Index p = 0; p < planes; ++p) {
    Plane in = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                   x.values().data() + p * h * w, h, w)
                   .template cast<double>();
    Plane res = f(in);
    Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(out.data() + p * out_h * out_w,
                                                                                   out_h, out_w) =
        res.template cast<S>();
  }
  return Tensor<S>(shape, std::move(out));
}

// Half-sample symmetric extension: ... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
Index reflect(Index i, Index n) {
  const Index period = 2 * n;
  Index m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - 1 - m;
}

// Matrix applying a 1-D symmetric kernel along an axis of length n.
Plane blur_matrix(Index n, double sigma) {
  const Index radius = std::max<Index>(1, static_cast<Index>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double total = 0;
  for (Index j = -radius; j <= radius; ++j) total += k[j + radius] = std::exp(-0.5 * j * j / (sigma * sigma));
  Plane m = Plane::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = -radius; j <= radius; ++j) m(i, reflect(i + j, n)) += k[j + radius] / total;
  }
  return m;
}

// Rows: output cells of width n/t; entries: overlap with each input pixel.
Plane area_matrix(Index n, Index t) {
  Plane m = Plane::Zero(t, n);
  const double cell = static_cast<double>(n) / t;
  for (Index o = 0; o < t; ++o) {
    const double a = o * cell, b = (o + 1) * cell;
    for (Index i = static_cast<Index>(std::floor(a)); i < std::min<Index>(n, Index(std::ceil(b))); ++i) {
      const double overlap = std::min<double>(b, i + 1) - std::max<double>(a, i);
      if (overlap > 0) m(o, i) = overlap / cell;
    }
  }
  return m;
}

Index scaled_extent(Index n, double factor) {
  return std::max<Index>(1, static_cast<Index>(std::lround(n / factor)));
}

const double kLuminance[8][8] = {
    {16, 11, 10, 16, 24, 40, 51, 61},     {12, 12, 14, 19, 26, 58, 60, 55},
    {14, 13, 16, 24, 40, 57, 69, 56},     {14, 17, 22, 29, 51, 87, 80, 62},
    {18, 22, 37, 56, 68, 109, 103, 77},   {24, 35, 55, 64, 81, 104, 113, 92},
    {49, 64, 78, 87, 103, 121, 120, 101}, {72, 92, 95, 98, 112, 100, 103, 99}};

Eigen::Matrix<double, 8, 8> dct_basis() {
  Eigen::Matrix<double, 8, 8> c;
  for (int k = 0; k < 8; ++k) {
    const double a = k == 0 ? std::sqrt(1.0 / 8) : std::sqrt(2.0 / 8);
    for (int n = 0; n < 8; ++n) c(k, n) = a * std::cos(std::numbers::pi * (2 * n + 1) * k / 16);
  }
  return c;
}

}  // namespace

DegradationParams DegradationParams::identity() {
  DegradationParams p;
  p.blur_sigma = {0, 0};
  p.downscale = {1, 1};
  p.noise_sigma = {0, 0};
  p.quality = {100, 100};
  return p;
}

void DegradationParams::validate() const {
  auto check = [](const Range& r, double lo, double hi, const char* name) {
    if (!(r.lo <= r.hi) || r.lo < lo || r.hi > hi) {
      throw ConfigError(std::string("degradation range ") + name + " must satisfy " + std::to_string(lo) +
                        " <= lo <= hi <= " + std::to_string(hi));
    }
  };
  check(blur_sigma, 0, 50, "blur_sigma");
  check(downscale, 1, 64, "downscale");
  check(noise_sigma, 0, 10, "noise_sigma");
  check(quality, 1, 100, "quality");
}

DegradationSample sample_degradation(const DegradationParams& params, Rng& rng) {
  auto draw = [&rng](const Range& r) {
    if (r.lo == r.hi) return r.lo;
    return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
  };
  DegradationSample s;
  s.blur_sigma = draw(params.blur_sigma);
  s.scale = draw(params.downscale);
  s.noise_sigma = draw(params.noise_sigma);
  s.quality = draw(params.quality);
  return s;
}

template <typename S>
Tensor<S> gaussian_blur(const Tensor<S>& x, double sigma) {
  if (sigma <= 0) return x.detach();
  const Index h = x.dim(-2), w = x.dim(-1);
  const Plane bh = blur_matrix(h, sigma), bw = blur_matrix(w, sigma);
  return map_planes(x, h, w, [&](const Plane& p) -> Plane { return bh * p * bw.transpose(); });
}

template <typename S>
Tensor<S> area_downscale(const Tensor<S>& x, double factor) {
  const Index h = x.dim(-2), w = x.dim(-1);
  const Index th = scaled_extent(h, factor), tw = scaled_extent(w, factor);
  if (th == h && tw == w) return x.detach();
  const Plane ah = area_matrix(h, th), aw = area_matrix(w, tw);
  return map_planes(x, th, tw, [&](const Plane& p) -> Plane { return ah * p * aw.transpose(); });
}

template <typename S>
Tensor<S> box_downscale_upscale(const Tensor<S>& x, double factor) {
  NoGradGuard guard;
  auto low = area_downscale(x, factor);
  if (low.shape() == x.shape()) return low;
  return resize_bilinear(low, x.dim(-2), x.dim(-1));
}

template <typename S>
Tensor<S> add_gaussian_noise(const Tensor<S>& x, double sigma, Rng& rng) {
  if (sigma <= 0) return x.detach();
  std::normal_distribution<double> dist(0.0, sigma);
  Eigen::Array<S, Eigen::Dynamic, 1> v = x.values();
  for (Index i = 0; i < v.size(); ++i) v[i] += static_cast<S>(dist(rng));
  return Tensor<S>(x.shape(), std::move(v));
}

template <typename S>
Tensor<S> dct_compress(const Tensor<S>& x, double quality) {
  quality = std::clamp(quality, 1.0, 100.0);
  if (quality >= 100) return x.detach();
  const double scale = quality < 50 ? 5000.0 / quality : 200.0 - 2.0 * quality;
  const auto c = dct_basis();
  const Index h = x.dim(-2), w = x.dim(-1);
  const Index ph = (h + 7) / 8 * 8, pw = (w + 7) / 8 * 8;
  return map_planes(x, h, w, [&](const Plane& p) -> Plane {
    Plane padded(ph, pw);
    for (Index i = 0; i < ph; ++i)
      for (Index j = 0; j < pw; ++j) padded(i, j) = p(std::min(i, h - 1), std::min(j, w - 1));
    for (Index by = 0; by < ph; by += 8) {
      for (Index bx = 0; bx < pw; bx += 8) {
        // Orthonormal 2-D DCT-II equals the JPEG forward transform; 127.5
        // converts [-1,1] units to 8-bit levels.
        Eigen::Matrix<double, 8, 8> coeff = c * padded.block<8, 8>(by, bx) * c.transpose() * 127.5;
        for (int u = 0; u < 8; ++u) {
          for (int v = 0; v < 8; ++v) {
            const double step = kLuminance[u][v] * scale / 100.0;
            coeff(u, v) = std::round(coeff(u, v) / step) * step;
          }
        }
        padded.block<8, 8>(by, bx) = c.transpose() * (coeff / 127.5) * c;
      }
    }
    return padded.topLeftCorner(h, w);
  });
}

template <typename S>
Tensor<S> degrade(const Tensor<S>& hq, const DegradationSample& sample, Rng& rng) {
  NoGradGuard guard;
  const Index h = hq.dim(-2), w = hq.dim(-1);
  auto x = gaussian_blur(hq, sample.blur_sigma);
  x = area_downscale(x, sample.scale);
  x = add_gaussian_noise(x, sample.noise_sigma, rng);
  x = dct_compress(x, sample.quality);
  if (x.dim(-2) != h || x.dim(-1) != w) x = resize_bilinear(x, h, w);
  Eigen::Array<S, Eigen::Dynamic, 1> v = x.values().cwiseMax(S(-1)).cwiseMin(S(1));
  return Tensor<S>(hq.shape(), std::move(v));
}

template <typename S>
Tensor<S> degrade(const Tensor<S>& hq, const DegradationParams& params, Rng& rng) {
  params.validate();
  const auto sample = sample_degradation(params, rng);
  return degrade(hq, sample, rng);
}

#define BFR_INSTANTIATE_DEGRADE(S)                                                \
  template Tensor<S> gaussian_blur(const Tensor<S>&, double);                     \
  template Tensor<S> area_downscale(const Tensor<S>&, double);                    \
  template Tensor<S> box_downscale_upscale(const Tensor<S>&, double);             \
  template Tensor<S> add_gaussian_noise(const Tensor<S>&, double, Rng&);          \
  template Tensor<S> dct_compress(const Tensor<S>&, double);                      \
  template Tensor<S> degrade(const Tensor<S>&, const DegradationSample&, Rng&);   \
  template Tensor<S> degrade(const Tensor<S>&, const DegradationParams&, Rng&);
BFR_INSTANTIATE_DEGRADE(float)
BFR_INSTANTIATE_DEGRADE(double)

}  // namespace bfr
