#include "bfr/errors.hpp"
#include "bfr/ops.hpp"
#include "bfr/pipeline.hpp"

#include <cmath>

namespace bfr {

void AugPolicy::validate() const {
  if (translation_ratio < 0 || translation_ratio > 0.125) throw ConfigError("translation ratio must be in [0, 1/8]");
  if (cutout_ratio < 0 || cutout_ratio > 0.5) throw ConfigError("cutout ratio must be in [0, 1/2]");
  if (color_strength < 0 || color_strength > 0.5) throw ConfigError("color strength must be in [0, 0.5]");
}

AugToken sample_augmentation(const AugPolicy& policy, Index batch, Index height, Index width, Rng& rng) {
  policy.validate();
  AugToken token;
  token.policy = policy;
  token.height = height;
  token.width = width;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double s = policy.color_strength;
  const Index max_dy = static_cast<Index>(std::lround(policy.translation_ratio * height));
  const Index max_dx = static_cast<Index>(std::lround(policy.translation_ratio * width));
  const Index cut = static_cast<Index>(std::lround(policy.cutout_ratio * std::min(height, width)));
  for (Index i = 0; i < batch; ++i) {
    AugToken::Sample smp;
    if (policy.flip) smp.flip = unit(rng) < 0.5;
    if (policy.color) {
      smp.brightness = (2 * unit(rng) - 1) * s;
      smp.saturation = 1 + (2 * unit(rng) - 1) * s;
      smp.contrast = 1 + (2 * unit(rng) - 1) * s;
    }
    if (policy.translation) {
      smp.dy = std::uniform_int_distribution<Index>(-max_dy, max_dy)(rng);
      smp.dx = std::uniform_int_distribution<Index>(-max_dx, max_dx)(rng);
    }
    if (policy.cutout && cut > 0) {
      smp.cut_size = cut;
      smp.cut_y = std::uniform_int_distribution<Index>(0, height - 1)(rng);
      smp.cut_x = std::uniform_int_distribution<Index>(0, width - 1)(rng);
    }
    token.samples.push_back(smp);
  }
  return token;
}

template <typename S>
Tensor<S> apply_augmentation(const Tensor<S>& x, const AugToken& token) {
  const Index b = x.dim(0), h = x.dim(2), w = x.dim(3);
  if (static_cast<Index>(token.samples.size()) != b || token.height != h || token.width != w) {
    throw DimensionError("augmentation token does not match " + to_string(x.shape()));
  }
  const auto& policy = token.policy;
  auto per_sample = [&](auto field) {
    typename Tensor<S>::Array v(b);
    for (Index i = 0; i < b; ++i) v[i] = static_cast<S>(field(token.samples[static_cast<std::size_t>(i)]));
    return Tensor<S>({b, 1, 1, 1}, std::move(v));
  };

  Tensor<S> y = x;
  if (policy.flip) {
    auto mask = per_sample([](const AugToken::Sample& s) { return s.flip ? 1.0 : 0.0; });
    auto keep = per_sample([](const AugToken::Sample& s) { return s.flip ? 0.0 : 1.0; });
    y = add(mul(keep, y), mul(mask, flip(y, 3)));
  }
  if (policy.color) {
    y = add(y, per_sample([](const AugToken::Sample& s) { return s.brightness; }));
    auto gray = mean(y, {1}, true);
    y = add(mul(sub(y, gray), per_sample([](const AugToken::Sample& s) { return s.saturation; })), gray);
    auto level = mean(y, {1, 2, 3}, true);
    y = add(mul(sub(y, level), per_sample([](const AugToken::Sample& s) { return s.contrast; })), level);
  }
  if (policy.translation) {
    std::vector<std::pair<Index, Index>> shifts;
    for (const auto& s : token.samples) shifts.emplace_back(s.dy, s.dx);
    y = translate(y, shifts);
  }
  if (policy.cutout) {
    typename Tensor<S>::Array mask = Tensor<S>::Array::Ones(b * h * w);
    for (Index i = 0; i < b; ++i) {
      const auto& s = token.samples[static_cast<std::size_t>(i)];
      if (s.cut_size == 0) continue;
      const Index y0 = std::max<Index>(0, s.cut_y - s.cut_size / 2), y1 = std::min(h, s.cut_y - s.cut_size / 2 + s.cut_size);
      const Index x0 = std::max<Index>(0, s.cut_x - s.cut_size / 2), x1 = std::min(w, s.cut_x - s.cut_size / 2 + s.cut_size);
      for (Index r = y0; r < y1; ++r)
        for (Index c = x0; c < x1; ++c) mask[(i * h + r) * w + c] = 0;
    }
    y = mul(y, Tensor<S>({b, 1, h, w}, std::move(mask)));
  }
  return y;
}

template <typename S>
Tensor<S> diff_augment(const Tensor<S>& x, const AugPolicy& policy, Rng& rng) {
  if (policy.empty()) return x;
  return apply_augmentation(x, sample_augmentation(policy, x.dim(0), x.dim(2), x.dim(3), rng));
}

template Tensor<float> apply_augmentation(const Tensor<float>&, const AugToken&);
template Tensor<double> apply_augmentation(const Tensor<double>&, const AugToken&);
template Tensor<float> diff_augment(const Tensor<float>&, const AugPolicy&, Rng&);
template Tensor<double> diff_augment(const Tensor<double>&, const AugPolicy&, Rng&);

}  // namespace bfr
