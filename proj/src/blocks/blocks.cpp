#include "bfr/blocks.hpp"

#include "bfr/errors.hpp"
#include "bfr/ops.hpp"

#include <cmath>

namespace bfr {

namespace {
// Mapping-network learning-rate multiplier (style-based GAN convention).
constexpr double kStyleLrMul = 0.01;
const double kLeakyGain = std::sqrt(2.0 / (1.0 + 0.2 * 0.2));
}

// ---- AdaIN -------------------------------------------------------------------

template <typename S>
AdaIN<S>::AdaIN(Index channels, Index style_dim, Rng& rng)
    : to_scale(style_dim, channels, rng, {.bias = true, .zero_init = true}),
      to_shift(style_dim, channels, rng, {.bias = true, .zero_init = true}),
      channels_(channels) {
  this->register_module("to_scale", to_scale);
  this->register_module("to_shift", to_shift);
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> AdaIN<S>::modulation(const StyleVector<S>& style) {
  const Index b = style.w.dim(0);
  auto gain = reshape(add_scalar(to_scale(style.w), S(1)), {b, channels_, 1, 1});
  auto bias = reshape(to_shift(style.w), {b, channels_, 1, 1});
  return {gain, bias};
}

template <typename S>
Tensor<S> AdaIN<S>::operator()(const Tensor<S>& x, const StyleVector<S>& style) {
  if (x.ndim() != 4 || x.dim(1) != channels_ || style.w.dim(0) != x.dim(0)) {
    throw DimensionError("adain: input " + to_string(x.shape()) + " incompatible with " +
                         std::to_string(channels_) + " channels / style " + to_string(style.w.shape()));
  }
  auto [gain, bias] = modulation(style);
  return add(mul(instance_norm(x, S(1e-5)), gain), bias);
}

// ---- style MLP ---------------------------------------------------------------

template <typename S>
StyleMlp<S>::StyleMlp(Index in_dim, Index style_dim, Index depth, Rng& rng) {
  if (depth < 1) throw ConfigError("style MLP needs at least one layer");
  for (Index i = 0; i < depth; ++i) {
    const bool last = i + 1 == depth;
    LayerOptions opts{.gain = last ? 1.0 : kLeakyGain, .lr_mul = kStyleLrMul};
    layers_.push_back(std::make_unique<Linear<S>>(i == 0 ? in_dim : style_dim, style_dim, rng, opts));
    this->register_module("fc" + std::to_string(i), *layers_.back());
  }
}

template <typename S>
StyleVector<S> StyleMlp<S>::operator()(const Tensor<S>& deep_feature) {
  // Unit-RMS input (style-based GAN convention) keeps the style bounded by the
  // slowly trained mapping weights.
  Tensor<S> h = div(deep_feature, sqrt(add_scalar(mean(square(deep_feature), {1}, true), S(1e-8))));
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = (*layers_[i])(h);
    if (i + 1 < layers_.size()) h = leaky_relu(h, S(0.2));
  }
  return {h};
}

// ---- channel attention block -------------------------------------------------

namespace {
Index checked_squeeze(Index channels, Index squeeze) {
  if (squeeze <= 0 || channels % squeeze != 0) {
    throw ConfigError("CAB: channels " + std::to_string(channels) + " not divisible by squeeze ratio " +
                      std::to_string(squeeze));
  }
  return channels / squeeze;
}
}  // namespace

template <typename S>
ChannelAttentionBlock<S>::ChannelAttentionBlock(Index channels, Index squeeze, Rng& rng)
    : conv1(channels, channels, 3, rng, {.gain = std::sqrt(2.0)}),
      conv2(channels, channels, 3, rng),
      squeeze_fc(channels, checked_squeeze(channels, squeeze), 1, rng, {.gain = std::sqrt(2.0)}),
      excite_fc(channels / squeeze, channels, 1, rng) {
  this->register_module("conv1", conv1);
  this->register_module("conv2", conv2);
  this->register_module("squeeze", squeeze_fc);
  this->register_module("excite", excite_fc);
}

template <typename S>
Tensor<S> ChannelAttentionBlock<S>::gate(const Tensor<S>& y) {
  return sigmoid(excite_fc(relu(squeeze_fc(avgpool_global(y)))));
}

template <typename S>
Tensor<S> ChannelAttentionBlock<S>::operator()(const Tensor<S>& x) {
  auto y = conv2(gelu(conv1(x)));
  return mul(y, gate(y));
}

// ---- double attention --------------------------------------------------------

template <typename S>
DoubleAttention<S>::DoubleAttention(Index channels, Index heads, WindowSpec window, Rng& rng)
    : qkv(channels, 3 * channels, 1, rng),
      proj(channels, channels, 1, rng),
      channels_(channels),
      heads_(heads),
      window_(window) {
  if (heads < 2 || heads % 2 != 0) throw ConfigError("double attention needs an even head count");
  if (channels % heads != 0) {
    throw ConfigError("channels " + std::to_string(channels) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (window.size <= 0 || window.size % 2 != 0) throw ConfigError("window size must be positive and even");
  this->register_module("qkv", qkv);
  this->register_module("proj", proj);

  const Index ws = window.size;
  const Index span = 2 * ws - 1;
  bias_table_ = &this->register_parameter("position_bias", Tensor<S>::zeros({heads, span * span}));
  const Index n = ws * ws;
  bias_index_.reserve(static_cast<std::size_t>(n * n));
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      const Index dy = i / ws - j / ws + ws - 1;
      const Index dx = i % ws - j % ws + ws - 1;
      bias_index_.push_back(dy * span + dx);
    }
  }
}

template <typename S>
Tensor<S> DoubleAttention<S>::attend(const Tensor<S>& part, const Tensor<S>& bias, Index h, Index w,
                                     AttentionTrace<S>* trace) {
  const Index b = part.dim(0), hh = part.dim(2), d = part.dim(3);
  const Index ws = window_.size, nh = h / ws, nw = w / ws, n = ws * ws;
  const Index windows = b * nh * nw;
  auto t = reshape(part, {b, 3, hh, d, nh, ws, nw, ws});
  t = permute(t, {1, 0, 4, 6, 2, 5, 7, 3});  // [3, b, nh, nw, hh, ws, ws, d]
  t = reshape(t, {3, windows, hh, n, d});
  auto q = reshape(slice(t, 0, 0, 1), {windows, hh, n, d});
  auto k = reshape(slice(t, 0, 1, 1), {windows, hh, n, d});
  auto v = reshape(slice(t, 0, 2, 1), {windows, hh, n, d});
  const S scale_factor = S(1) / std::sqrt(static_cast<S>(d));
  auto logits = add(scale(matmul(q, transpose(k, -2, -1)), scale_factor), bias);
  auto attn = softmax(logits, -1);
  if (trace) trace->weights.push_back(attn);
  auto o = reshape(matmul(attn, v), {b, nh, nw, hh, ws, ws, d});
  o = permute(o, {0, 3, 6, 1, 4, 2, 5});  // [b, hh, d, nh, ws, nw, ws]
  return reshape(o, {b, hh * d, h, w});
}

template <typename S>
Tensor<S> DoubleAttention<S>::operator()(const Tensor<S>& x, AttentionTrace<S>* trace) {
  if (x.ndim() != 4 || x.dim(1) != channels_) {
    throw DimensionError("double attention: expected [b," + std::to_string(channels_) + ",h,w], got " +
                         to_string(x.shape()));
  }
  const Index b = x.dim(0), h = x.dim(2), w = x.dim(3);
  const Index ws = window_.size;
  if (h % ws != 0 || w % ws != 0) {
    throw ConfigError("window size " + std::to_string(ws) + " does not divide resolution " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
  const Index hh = heads_ / 2, d = channels_ / heads_, n = ws * ws, s = window_.shift();
  auto qkv6 = reshape(qkv(x), {b, 3, heads_, d, h, w});
  auto bias = reshape(take_last(bias_table_->value, bias_index_), {heads_, n, n});

  auto local = attend(slice(qkv6, 2, 0, hh), slice(bias, 0, 0, hh), h, w, trace);
  auto shifted_in = roll(roll(slice(qkv6, 2, hh, hh), 4, -s), 5, -s);
  auto shifted = attend(shifted_in, slice(bias, 0, hh, hh), h, w, trace);
  shifted = roll(roll(shifted, 2, s), 3, s);
  return proj(concat<S>({local, shifted}, 1));
}

#define BFR_INSTANTIATE_BLOCKS(S)            \
  template class AdaIN<S>;                   \
  template class StyleMlp<S>;                \
  template class ChannelAttentionBlock<S>;   \
  template class DoubleAttention<S>;
BFR_INSTANTIATE_BLOCKS(float)
BFR_INSTANTIATE_BLOCKS(double)

}  // namespace bfr
