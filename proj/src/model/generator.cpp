#include "bfr/errors.hpp"
#include "bfr/model.hpp"
#include "bfr/ops.hpp"

#include <cmath>

namespace bfr {

namespace {
const double kReluGain = std::sqrt(2.0);

bool is_power_of_two(Index v) { return v > 0 && (v & (v - 1)) == 0; }
}  // namespace

// ---- config ------------------------------------------------------------------

GeneratorConfig GeneratorConfig::for_size(Index img_size) {
  GeneratorConfig c;
  c.img_size = img_size;
  c.channels.clear();
  for (Index r = 4; r <= img_size; r *= 2) {
    c.channels.push_back(r <= 8 ? 128 : r <= 32 ? 64 : r == 64 ? 32 : 16);
  }
  return c;
}

std::vector<Index> GeneratorConfig::ladder() const {
  std::vector<Index> out;
  for (Index r = 4; r <= img_size; r *= 2) out.push_back(r);
  return out;
}

Index GeneratorConfig::channels_at(Index resolution) const {
  const auto rungs = ladder();
  for (std::size_t i = 0; i < rungs.size(); ++i) {
    if (rungs[i] == resolution) return channels.at(i);
  }
  throw ConfigError("resolution " + std::to_string(resolution) + " is not on the ladder");
}

void GeneratorConfig::validate() const {
  if (!is_power_of_two(img_size) || img_size < 8) {
    throw ConfigError("img_size must be a power of two >= 8, got " + std::to_string(img_size));
  }
  if (channels.size() != ladder().size()) {
    throw ConfigError("expected " + std::to_string(ladder().size()) + " channel entries for img_size " +
                      std::to_string(img_size) + ", got " + std::to_string(channels.size()));
  }
  for (Index c : channels) {
    if (c <= 0) throw ConfigError("channel counts must be positive");
    if (c % heads != 0) throw ConfigError("channels " + std::to_string(c) + " not divisible by heads");
    if (use_cab && c % squeeze != 0) throw ConfigError("channels " + std::to_string(c) + " not divisible by squeeze");
  }
  if (style_dim <= 0 || style_depth <= 0 || mlp_ratio <= 0) throw ConfigError("style/mlp sizes must be positive");
  if (cab_alpha < 0) throw ConfigError("cab_alpha must be non-negative");
}

template <typename S>
const Tensor<S>& EncoderFeatures<S>::at(Index resolution) const {
  for (const auto& t : pyramid) {
    if (t.dim(2) == resolution) return t;
  }
  throw DimensionError("no encoder feature at resolution " + std::to_string(resolution));
}

// ---- encoder -----------------------------------------------------------------

template <typename S>
Encoder<S>::Encoder(const GeneratorConfig& config, Rng& rng)
    : from_rgb(3, config.channels_at(config.img_size), 3, rng, {.gain = kReluGain}), config_(config) {
  this->register_module("from_rgb", from_rgb);
  for (Index r = config.img_size; r > 4; r /= 2) {
    downs.push_back(std::make_unique<Conv2d<S>>(config.channels_at(r), config.channels_at(r / 2), 3, rng,
                                                LayerOptions{.gain = kReluGain}, 2));
    this->register_module("down" + std::to_string(r / 2), *downs.back());
  }
}

template <typename S>
EncoderFeatures<S> Encoder<S>::operator()(const Tensor<S>& lq) {
  const Index s = config_.img_size;
  if (lq.ndim() != 4 || lq.dim(1) != 3 || lq.dim(2) != s || lq.dim(3) != s) {
    throw DimensionError("encoder expects [b,3," + std::to_string(s) + "," + std::to_string(s) + "], got " +
                         to_string(lq.shape()));
  }
  EncoderFeatures<S> out;
  auto h = leaky_relu(from_rgb(lq), S(0.2));
  out.pyramid.push_back(h);
  for (auto& down : downs) {
    h = leaky_relu((*down)(h), S(0.2));
    out.pyramid.push_back(h);
  }
  out.deep_flat = reshape(h, {h.dim(0), h.numel() / h.dim(0)});
  return out;
}

// ---- aggregated attention ----------------------------------------------------

template <typename S>
AggregatedAttention<S>::AggregatedAttention(Index channels, Index resolution, const GeneratorConfig& config,
                                            Rng& rng)
    : norm1(channels, config.style_dim, rng),
      attention(channels, config.heads, {std::min(config.window, resolution)}, rng),
      norm2(channels, config.style_dim, rng),
      mlp_in(channels, channels * config.mlp_ratio, 1, rng, {.gain = kReluGain}),
      mlp_out(channels * config.mlp_ratio, channels, 1, rng),
      alpha(static_cast<S>(config.cab_alpha)) {
  this->register_module("norm1", norm1);
  this->register_module("attn", attention);
  if (config.use_cab) {
    cab = std::make_unique<ChannelAttentionBlock<S>>(channels, config.squeeze, rng);
    this->register_module("cab", *cab);
  }
  this->register_module("norm2", norm2);
  this->register_module("mlp_in", mlp_in);
  this->register_module("mlp_out", mlp_out);
}

template <typename S>
Tensor<S> AggregatedAttention<S>::operator()(const Tensor<S>& x, const StyleVector<S>& style,
                                             AttentionTrace<S>* trace) {
  auto xn = norm1(x, style);
  auto xm = add(attention(xn, trace), x);
  if (cab) xm = add(xm, scale((*cab)(xn), alpha));
  return add(mlp_out(gelu(mlp_in(norm2(xm, style)))), xm);
}

// ---- transformer block -------------------------------------------------------

template <typename S>
TransformerBlock<S>::TransformerBlock(Index resolution, Index channels, Index out_channels, bool final,
                                      const GeneratorConfig& config, Rng& rng)
    : aam(channels, resolution, config, rng),
      match(channels, channels, 1, rng),
      fusion(config.skip_mode == SkipMode::Concat ? 2 * channels : channels, out_channels, 1, rng),
      resolution_(resolution),
      final_(final),
      skip_mode_(config.skip_mode),
      upsample_(config.upsample) {
  this->register_module("aam", aam);
  this->register_module("match", match);
  this->register_module("fusion", fusion);
}

template <typename S>
Tensor<S> TransformerBlock<S>::operator()(const Tensor<S>& x, const Tensor<S>& feature,
                                          const StyleVector<S>& style, AttentionTrace<S>* trace) {
  if (x.dim(2) != resolution_ || x.dim(3) != resolution_ || feature.dim(2) != resolution_ ||
      feature.dim(3) != resolution_) {
    throw DimensionError("transformer block at " + std::to_string(resolution_) + ": x " + to_string(x.shape()) +
                         " / feature " + to_string(feature.shape()));
  }
  auto h = aam(x, style, trace);
  auto skip = match(feature);
  h = skip_mode_ == SkipMode::Concat ? concat<S>({h, skip}, 1) : add(h, skip);
  h = fusion(h);
  if (final_) return h;
  return upsample_ == UpsampleMode::Bilinear ? upsample_bilinear(h) : upsample_nearest(h);
}

// ---- generator ---------------------------------------------------------------

template <typename S>
Generator<S>::Generator(const GeneratorConfig& config, Rng& rng)
    : encoder((config.validate(), config), rng),
      style_mlp(config.channels_at(4) * 16, config.style_dim, config.style_depth, rng),
      to_rgb(config.channels_at(config.img_size), 3, 1, rng),
      config_(config) {
  this->register_module("encoder", encoder);
  this->register_module("style", style_mlp);
  seed_ = &this->register_parameter("seed", Tensor<S>::randn({1, config.channels_at(4), 4, 4}, rng));
  const auto rungs = config.ladder();
  for (std::size_t i = 0; i < rungs.size(); ++i) {
    const bool last = i + 1 == rungs.size();
    const Index c = config.channels[i];
    const Index next = last ? c : config.channels[i + 1];
    blocks.push_back(std::make_unique<TransformerBlock<S>>(rungs[i], c, next, last, config, rng));
    this->register_module("tb" + std::to_string(rungs[i]), *blocks.back());
  }
  this->register_module("to_rgb", to_rgb);
}

template <typename S>
Tensor<S> Generator<S>::decode(const EncoderFeatures<S>& features, const StyleVector<S>& style,
                               AttentionTrace<S>* trace) {
  const Index b = style.w.dim(0);
  auto x = broadcast_to(seed_->value, {b, config_.channels_at(4), 4, 4});
  for (auto& block : blocks) x = (*block)(x, features.at(block->resolution()), style, trace);
  return tanh(to_rgb(x));
}

template <typename S>
Tensor<S> Generator<S>::operator()(const Tensor<S>& lq) {
  auto features = encoder(lq);
  return decode(features, style_mlp(features.deep_flat));
}

#define BFR_INSTANTIATE_GENERATOR(S)        \
  template struct EncoderFeatures<S>;       \
  template class Encoder<S>;                \
  template class AggregatedAttention<S>;    \
  template class TransformerBlock<S>;       \
  template class Generator<S>;
BFR_INSTANTIATE_GENERATOR(float)
BFR_INSTANTIATE_GENERATOR(double)

}  // namespace bfr
