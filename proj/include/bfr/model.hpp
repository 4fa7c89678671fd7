#pragma once

#include "bfr/blocks.hpp"
#include "bfr/module.hpp"
#include "bfr/tensor.hpp"

#include <array>
#include <memory>
#include <string>
#include <vector>

namespace bfr {

enum class SkipMode { Concat, Add };
enum class UpsampleMode { Bilinear, Nearest };

struct GeneratorConfig {
  Index img_size = 64;
  // Channel width per ladder level, ascending from 4x4.
  std::vector<Index> channels{128, 128, 64, 64, 32};
  Index style_dim = 128;
  Index style_depth = 4;
  Index heads = 4;
  Index window = 4;
  Index squeeze = 4;
  Index mlp_ratio = 4;
  double cab_alpha = 0.01;
  bool use_cab = true;
  SkipMode skip_mode = SkipMode::Concat;
  UpsampleMode upsample = UpsampleMode::Bilinear;

  /// Default configuration for a power-of-two image size.
  static GeneratorConfig for_size(Index img_size);

  /// Resolutions 4, 8, ..., img_size.
  std::vector<Index> ladder() const;
  Index channels_at(Index resolution) const;
  /// Throws ConfigError on an inconsistent configuration.
  void validate() const;
};

template <typename S>
struct EncoderFeatures {
  std::vector<Tensor<S>> pyramid;  // shallow (img_size) to deep (4x4)
  Tensor<S> deep_flat;             // [b, c4·16]

  /// Pyramid entry whose spatial extent is `resolution`.
  const Tensor<S>& at(Index resolution) const;
};

template <typename S>
class Encoder : public Module<S> {
 public:
  Encoder(const GeneratorConfig& config, Rng& rng);
  EncoderFeatures<S> operator()(const Tensor<S>& lq);

  Conv2d<S> from_rgb;
  std::vector<std::unique_ptr<Conv2d<S>>> downs;

 private:
  GeneratorConfig config_;
};

/// Aggregated attention: style-normalized double attention with an α-scaled
/// channel attention branch, then a style-normalized token MLP, both residual.
template <typename S>
class AggregatedAttention : public Module<S> {
 public:
  AggregatedAttention(Index channels, Index resolution, const GeneratorConfig& config, Rng& rng);
  Tensor<S> operator()(const Tensor<S>& x, const StyleVector<S>& style, AttentionTrace<S>* trace = nullptr);

  AdaIN<S> norm1;
  DoubleAttention<S> attention;
  std::unique_ptr<ChannelAttentionBlock<S>> cab;  // null when disabled
  AdaIN<S> norm2;
  Conv2d<S> mlp_in;
  Conv2d<S> mlp_out;
  S alpha;
};

/// One ladder level: aam, skip merge with the encoder feature, fusion to the
/// next level's width, ×2 upsample (none at the last level).
template <typename S>
class TransformerBlock : public Module<S> {
 public:
  TransformerBlock(Index resolution, Index channels, Index out_channels, bool final,
                   const GeneratorConfig& config, Rng& rng);
  Tensor<S> operator()(const Tensor<S>& x, const Tensor<S>& feature, const StyleVector<S>& style,
                       AttentionTrace<S>* trace = nullptr);

  Index resolution() const { return resolution_; }
  bool final() const { return final_; }

  AggregatedAttention<S> aam;
  Conv2d<S> match;
  Conv2d<S> fusion;

 private:
  Index resolution_;
  bool final_;
  SkipMode skip_mode_;
  UpsampleMode upsample_;
};

template <typename S>
class Generator : public Module<S> {
 public:
  Generator(const GeneratorConfig& config, Rng& rng);

  /// Restored image in [-1, 1], same shape as `lq`.
  Tensor<S> operator()(const Tensor<S>& lq);
  Tensor<S> decode(const EncoderFeatures<S>& features, const StyleVector<S>& style,
                   AttentionTrace<S>* trace = nullptr);

  const GeneratorConfig& config() const { return config_; }

  Encoder<S> encoder;
  StyleMlp<S> style_mlp;
  std::vector<std::unique_ptr<TransformerBlock<S>>> blocks;  // ascending resolution
  Conv2d<S> to_rgb;
  Parameter<S>& seed() { return *seed_; }

 private:
  GeneratorConfig config_;
  Parameter<S>* seed_;
};

/// Channel width of discriminator features at a resolution.
Index discriminator_channels(Index resolution);

/// Haar-domain critic: each stage splits the current map into subbands,
/// merges them with a 1x1 conv, then conv3x3 + leaky_relu, halving the
/// extent down to 4x4. All weights spectrally normalized.
template <typename S>
class WaveletDiscriminator : public Module<S> {
 public:
  WaveletDiscriminator(Index img_size, Rng& rng);
  Tensor<S> operator()(const Tensor<S>& image);  // [b, 1]

  struct Stage {
    std::unique_ptr<Conv2d<S>> merge;
    std::unique_ptr<Conv2d<S>> conv;
  };
  std::vector<Stage> stages;
  std::unique_ptr<Linear<S>> head;

 private:
  Index img_size_;
};

enum class Region { LeftEye, RightEye, Mouth };
inline constexpr std::array<Region, 3> kRegions{Region::LeftEye, Region::RightEye, Region::Mouth};
std::string region_name(Region r);
/// Inverse of region_name; throws ConfigError.
Region parse_region(const std::string& name);

/// Fractional box, x to the right and y downward, both in [0, 1].
struct Box {
  double x0 = 0, y0 = 0, x1 = 1, y1 = 1;
};

struct RoiBoxes {
  Box left_eye{0.18, 0.30, 0.46, 0.48};
  Box right_eye{0.54, 0.30, 0.82, 0.48};
  Box mouth{0.30, 0.62, 0.70, 0.80};

  const Box& operator[](Region r) const;
  Box& operator[](Region r);
  /// Throws ConfigError for boxes that are empty or leave the unit square.
  void validate() const;
};

/// Integer pixel crop covering `box` (outward rounding), resized to size².
template <typename S>
Tensor<S> crop_roi(const Tensor<S>& image, const Box& box, Index size = 16);

template <typename S>
class RoiDiscriminator : public Module<S> {
 public:
  RoiDiscriminator(Index roi_size, Rng& rng);
  Tensor<S> operator()(const Tensor<S>& crop);  // [b, 1]

  Conv2d<S> conv1;
  Conv2d<S> conv2;
  Conv2d<S> conv3;
  Linear<S> head;

 private:
  Index roi_size_;
};

/// Critics for the three facial regions; with shared eye weights both eyes
/// use the left-eye critic.
template <typename S>
class RoiDiscriminators : public Module<S> {
 public:
  RoiDiscriminators(Index roi_size, bool share_eye_weights, Rng& rng);
  RoiDiscriminator<S>& operator[](Region r);
  Tensor<S> operator()(Region r, const Tensor<S>& crop) { return (*this)[r](crop); }
  Index roi_size() const { return roi_size_; }
  bool shares_eye_weights() const { return !right_eye_; }

 private:
  Index roi_size_;
  std::unique_ptr<RoiDiscriminator<S>> left_eye_;
  std::unique_ptr<RoiDiscriminator<S>> right_eye_;
  std::unique_ptr<RoiDiscriminator<S>> mouth_;
};

#define BFR_EXTERN_MODEL(S)                          \
  extern template struct EncoderFeatures<S>;         \
  extern template class Encoder<S>;                  \
  extern template class AggregatedAttention<S>;      \
  extern template class TransformerBlock<S>;         \
  extern template class Generator<S>;                \
  extern template class WaveletDiscriminator<S>;     \
  extern template class RoiDiscriminator<S>;         \
  extern template class RoiDiscriminators<S>;
BFR_EXTERN_MODEL(float)
BFR_EXTERN_MODEL(double)
#undef BFR_EXTERN_MODEL

}  // namespace bfr
