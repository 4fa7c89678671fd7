#pragma once

#include "bfr/losses.hpp"
#include "bfr/model.hpp"
#include "bfr/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace bfr {

// ---- degradation -------------------------------------------------------------

struct Range {
  double lo = 0, hi = 0;
};

struct DegradationParams {
  Range blur_sigma{0.2, 3.0};
  Range downscale{1, 4};
  Range noise_sigma{0, 0.1};  // on the [-1, 1] pixel scale
  Range quality{30, 90};      // block-DCT quality, 100 = lossless

  /// Every range collapsed onto the value that leaves an image untouched.
  static DegradationParams identity();
  /// Throws ConfigError for unordered or out-of-domain ranges.
  void validate() const;
};

/// One draw from DegradationParams.
struct DegradationSample {
  double blur_sigma = 0;
  double scale = 1;
  double noise_sigma = 0;
  double quality = 100;
};

DegradationSample sample_degradation(const DegradationParams& params, Rng& rng);

/// Separable Gaussian blur of the last two axes; half-sample symmetric
/// borders so the kernel preserves the mean. sigma <= 0 is the identity.
template <typename S>
Tensor<S> gaussian_blur(const Tensor<S>& x, double sigma);
/// Area-average to round(s / factor) pixels.
template <typename S>
Tensor<S> area_downscale(const Tensor<S>& x, double factor);
/// Area downscale by `factor` then bilinear upscale to the original size.
template <typename S>
Tensor<S> box_downscale_upscale(const Tensor<S>& x, double factor);
template <typename S>
Tensor<S> add_gaussian_noise(const Tensor<S>& x, double sigma, Rng& rng);
/// 8x8 block DCT with a quality-scaled JPEG luminance quantizer, then the
/// inverse transform. Edge blocks are padded by replication.
template <typename S>
Tensor<S> dct_compress(const Tensor<S>& x, double quality);

/// blur → downscale → noise → compress → upscale back, clamped to [-1, 1].
/// Accepts [c,h,w] or [b,c,h,w]; no gradient.
template <typename S>
Tensor<S> degrade(const Tensor<S>& hq, const DegradationSample& sample, Rng& rng);
template <typename S>
Tensor<S> degrade(const Tensor<S>& hq, const DegradationParams& params, Rng& rng);

// ---- differentiable augmentation ---------------------------------------------

struct AugPolicy {
  bool flip = true;
  bool color = true;
  bool translation = true;
  bool cutout = true;
  double translation_ratio = 0.125;  // max shift / extent
  double cutout_ratio = 0.5;         // square side / extent
  double color_strength = 0.5;       // max brightness shift, saturation and contrast jitter

  static AugPolicy none() { return {false, false, false, false}; }
  bool empty() const { return !flip && !color && !translation && !cutout; }
  void validate() const;
};

/// Sampled per-sample transform parameters; replaying a token reproduces the
/// transform exactly.
struct AugToken {
  struct Sample {
    bool flip = false;
    double brightness = 0;
    double saturation = 1;
    double contrast = 1;
    Index dy = 0, dx = 0;
    Index cut_y = 0, cut_x = 0, cut_size = 0;
  };
  AugPolicy policy;
  Index height = 0, width = 0;
  std::vector<Sample> samples;
};

AugToken sample_augmentation(const AugPolicy& policy, Index batch, Index height, Index width, Rng& rng);
/// Applies `token` to x [b,c,h,w]; differentiable in x.
template <typename S>
Tensor<S> apply_augmentation(const Tensor<S>& x, const AugToken& token);
template <typename S>
Tensor<S> diff_augment(const Tensor<S>& x, const AugPolicy& policy, Rng& rng);

// ---- images ------------------------------------------------------------------

struct ImageRecord {
  std::string id;
  Tensor<float> hq;                 // [3, s, s] in [-1, 1]
  std::optional<Tensor<float>> lq;  // same shape when present
  std::optional<RoiBoxes> boxes;
};

/// Pixels [3,h,w] from 8-bit RGB PPM (P6) bytes.
Tensor<float> decode_ppm(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_ppm(const Tensor<float>& pixels);
Tensor<float> decode_png(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_png(const Tensor<float>& pixels);

/// Reads .ppm or .png (by content); throws ParseError for malformed files and
/// ValidationError for non-square or non-power-of-two images.
ImageRecord load_image(const std::filesystem::path& path);
/// Writes PNG or PPM by extension.
void save_image(const Tensor<float>& pixels, const std::filesystem::path& path);
void save_image(const ImageRecord& record, const std::filesystem::path& path);

/// u8 value for a pixel in [-1, 1] (clamped, rounded).
std::uint8_t to_u8(float v);
inline float from_u8(std::uint8_t v) { return static_cast<float>(v) / 127.5f - 1.f; }

// ---- metrics -----------------------------------------------------------------

inline constexpr double kPsnrCap = 99.0;

/// PSNR in dB on the [0, 1] rescaling of [-1, 1] images, capped at 99.
template <typename S>
double psnr(const Tensor<S>& a, const Tensor<S>& b);
/// Mean SSIM over channels with an 11-tap, σ = 1.5 Gaussian window.
template <typename S>
double ssim(const Tensor<S>& a, const Tensor<S>& b);
/// Fréchet distance between Gaussian fits of row embeddings [n, d].
double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);
/// Fréchet distance between embeddings of two image sets ([n,3,s,s] each).
double feature_frechet(const Tensor<float>& set_a, const Tensor<float>& set_b, FrozenFeatureNet<float>& net);

// ---- datasets ----------------------------------------------------------------

struct Dataset {
  std::vector<ImageRecord> records;
  std::optional<RoiBoxes> boxes;  // from roi_boxes.cfg

  Index size() const { return static_cast<Index>(records.size()); }
  Index image_size() const { return records.empty() ? 0 : records.front().hq.dim(1); }
  bool has_lq() const;
  RoiBoxes roi_boxes() const { return boxes.value_or(RoiBoxes{}); }
};

/// "region x0 y0 x1 y1" lines, '#' comments; unspecified regions keep defaults.
RoiBoxes parse_roi_boxes(const std::string& text);
std::string format_roi_boxes(const RoiBoxes& boxes);

/// <root>/hq/*.png|ppm, optional <root>/lq/ with matching stems, optional
/// <root>/roi_boxes.cfg. Records are sorted by id.
Dataset load_dataset(const std::filesystem::path& root);
/// Writes hq/ (and lq/ when present) as PNG plus roi_boxes.cfg when set.
void save_dataset(const Dataset& data, const std::filesystem::path& root);

/// Fills every record's lq with degrade(hq); record i draws from its own
/// stream seeded by (seed, i), so the result does not depend on order.
void synthesize_lq(Dataset& data, const DegradationParams& params, std::uint64_t seed);
Rng stream_rng(std::uint64_t seed, std::uint64_t stream);

/// Procedural face-like images (head, eyes, brows, nose, mouth) with seeded
/// variation; features sit inside the default ROI boxes.
Dataset synthetic_faces(Index count, Index size, std::uint64_t seed);

/// Stacks hq (or lq) of the chosen records into [b,3,s,s].
Tensor<float> stack_images(const Dataset& data, const std::vector<Index>& indices, bool lq);

}  // namespace bfr
