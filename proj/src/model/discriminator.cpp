#include "bfr/errors.hpp"
#include "bfr/model.hpp"
#include "bfr/ops.hpp"
#include "bfr/wavelet.hpp"

#include <algorithm>
#include <cmath>

namespace bfr {

namespace {
const LayerOptions kSpectral{.spectral = true};
const LayerOptions kSpectralRelu{.spectral = true, .gain = std::sqrt(2.0)};
}  // namespace

Index discriminator_channels(Index resolution) {
  if (resolution >= 32) return 32;
  if (resolution == 16) return 64;
  return 128;
}

// ---- wavelet discriminator ---------------------------------------------------

template <typename S>
WaveletDiscriminator<S>::WaveletDiscriminator(Index img_size, Rng& rng) : img_size_(img_size) {
  if (img_size < 8 || (img_size & (img_size - 1)) != 0) {
    throw ConfigError("discriminator img_size must be a power of two >= 8");
  }
  Index in = 3;
  for (Index r = img_size; r > 4; r /= 2) {
    const Index out = discriminator_channels(r / 2);
    Stage stage;
    stage.merge = std::make_unique<Conv2d<S>>(4 * in, out, 1, rng, kSpectral);
    stage.conv = std::make_unique<Conv2d<S>>(out, out, 3, rng, kSpectralRelu);
    this->register_module("merge" + std::to_string(r / 2), *stage.merge);
    this->register_module("conv" + std::to_string(r / 2), *stage.conv);
    stages.push_back(std::move(stage));
    in = out;
  }
  head = std::make_unique<Linear<S>>(in * 16, 1, rng, kSpectral);
  this->register_module("head", *head);
}

template <typename S>
Tensor<S> WaveletDiscriminator<S>::operator()(const Tensor<S>& image) {
  if (image.ndim() != 4 || image.dim(1) != 3 || image.dim(2) != img_size_ || image.dim(3) != img_size_) {
    throw DimensionError("discriminator expects [b,3," + std::to_string(img_size_) + "," +
                         std::to_string(img_size_) + "], got " + to_string(image.shape()));
  }
  Tensor<S> h = image;
  for (auto& stage : stages) h = leaky_relu((*stage.conv)((*stage.merge)(dwt2_packed(h))), S(0.2));
  return (*head)(reshape(h, {h.dim(0), h.numel() / h.dim(0)}));
}

// ---- regions -----------------------------------------------------------------

std::string region_name(Region r) {
  switch (r) {
    case Region::LeftEye: return "left_eye";
    case Region::RightEye: return "right_eye";
    case Region::Mouth: return "mouth";
  }
  return "?";
}

Region parse_region(const std::string& name) {
  for (Region r : kRegions) {
    if (region_name(r) == name) return r;
  }
  throw ConfigError("unknown region '" + name + "'");
}

const Box& RoiBoxes::operator[](Region r) const {
  switch (r) {
    case Region::LeftEye: return left_eye;
    case Region::RightEye: return right_eye;
    default: return mouth;
  }
}

Box& RoiBoxes::operator[](Region r) {
  return const_cast<Box&>(static_cast<const RoiBoxes&>(*this)[r]);
}

void RoiBoxes::validate() const {
  for (Region r : kRegions) {
    const Box& b = (*this)[r];
    const bool inside = b.x0 >= 0 && b.y0 >= 0 && b.x1 <= 1 && b.y1 <= 1;
    if (!inside || !(b.x1 > b.x0) || !(b.y1 > b.y0)) {
      throw ConfigError("degenerate box for " + region_name(r));
    }
  }
}

template <typename S>
Tensor<S> crop_roi(const Tensor<S>& image, const Box& box, Index size) {
  const Index h = image.dim(2), w = image.dim(3);
  auto lo = [](double f, Index n) { return std::clamp<Index>(Index(std::floor(f * n + 1e-9)), 0, n); };
  auto hi = [](double f, Index n) { return std::clamp<Index>(Index(std::ceil(f * n - 1e-9)), 0, n); };
  const Index x0 = lo(box.x0, w), x1 = hi(box.x1, w), y0 = lo(box.y0, h), y1 = hi(box.y1, h);
  if (x1 <= x0 || y1 <= y0) throw ConfigError("box covers no pixels");
  auto crop = slice(slice(image, 2, y0, y1 - y0), 3, x0, x1 - x0);
  return resize_bilinear(crop, size, size);
}

// ---- ROI discriminators ------------------------------------------------------

template <typename S>
RoiDiscriminator<S>::RoiDiscriminator(Index roi_size, Rng& rng)
    : conv1(3, 32, 3, rng, kSpectralRelu),
      conv2(32, 64, 3, rng, kSpectralRelu, 2),
      conv3(64, 64, 3, rng, kSpectralRelu, 2),
      head(64 * (roi_size / 4) * (roi_size / 4), 1, rng, kSpectral),
      roi_size_(roi_size) {
  if (roi_size < 4 || roi_size % 4 != 0) throw ConfigError("roi size must be a positive multiple of 4");
  this->register_module("conv1", conv1);
  this->register_module("conv2", conv2);
  this->register_module("conv3", conv3);
  this->register_module("head", head);
}

template <typename S>
Tensor<S> RoiDiscriminator<S>::operator()(const Tensor<S>& crop) {
  if (crop.ndim() != 4 || crop.dim(1) != 3 || crop.dim(2) != roi_size_ || crop.dim(3) != roi_size_) {
    throw DimensionError("roi discriminator expects [b,3," + std::to_string(roi_size_) + "," +
                         std::to_string(roi_size_) + "], got " + to_string(crop.shape()));
  }
  auto h = leaky_relu(conv1(crop), S(0.2));
  h = leaky_relu(conv2(h), S(0.2));
  h = leaky_relu(conv3(h), S(0.2));
  return head(reshape(h, {h.dim(0), h.numel() / h.dim(0)}));
}

template <typename S>
RoiDiscriminators<S>::RoiDiscriminators(Index roi_size, bool share_eye_weights, Rng& rng)
    : roi_size_(roi_size) {
  left_eye_ = std::make_unique<RoiDiscriminator<S>>(roi_size, rng);
  this->register_module("left_eye", *left_eye_);
  if (!share_eye_weights) {
    right_eye_ = std::make_unique<RoiDiscriminator<S>>(roi_size, rng);
    this->register_module("right_eye", *right_eye_);
  }
  mouth_ = std::make_unique<RoiDiscriminator<S>>(roi_size, rng);
  this->register_module("mouth", *mouth_);
}

template <typename S>
RoiDiscriminator<S>& RoiDiscriminators<S>::operator[](Region r) {
  switch (r) {
    case Region::LeftEye: return *left_eye_;
    case Region::RightEye: return right_eye_ ? *right_eye_ : *left_eye_;
    default: return *mouth_;
  }
}

#define BFR_INSTANTIATE_DISC(S)                                            \
  template class WaveletDiscriminator<S>;                                  \
  template class RoiDiscriminator<S>;                                      \
  template class RoiDiscriminators<S>;                                     \
  template Tensor<S> crop_roi(const Tensor<S>&, const Box&, Index);
BFR_INSTANTIATE_DISC(float)
BFR_INSTANTIATE_DISC(double)

}  // namespace bfr
