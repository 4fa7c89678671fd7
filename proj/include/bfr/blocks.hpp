#pragma once

#include "bfr/module.hpp"
#include "bfr/tensor.hpp"

#include <vector>

namespace bfr {

/// Per-image latent consumed by every AdaIN site: w is [b, d_style].
template <typename S>
struct StyleVector {
  Tensor<S> w;
};

/// Square attention window; the shifted half uses a cyclic shift of size/2.
struct WindowSpec {
  Index size = 4;
  Index shift() const { return size / 2; }
};

/// Adaptive instance normalization: instance_norm(x)·(1 + A_s(w)) + A_b(w).
/// A_s and A_b start at zero, so a fresh block is plain instance norm.
template <typename S>
class AdaIN : public Module<S> {
 public:
  AdaIN(Index channels, Index style_dim, Rng& rng);
  Tensor<S> operator()(const Tensor<S>& x, const StyleVector<S>& style);

  /// Per-channel scale and shift for `style`, each [b, c, 1, 1].
  std::pair<Tensor<S>, Tensor<S>> modulation(const StyleVector<S>& style);

  Linear<S> to_scale;
  Linear<S> to_shift;

 private:
  Index channels_;
};

/// Maps the flattened deepest encoder feature, normalized to unit RMS, to a
/// style vector.
template <typename S>
class StyleMlp : public Module<S> {
 public:
  StyleMlp(Index in_dim, Index style_dim, Index depth, Rng& rng);
  StyleVector<S> operator()(const Tensor<S>& deep_feature);

 private:
  std::vector<std::unique_ptr<Linear<S>>> layers_;
};

/// conv3×3 → GELU → conv3×3, then a squeeze gate
/// y · sigmoid(fc2(relu(fc1(avgpool(y))))).
template <typename S>
class ChannelAttentionBlock : public Module<S> {
 public:
  ChannelAttentionBlock(Index channels, Index squeeze, Rng& rng);
  Tensor<S> operator()(const Tensor<S>& x);
  /// Gate values [b, c, 1, 1] for features y.
  Tensor<S> gate(const Tensor<S>& y);

  Conv2d<S> conv1;
  Conv2d<S> conv2;
  Conv2d<S> squeeze_fc;
  Conv2d<S> excite_fc;
};

/// Attention probabilities captured during a forward pass, one tensor per
/// head group ([windows·b, heads/2, N, N]); index 0 is the unshifted half.
template <typename S>
struct AttentionTrace {
  std::vector<Tensor<S>> weights;
};

/// Split-head window attention: the first half of the heads attends within
/// non-overlapping windows, the second half within windows cyclically
/// shifted by size/2. Learned relative position bias per head.
template <typename S>
class DoubleAttention : public Module<S> {
 public:
  DoubleAttention(Index channels, Index heads, WindowSpec window, Rng& rng);
  Tensor<S> operator()(const Tensor<S>& x, AttentionTrace<S>* trace = nullptr);

  Index heads() const { return heads_; }
  const WindowSpec& window() const { return window_; }

  Conv2d<S> qkv;
  Conv2d<S> proj;
  Parameter<S>& position_bias() { return *bias_table_; }

 private:
  Tensor<S> attend(const Tensor<S>& qkv_half, const Tensor<S>& bias, Index h, Index w,
                   AttentionTrace<S>* trace);

  Index channels_;
  Index heads_;
  WindowSpec window_;
  Parameter<S>* bias_table_;
  std::vector<Index> bias_index_;
};

#define BFR_EXTERN_BLOCKS(S)                        \
  extern template class AdaIN<S>;                   \
  extern template class StyleMlp<S>;                \
  extern template class ChannelAttentionBlock<S>;   \
  extern template class DoubleAttention<S>;
BFR_EXTERN_BLOCKS(float)
BFR_EXTERN_BLOCKS(double)
#undef BFR_EXTERN_BLOCKS

}  // namespace bfr
