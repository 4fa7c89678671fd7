#pragma once

#include "bfr/model.hpp"
#include "bfr/module.hpp"
#include "bfr/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace bfr {

struct LossWeights {
  double l1 = 1.0;
  double perceptual = 0.5;
  double adversarial = 0.05;
  double identity = 1.0;
  double roi = 0.1;
  double bcr = 10.0;

  /// Throws ConfigError on a negative or non-finite weight.
  void validate() const;
};

/// Fixed random conv pyramid used as a stand-in for pretrained perceptual
/// and identity networks. Parameters never train.
template <typename S>
class FrozenFeatureNet : public Module<S> {
 public:
  static constexpr std::uint64_t kPerceptualSeed = 0x9e3779b97f4a7c15ULL;
  static constexpr std::uint64_t kIdentitySeed = 0xd1b54a32d192ed03ULL;

  explicit FrozenFeatureNet(std::uint64_t seed, Index embed_dim = 128);

  /// Activations of the four stride-2 stages.
  std::vector<Tensor<S>> features(const Tensor<S>& image);
  /// Unit-length embedding [b, embed_dim] from the pooled last stage.
  Tensor<S> embed(const Tensor<S>& image);

 private:
  std::vector<std::unique_ptr<Conv2d<S>>> stages_;
  std::unique_ptr<Linear<S>> projection_;
};

template <typename S>
Tensor<S> l1_loss(const Tensor<S>& restored, const Tensor<S>& target);
/// Σ over stages of the mean absolute feature difference.
template <typename S>
Tensor<S> perceptual_loss(const Tensor<S>& restored, const Tensor<S>& target, FrozenFeatureNet<S>& net);
/// Batch mean of 1 − cos(embed(a), embed(b)).
template <typename S>
Tensor<S> identity_loss(const Tensor<S>& restored, const Tensor<S>& target, FrozenFeatureNet<S>& net);

/// Nonsaturating logistic losses from critic logits.
template <typename S>
struct AdversarialPair {
  Tensor<S> generator;      // mean softplus(−d_fake)
  Tensor<S> discriminator;  // mean softplus(−d_real) + mean softplus(d_fake)
};
template <typename S>
AdversarialPair<S> adversarial_losses(const Tensor<S>& d_real, const Tensor<S>& d_fake);
template <typename S>
Tensor<S> generator_adversarial(const Tensor<S>& d_fake);
template <typename S>
Tensor<S> discriminator_adversarial(const Tensor<S>& d_real, const Tensor<S>& d_fake);

/// Generator-side ROI term: Σ over regions of mean softplus(−logit).
template <typename S>
Tensor<S> roi_generator_loss(const std::vector<Tensor<S>>& fake_logits);

template <typename S>
using ImageFn = std::function<Tensor<S>(const Tensor<S>&)>;

/// mean (D(aug(real)) − D(real))² + mean (D(aug(fake)) − D(fake))².
/// Inputs are detached, so only the critic receives gradient.
template <typename S>
Tensor<S> bcr_penalty(const ImageFn<S>& critic, const Tensor<S>& real, const Tensor<S>& fake,
                      const ImageFn<S>& augment);

struct LossTerm {
  std::string name;
  double value = 0;   // unweighted
  double weight = 0;
  double contribution() const { return weight * value; }
};

struct LossReport {
  std::vector<LossTerm> terms;
  double total = 0;

  /// Unweighted value of a term, or NaN when absent.
  double value(const std::string& name) const;
  /// Throws NonFiniteError naming the first non-finite term.
  void check_finite() const;
};

/// Weighted sum that only evaluates terms whose weight is non-zero, so a
/// disabled term adds nothing to the graph.
template <typename S>
class WeightedSum {
 public:
  void add(const std::string& name, double weight, const std::function<Tensor<S>()>& term);
  Tensor<S> total() const;
  const LossReport& report() const { return report_; }

 private:
  std::vector<Tensor<S>> parts_;
  LossReport report_;
};

template <typename S>
struct LossResult {
  Tensor<S> total;
  LossReport report;
};

/// The fixed feature networks the losses read.
template <typename S>
struct LossNets {
  LossNets() : perceptual(FrozenFeatureNet<S>::kPerceptualSeed), identity(FrozenFeatureNet<S>::kIdentitySeed) {}
  FrozenFeatureNet<S> perceptual;
  FrozenFeatureNet<S> identity;
};

template <typename S>
struct Critics {
  WaveletDiscriminator<S>* global = nullptr;
  RoiDiscriminators<S>* roi = nullptr;
  RoiBoxes boxes;
};

/// λ_l1·L1 + λ_per·perceptual + λ_id·identity + λ_adv·adv + λ_roi·roi.
/// `augment` (optional) is applied to the restored image before the global
/// critic.
template <typename S>
LossResult<S> generator_objective(const Tensor<S>& restored, const Tensor<S>& target, Critics<S>& critics,
                                  LossNets<S>& nets, const LossWeights& weights,
                                  const ImageFn<S>& augment = {});

/// Global adversarial + ROI critics (when λ_roi > 0) + λ_bcr·bCR.
/// `fake` should already be detached from the generator.
template <typename S>
LossResult<S> discriminator_objective(const Tensor<S>& real, const Tensor<S>& fake, Critics<S>& critics,
                                      const LossWeights& weights, const ImageFn<S>& augment_real = {},
                                      const ImageFn<S>& augment_fake = {}, const ImageFn<S>& bcr_augment = {});

extern template class FrozenFeatureNet<float>;
extern template class FrozenFeatureNet<double>;
extern template class WeightedSum<float>;
extern template class WeightedSum<double>;

}  // namespace bfr
