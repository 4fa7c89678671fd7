#include "bfr/losses.hpp"

#include "bfr/errors.hpp"
#include "bfr/ops.hpp"

#include <cmath>
#include <limits>

namespace bfr {

void LossWeights::validate() const {
  const std::pair<const char*, double> all[] = {{"l1", l1},           {"perceptual", perceptual},
                                                {"adversarial", adversarial}, {"identity", identity},
                                                {"roi", roi},         {"bcr", bcr}};
  for (const auto& [name, w] : all) {
    if (!std::isfinite(w) || w < 0) throw ConfigError(std::string("loss weight ") + name + " must be >= 0");
  }
}

// ---- frozen feature net ------------------------------------------------------

template <typename S>
FrozenFeatureNet<S>::FrozenFeatureNet(std::uint64_t seed, Index embed_dim) {
  Rng rng(seed);
  const Index widths[] = {16, 32, 64, 128};
  Index in = 3;
  for (Index i = 0; i < 4; ++i) {
    stages_.push_back(std::make_unique<Conv2d<S>>(in, widths[i], 3, rng,
                                                  LayerOptions{.gain = std::sqrt(2.0)}, 2));
    this->register_module("stage" + std::to_string(i), *stages_.back());
    in = widths[i];
  }
  projection_ = std::make_unique<Linear<S>>(in, embed_dim, rng);
  this->register_module("projection", *projection_);
  this->set_trainable(false);
}

template <typename S>
std::vector<Tensor<S>> FrozenFeatureNet<S>::features(const Tensor<S>& image) {
  std::vector<Tensor<S>> out;
  Tensor<S> h = image;
  for (auto& stage : stages_) {
    h = leaky_relu((*stage)(h), S(0.2));
    out.push_back(h);
  }
  return out;
}

template <typename S>
Tensor<S> FrozenFeatureNet<S>::embed(const Tensor<S>& image) {
  auto last = features(image).back();
  auto pooled = reshape(avgpool_global(last), {last.dim(0), last.dim(1)});
  auto e = (*projection_)(pooled);
  auto norm = sqrt(add_scalar(sum(square(e), {1}, true), S(1e-12)));
  return div(e, norm);
}

// ---- pixel and feature losses ------------------------------------------------

namespace {
template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
}
}  // namespace

template <typename S>
Tensor<S> l1_loss(const Tensor<S>& restored, const Tensor<S>& target) {
  require_same_shape(restored, target, "l1_loss");
  return mean(abs(sub(restored, target)));
}

template <typename S>
Tensor<S> perceptual_loss(const Tensor<S>& restored, const Tensor<S>& target, FrozenFeatureNet<S>& net) {
  require_same_shape(restored, target, "perceptual_loss");
  auto fa = net.features(restored);
  auto fb = net.features(target);
  Tensor<S> total = mean(abs(sub(fa[0], fb[0])));
  for (std::size_t i = 1; i < fa.size(); ++i) total = add(total, mean(abs(sub(fa[i], fb[i]))));
  return total;
}

template <typename S>
Tensor<S> identity_loss(const Tensor<S>& restored, const Tensor<S>& target, FrozenFeatureNet<S>& net) {
  require_same_shape(restored, target, "identity_loss");
  auto cos = sum(mul(net.embed(restored), net.embed(target)), {1});
  return mean(sub(Tensor<S>::ones(cos.shape()), cos));
}

// ---- adversarial -------------------------------------------------------------

template <typename S>
Tensor<S> generator_adversarial(const Tensor<S>& d_fake) {
  return mean(softplus(neg(d_fake)));
}

template <typename S>
Tensor<S> discriminator_adversarial(const Tensor<S>& d_real, const Tensor<S>& d_fake) {
  return add(mean(softplus(neg(d_real))), mean(softplus(d_fake)));
}

template <typename S>
AdversarialPair<S> adversarial_losses(const Tensor<S>& d_real, const Tensor<S>& d_fake) {
  return {generator_adversarial(d_fake), discriminator_adversarial(d_real, d_fake)};
}

template <typename S>
Tensor<S> roi_generator_loss(const std::vector<Tensor<S>>& fake_logits) {
  if (fake_logits.empty()) return Tensor<S>::scalar(0);
  Tensor<S> total = generator_adversarial(fake_logits[0]);
  for (std::size_t i = 1; i < fake_logits.size(); ++i) total = add(total, generator_adversarial(fake_logits[i]));
  return total;
}

template <typename S>
Tensor<S> bcr_penalty(const ImageFn<S>& critic, const Tensor<S>& real, const Tensor<S>& fake,
                      const ImageFn<S>& augment) {
  auto term = [&](const Tensor<S>& x) {
    auto plain = x.detach();
    return mean(square(sub(critic(augment(plain)), critic(plain))));
  };
  return add(term(real), term(fake));
}

// ---- bookkeeping -------------------------------------------------------------

double LossReport::value(const std::string& name) const {
  for (const auto& t : terms) {
    if (t.name == name) return t.value;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

void LossReport::check_finite() const {
  for (const auto& t : terms) {
    if (!std::isfinite(t.value)) throw NonFiniteError(t.name, t.value);
  }
  if (!std::isfinite(total)) throw NonFiniteError("total", total);
}

template <typename S>
void WeightedSum<S>::add(const std::string& name, double weight, const std::function<Tensor<S>()>& term) {
  if (weight == 0) return;
  auto value = term();
  parts_.push_back(weight == 1 ? value : scale(value, static_cast<S>(weight)));
  report_.terms.push_back({name, static_cast<double>(value.item()), weight});
  report_.total += report_.terms.back().contribution();
}

template <typename S>
Tensor<S> WeightedSum<S>::total() const {
  if (parts_.empty()) return Tensor<S>::scalar(0);
  Tensor<S> out = parts_[0];
  for (std::size_t i = 1; i < parts_.size(); ++i) out = bfr::add(out, parts_[i]);
  return out;
}

// ---- objectives --------------------------------------------------------------

template <typename S>
LossResult<S> generator_objective(const Tensor<S>& restored, const Tensor<S>& target, Critics<S>& critics,
                                  LossNets<S>& nets, const LossWeights& weights, const ImageFn<S>& augment) {
  WeightedSum<S> sum;
  sum.add("l1", weights.l1, [&] { return l1_loss(restored, target); });
  sum.add("perceptual", weights.perceptual, [&] { return perceptual_loss(restored, target, nets.perceptual); });
  sum.add("identity", weights.identity, [&] { return identity_loss(restored, target, nets.identity); });
  if (critics.global) {
    sum.add("adversarial", weights.adversarial, [&] {
      return generator_adversarial((*critics.global)(augment ? augment(restored) : restored));
    });
  }
  if (critics.roi) {
    sum.add("roi", weights.roi, [&] {
      std::vector<Tensor<S>> logits;
      for (Region r : kRegions) {
        logits.push_back((*critics.roi)(r, crop_roi(restored, critics.boxes[r], critics.roi->roi_size())));
      }
      return roi_generator_loss(logits);
    });
  }
  return {sum.total(), sum.report()};
}

template <typename S>
LossResult<S> discriminator_objective(const Tensor<S>& real, const Tensor<S>& fake, Critics<S>& critics,
                                      const LossWeights& weights, const ImageFn<S>& augment_real,
                                      const ImageFn<S>& augment_fake, const ImageFn<S>& bcr_augment) {
  WeightedSum<S> sum;
  if (critics.global) {
    auto& d = *critics.global;
    sum.add("d_adversarial", 1.0, [&] {
      return discriminator_adversarial(d(augment_real ? augment_real(real) : real),
                                       d(augment_fake ? augment_fake(fake) : fake));
    });
    if (bcr_augment) {
      sum.add("bcr", weights.bcr, [&] {
        return bcr_penalty<S>([&](const Tensor<S>& x) { return d(x); }, real, fake, bcr_augment);
      });
    }
  }
  if (critics.roi && weights.roi > 0) {
    sum.add("d_roi", 1.0, [&] {
      Tensor<S> total;
      for (Region r : kRegions) {
        const Index size = critics.roi->roi_size();
        auto term = discriminator_adversarial((*critics.roi)(r, crop_roi(real, critics.boxes[r], size)),
                                              (*critics.roi)(r, crop_roi(fake, critics.boxes[r], size)));
        total = total.defined() ? add(total, term) : term;
      }
      return total;
    });
  }
  return {sum.total(), sum.report()};
}

#define BFR_INSTANTIATE_LOSSES(S)                                                                            \
  template class FrozenFeatureNet<S>;                                                                        \
  template class WeightedSum<S>;                                                                             \
  template Tensor<S> l1_loss(const Tensor<S>&, const Tensor<S>&);                                            \
  template Tensor<S> perceptual_loss(const Tensor<S>&, const Tensor<S>&, FrozenFeatureNet<S>&);              \
  template Tensor<S> identity_loss(const Tensor<S>&, const Tensor<S>&, FrozenFeatureNet<S>&);                \
  template Tensor<S> generator_adversarial(const Tensor<S>&);                                                \
  template Tensor<S> discriminator_adversarial(const Tensor<S>&, const Tensor<S>&);                          \
  template AdversarialPair<S> adversarial_losses(const Tensor<S>&, const Tensor<S>&);                        \
  template Tensor<S> roi_generator_loss(const std::vector<Tensor<S>>&);                                       \
  template Tensor<S> bcr_penalty(const ImageFn<S>&, const Tensor<S>&, const Tensor<S>&, const ImageFn<S>&); \
  template LossResult<S> generator_objective(const Tensor<S>&, const Tensor<S>&, Critics<S>&, LossNets<S>&,  \
                                             const LossWeights&, const ImageFn<S>&);                         \
  template LossResult<S> discriminator_objective(const Tensor<S>&, const Tensor<S>&, Critics<S>&,            \
                                                 const LossWeights&, const ImageFn<S>&, const ImageFn<S>&,   \
                                                 const ImageFn<S>&);
BFR_INSTANTIATE_LOSSES(float)
BFR_INSTANTIATE_LOSSES(double)

}  // namespace bfr
