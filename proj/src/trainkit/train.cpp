#include "bfr/errors.hpp"
#include "bfr/ops.hpp"
#include "bfr/trainkit.hpp"

#include <cstdio>
#include <numeric>

namespace bfr {

namespace {

template <typename M>
void prefix(std::vector<std::pair<std::string, Parameter<float>*>>& out, const std::string& p, M& module) {
  for (auto& [name, param] : module.named_parameters()) out.emplace_back(p + name, param);
}

void set_critics(TrainState& s, bool train) {
  s.discriminator.set_trainable(train);
  s.discriminator.set_spectral_update(train);
  s.roi.set_trainable(train);
  s.roi.set_spectral_update(train);
}

}  // namespace

TrainState::TrainState(const RunConfig& cfg)
    : init_(cfg.seed),
      config(cfg),
      weights(cfg.effective_weights()),
      generator(cfg.effective_generator(), init_),
      discriminator(cfg.generator.img_size, init_),
      roi(cfg.roi_size, cfg.share_eyes, init_),
      g_opt(generator_parameters(), cfg.adam),
      d_opt(critic_parameters(), cfg.adam),
      rng(stream_rng(cfg.seed, 1)) {
  config.validate();
}

std::vector<std::pair<std::string, Parameter<float>*>> TrainState::critic_parameters() {
  std::vector<std::pair<std::string, Parameter<float>*>> out;
  prefix(out, "d.", discriminator);
  prefix(out, "roi.", roi);
  return out;
}

std::vector<std::pair<std::string, Parameter<float>*>> TrainState::generator_parameters() {
  std::vector<std::pair<std::string, Parameter<float>*>> out;
  prefix(out, "g.", generator);
  return out;
}

std::string StepReport::summary() const {
  std::string out = "step=" + std::to_string(step);
  char buf[64];
  for (const auto* r : {&discriminator, &generator}) {
    for (const auto& t : r->terms) {
      std::snprintf(buf, sizeof buf, " %s=%.5g", t.name.c_str(), t.value);
      out += buf;
    }
  }
  return out;
}

namespace {

void check_batch(const TrainState& s, const Tensor<float>& lq, const Tensor<float>& hq) {
  const Index size = s.config.generator.img_size;
  if (lq.shape() != hq.shape() || lq.ndim() != 4 || lq.dim(1) != 3 || lq.dim(2) != size || lq.dim(3) != size) {
    throw DimensionError("train_step: expected lq and hq of shape [b,3," + std::to_string(size) + "," +
                         std::to_string(size) + "], got " + to_string(lq.shape()) + " and " + to_string(hq.shape()));
  }
}

Critics<float> critics_of(TrainState& s) {
  return {&s.discriminator, s.weights.roi > 0 ? &s.roi : nullptr, s.boxes};
}

// Full policy for bCR; the same policy gated by the DA toggle for the
// adversarial terms.
std::pair<ImageFn<float>, ImageFn<float>> augmenters(TrainState& s) {
  const AugPolicy policy = s.config.aug;
  ImageFn<float> augment;
  if (!policy.empty()) augment = [&s, policy](const Tensor<float>& x) { return diff_augment(x, policy, s.rng); };
  return {augment, s.config.use_aug ? augment : ImageFn<float>{}};
}

}  // namespace

LossReport discriminator_step(TrainState& s, const Tensor<float>& lq, const Tensor<float>& hq) {
  check_batch(s, lq, hq);
  Tensor<float> fake;
  {
    NoGradGuard guard;
    fake = s.generator(lq);
  }
  auto critics = critics_of(s);
  const auto [bcr_augment, augment] = augmenters(s);
  set_critics(s, true);
  // Forward advances power iteration; keep the prior state for a rejected step.
  std::vector<std::pair<Parameter<float>*, SpectralState<float>>> sn;
  for (auto& [name, p] : s.critic_parameters()) {
    p->value.zero_grad();
    if (p->spectral) sn.emplace_back(p, *p->spectral);
  }
  auto d = discriminator_objective(hq, fake, critics, s.weights, augment, augment, bcr_augment);
  try {
    d.report.check_finite();
  } catch (...) {
    for (auto& [p, state] : sn) p->spectral = state;
    throw;
  }
  d.total.backward();
  s.d_opt.step();
  return d.report;
}

LossReport generator_step(TrainState& s, const Tensor<float>& lq, const Tensor<float>& hq) {
  check_batch(s, lq, hq);
  auto critics = critics_of(s);
  const auto augment = augmenters(s).second;
  set_critics(s, false);
  try {
    s.generator.zero_grad();
    auto g = generator_objective(s.generator(lq), hq, critics, s.nets, s.weights, augment);
    g.report.check_finite();
    g.total.backward();
    s.g_opt.step();
    set_critics(s, true);
    return g.report;
  } catch (...) {
    set_critics(s, true);
    throw;
  }
}

StepReport train_step(TrainState& s, const Tensor<float>& lq, const Tensor<float>& hq) {
  StepReport report;
  report.discriminator = discriminator_step(s, lq, hq);
  report.generator = generator_step(s, lq, hq);
  report.step = ++s.step;
  return report;
}

std::vector<Index> sample_batch(TrainState& s, Index dataset_size) {
  if (dataset_size < 1) throw ContractError("sample_batch: empty dataset");
  const Index b = s.config.batch_size;
  std::vector<Index> out;
  if (dataset_size >= b) {
    std::vector<Index> order(static_cast<std::size_t>(dataset_size));
    std::iota(order.begin(), order.end(), 0);
    for (Index i = 0; i < b; ++i) {
      const Index j = std::uniform_int_distribution<Index>(i, dataset_size - 1)(s.rng);
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
      out.push_back(order[static_cast<std::size_t>(i)]);
    }
  } else {
    for (Index i = 0; i < b; ++i) out.push_back(std::uniform_int_distribution<Index>(0, dataset_size - 1)(s.rng));
  }
  return out;
}

void train(TrainState& s, const Dataset& data, std::int64_t until, const std::function<void(const StepReport&)>& on_step) {
  if (!data.has_lq()) throw ContractError("train: dataset has no lq images");
  if (data.image_size() != s.config.generator.img_size) {
    throw ValidationError("train: dataset images are " + std::to_string(data.image_size()) + " px, config expects " +
                          std::to_string(s.config.generator.img_size));
  }
  while (s.step < until) {
    const auto idx = sample_batch(s, data.size());
    const auto report = train_step(s, stack_images(data, idx, true), stack_images(data, idx, false));
    if (on_step) on_step(report);
  }
}

Tensor<float> restore(Generator<float>& generator, const Tensor<float>& lq, Index chunk) {
  NoGradGuard guard;
  const Index n = lq.dim(0);
  if (n <= chunk) return generator(lq).detach();
  std::vector<Tensor<float>> parts;
  for (Index i = 0; i < n; i += chunk) parts.push_back(generator(slice(lq, 0, i, std::min(chunk, n - i))));
  return concat(parts, 0).detach();
}

}  // namespace bfr
