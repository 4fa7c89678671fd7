#include "bfr/diagnostics.hpp"

#include "bfr/blocks.hpp"
#include "bfr/errors.hpp"
#include "bfr/losses.hpp"
#include "bfr/model.hpp"
#include "bfr/ops.hpp"
#include "bfr/pipeline.hpp"
#include "bfr/trainkit.hpp"
#include "bfr/wavelet.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace bfr {

namespace {

using T = Tensor<double>;

constexpr double kOpTolerance = 1e-6;
constexpr double kBlockTolerance = 1e-5;

template <typename M>
void jitter(M& module, Rng& rng, double scale) {
  for (auto& [name, p] : module.named_parameters()) {
    p->value.mutable_values() += T::randn(p->value.shape(), rng, scale).values();
  }
}

template <typename M>
std::vector<T> parameters_of(M& module) {
  std::vector<T> out;
  for (auto& [name, p] : module.named_parameters()) out.push_back(p->value);
  return out;
}

// Builds cases that share one seeded generator.
class CaseBuilder {
 public:
  CaseBuilder(std::string module, std::uint64_t seed, std::vector<GradCase>& out)
      : module_(std::move(module)), rng_(seed * 7919 + 17), out_(out) {}

  Rng& rng() { return rng_; }
  T randn(const Shape& shape) { return T::randn(shape, rng_); }
  T uniform(const Shape& shape) { return T::uniform(shape, rng_, -1.0, 1.0); }

  /// sum(f(x)·r) for a fixed random projection r.
  void projected(const std::string& name, double tol, const std::function<T()>& f, std::vector<T> leaves,
                 std::vector<T> sampled = {}, std::shared_ptr<void> owner = nullptr) {
    T r;
    {
      NoGradGuard guard;
      r = randn(f().shape());
    }
    add(name, tol, [f, r] { return sum(mul(f(), r)); }, std::move(leaves), std::move(sampled), std::move(owner));
  }

  void add(const std::string& name, double tol, std::function<T()> loss, std::vector<T> leaves,
           std::vector<T> sampled = {}, std::shared_ptr<void> owner = nullptr) {
    out_.push_back({module_, name, std::move(loss), std::move(leaves), std::move(sampled), tol, std::move(owner)});
  }

  template <typename M, typename... Args>
  std::shared_ptr<M> make(Args&&... args) {
    return std::make_shared<M>(std::forward<Args>(args)..., rng_);
  }

 private:
  std::string module_;
  Rng rng_;
  std::vector<GradCase>& out_;
};

void op_cases(CaseBuilder& b) {
  using Unary = std::function<T(const T&)>;
  const std::vector<std::pair<std::string, Unary>> unary = {
      {"neg", [](const T& x) { return neg(x); }},
      {"scale", [](const T& x) { return scale(x, 1.7); }},
      {"add_scalar", [](const T& x) { return add_scalar(x, 0.3); }},
      {"gelu", [](const T& x) { return gelu(x); }},
      {"leaky_relu", [](const T& x) { return leaky_relu(x); }},
      {"relu", [](const T& x) { return relu(x); }},
      {"sigmoid", [](const T& x) { return sigmoid(x); }},
      {"tanh", [](const T& x) { return bfr::tanh(x); }},
      {"softplus", [](const T& x) { return softplus(x); }},
      {"abs", [](const T& x) { return bfr::abs(x); }},
      {"square", [](const T& x) { return square(x); }},
      {"sqrt", [](const T& x) { return bfr::sqrt(add_scalar(x, 2.0)); }},
      {"exp", [](const T& x) { return bfr::exp(x); }},
      {"log", [](const T& x) { return bfr::log(add_scalar(x, 2.0)); }},
      {"sum", [](const T& x) { return sum(x, {0, 3}); }},
      {"sum_all", [](const T& x) { return sum(x); }},
      {"mean", [](const T& x) { return mean(x, {1}, true); }},
      {"mean_all", [](const T& x) { return mean(x); }},
      {"reshape", [](const T& x) { return reshape(x, {4, 16}); }},
      {"permute", [](const T& x) { return permute(x, {2, 0, 3, 1}); }},
      {"transpose", [](const T& x) { return transpose(x, 1, 3); }},
      {"broadcast_to", [](const T& x) { return broadcast_to(slice(x, 1, 0, 1), {2, 3, 4, 4}); }},
      {"slice", [](const T& x) { return slice(x, 2, 1, 2); }},
      {"roll", [](const T& x) { return roll(x, 2, 3); }},
      {"flip", [](const T& x) { return flip(x, 3); }},
      {"take_last", [](const T& x) { return take_last(x, {3, 0, 0, 2}); }},
      {"softmax", [](const T& x) { return softmax(x, 2); }},
      {"resize_bilinear", [](const T& x) { return resize_bilinear(x, 3, 7); }},
      {"upsample_bilinear", [](const T& x) { return upsample_bilinear(x); }},
      {"upsample_nearest", [](const T& x) { return upsample_nearest(x); }},
      {"avgpool_global", [](const T& x) { return avgpool_global(x); }},
      {"instance_norm", [](const T& x) { return instance_norm(x); }},
      {"translate", [](const T& x) { return translate(x, {{1, -2}, {0, 3}}); }},
  };
  for (const auto& [name, op] : unary) {
    T x = b.randn({2, 2, 4, 4});
    b.projected(name, kOpTolerance, [op, x] { return op(x); }, {x});
  }

  using Binary = std::function<T(const T&, const T&)>;
  const std::vector<std::pair<std::string, Binary>> binary = {
      {"add", [](const T& a, const T& c) { return add(a, c); }},
      {"sub", [](const T& a, const T& c) { return sub(a, c); }},
      {"mul", [](const T& a, const T& c) { return mul(a, c); }},
      {"div", [](const T& a, const T& c) { return div(a, add_scalar(square(c), 1.0)); }},
      {"concat", [](const T& a, const T& c) { return concat<double>({a, broadcast_to(c, a.shape())}, 1); }},
  };
  for (const auto& [name, op] : binary) {
    T a = b.randn({2, 3, 4}), c = b.randn({3, 1});
    b.projected(name, kOpTolerance, [op, a, c] { return op(a, c); }, {a, c});
  }

  T ma = b.randn({2, 3, 4}), mb = b.randn({4, 5});
  b.projected("matmul", kOpTolerance, [ma, mb] { return matmul(ma, mb); }, {ma, mb});
  T x = b.randn({2, 3, 5, 5}), k = b.randn({4, 3, 3, 3}), bias = b.randn({4});
  b.projected("conv2d", kOpTolerance, [x, k, bias] { return conv2d(x, k, bias, 1, 1); }, {x, k, bias});
  b.projected("conv2d_stride2", kOpTolerance, [x, k] { return conv2d(x, k, 2, 1); }, {x, k});
}

void wavelet_cases(CaseBuilder& b) {
  T x = b.randn({2, 3, 6, 4});
  b.projected("dwt2_packed", kOpTolerance, [x] { return dwt2_packed(x); }, {x});
  T p = b.randn({2, 12, 3, 2});
  b.projected("idwt2_packed", kOpTolerance, [p] { return idwt2_packed(p); }, {p});
  b.projected("dwt2", kOpTolerance,
              [x] {
                auto q = dwt2(x);
                return concat<double>({q.ll, scale(q.lh, 2.0), scale(q.hl, -1.5), scale(q.hh, 0.5)}, 1);
              },
              {x});
  T ll = b.randn({1, 2, 3, 3}), lh = b.randn({1, 2, 3, 3}), hl = b.randn({1, 2, 3, 3}), hh = b.randn({1, 2, 3, 3});
  b.projected("idwt2", kOpTolerance, [=] { return idwt2(SubbandQuad<double>{ll, lh, hl, hh}); }, {ll, lh, hl, hh});
}

void block_cases(CaseBuilder& b) {
  {
    auto m = b.make<Linear<double>>(5, 3);
    T x = b.randn({2, 5});
    b.projected("linear", kBlockTolerance, [m, x] { return (*m)(x); }, {x}, parameters_of(*m), m);
  }
  {
    auto m = b.make<Conv2d<double>>(3, 4, 3);
    T x = b.randn({1, 3, 5, 5});
    b.projected("conv_layer", kBlockTolerance, [m, x] { return (*m)(x); }, {x}, parameters_of(*m), m);
  }
  {
    auto m = std::make_shared<Linear<double>>(5, 3, b.rng(), LayerOptions{.spectral = true});
    m->set_spectral_update(false);
    T x = b.randn({2, 5});
    b.projected("sn_linear", kBlockTolerance, [m, x] { return (*m)(x); }, {x}, parameters_of(*m), m);
  }
  {
    auto m = std::make_shared<Conv2d<double>>(3, 4, 3, b.rng(), LayerOptions{.spectral = true});
    m->set_spectral_update(false);
    T x = b.randn({1, 3, 4, 4});
    b.projected("sn_conv", kBlockTolerance, [m, x] { return (*m)(x); }, {x}, parameters_of(*m), m);
  }
  {
    auto m = b.make<AdaIN<double>>(3, 4);
    jitter(*m, b.rng(), 0.3);
    T x = b.randn({2, 3, 3, 3}), style = b.randn({2, 4});
    b.projected("adain", kBlockTolerance, [m, x, style] { return (*m)(x, {style}); }, {x, style}, parameters_of(*m), m);
  }
  {
    auto m = b.make<StyleMlp<double>>(6, 5, 4);
    jitter(*m, b.rng(), 0.1);
    T x = b.randn({2, 6});
    b.projected("style_mlp", kBlockTolerance, [m, x] { return (*m)(x).w; }, {x}, parameters_of(*m), m);
  }
  {
    auto m = b.make<ChannelAttentionBlock<double>>(4, 2);
    jitter(*m, b.rng(), 0.1);
    T x = b.randn({1, 4, 4, 4});
    b.projected("cab", kBlockTolerance, [m, x] { return (*m)(x); }, {x}, parameters_of(*m), m);
  }
  {
    auto m = b.make<DoubleAttention<double>>(4, 2, WindowSpec{2});
    jitter(*m, b.rng(), 0.2);
    T x = b.randn({1, 4, 4, 4});
    b.projected("double_attention", kBlockTolerance, [m, x] { return (*m)(x); }, {x}, parameters_of(*m), m);
  }
}

GeneratorConfig tiny_generator() {
  GeneratorConfig c;
  c.img_size = 8;
  c.channels = {4, 4};
  c.style_dim = 4;
  c.style_depth = 2;
  c.heads = 2;
  c.window = 4;
  c.squeeze = 2;
  c.mlp_ratio = 2;
  c.cab_alpha = 0.5;
  return c;
}

void model_cases(CaseBuilder& b) {
  const GeneratorConfig config = tiny_generator();
  {
    auto m = b.make<Encoder<double>>(config);
    jitter(*m, b.rng(), 0.1);
    T x = b.uniform({1, 3, 8, 8});
    b.projected("encoder", kBlockTolerance, [m, x] { return (*m)(x).deep_flat; }, {x}, parameters_of(*m), m);
  }
  {
    auto m = b.make<AggregatedAttention<double>>(4, 4, config);
    jitter(*m, b.rng(), 0.2);
    T x = b.randn({1, 4, 4, 4}), style = b.randn({1, 4});
    b.projected("aggregated_attention", kBlockTolerance, [m, x, style] { return (*m)(x, {style}); }, {x, style},
                parameters_of(*m), m);
  }
  {
    auto m = b.make<TransformerBlock<double>>(4, 4, 4, false, config);
    jitter(*m, b.rng(), 0.2);
    T x = b.randn({1, 4, 4, 4}), feature = b.randn({1, 4, 4, 4}), style = b.randn({1, 4});
    b.projected("transformer_block", kBlockTolerance, [m, x, feature, style] { return (*m)(x, feature, {style}); },
                {x, feature, style}, parameters_of(*m), m);
  }
  {
    auto m = b.make<Generator<double>>(config);
    jitter(*m, b.rng(), 0.2);
    T x = b.uniform({1, 3, 8, 8});
    b.projected("generator", kBlockTolerance, [m, x] { return (*m)(x); }, {x}, parameters_of(*m), m);
  }
  {
    auto m = b.make<WaveletDiscriminator<double>>(8);
    m->set_spectral_update(false);
    jitter(*m, b.rng(), 0.05);
    T x = b.uniform({2, 3, 8, 8});
    b.add("wavelet_discriminator", kBlockTolerance, [m, x] { return sum(softplus((*m)(x))); }, {x},
          parameters_of(*m), m);
  }
  {
    auto m = b.make<RoiDiscriminator<double>>(8);
    m->set_spectral_update(false);
    jitter(*m, b.rng(), 0.05);
    T x = b.uniform({2, 3, 8, 8});
    b.add("roi_discriminator", kBlockTolerance, [m, x] { return sum(softplus((*m)(x))); }, {x}, parameters_of(*m), m);
  }
  {
    T x = b.uniform({1, 3, 16, 16});
    const Box box = RoiBoxes{}.mouth;
    b.projected("crop_roi", kBlockTolerance, [x, box] { return crop_roi(x, box, 8); }, {x});
  }
}

void loss_cases(CaseBuilder& b) {
  T x = b.uniform({2, 3, 16, 16}), y = b.uniform({2, 3, 16, 16});
  b.add("l1", kBlockTolerance, [x, y] { return l1_loss(x, y); }, {x, y});
  auto nets = std::make_shared<LossNets<double>>();
  b.add("perceptual", kBlockTolerance, [nets, x, y] { return perceptual_loss(x, y, nets->perceptual); }, {x, y}, {},
        nets);
  b.add("identity", kBlockTolerance, [nets, x, y] { return identity_loss(x, y, nets->identity); }, {x, y}, {}, nets);
  T real = b.randn({4, 1}), fake = b.randn({4, 1});
  b.add("generator_adversarial", kOpTolerance, [fake] { return generator_adversarial(fake); }, {fake});
  b.add("discriminator_adversarial", kOpTolerance, [real, fake] { return discriminator_adversarial(real, fake); },
        {real, fake});
  T l0 = b.randn({3, 1}), l1 = b.randn({3, 1}), l2 = b.randn({3, 1});
  b.add("roi_generator", kOpTolerance, [l0, l1, l2] { return roi_generator_loss<double>({l0, l1, l2}); },
        {l0, l1, l2});
  {
    // Inputs are detached inside the penalty, so only critic weights are leaves.
    auto d = b.make<WaveletDiscriminator<double>>(8);
    d->set_spectral_update(false);
    const AugToken token = sample_augmentation(AugPolicy{}, 2, 8, 8, b.rng());
    T real = b.uniform({2, 3, 8, 8}), fake = b.uniform({2, 3, 8, 8});
    ImageFn<double> critic = [d](const T& img) { return (*d)(img); };
    ImageFn<double> augment = [token](const T& img) { return apply_augmentation(img, token); };
    b.add("bcr", kBlockTolerance, [critic, augment, real, fake] { return bcr_penalty(critic, real, fake, augment); }, {},
          parameters_of(*d), d);
  }
}

void augment_cases(CaseBuilder& b) {
  T x = b.uniform({2, 3, 8, 8});
  const AugToken token = sample_augmentation(AugPolicy{}, 2, 8, 8, b.rng());
  b.projected("augmentation", kOpTolerance, [x, token] { return apply_augmentation(x, token); }, {x});
}

const std::vector<std::pair<std::string, void (*)(CaseBuilder&)>>& registry() {
  static const std::vector<std::pair<std::string, void (*)(CaseBuilder&)>> r = {
      {"ops", op_cases},       {"wavelet", wavelet_cases}, {"blocks", block_cases},
      {"model", model_cases},  {"losses", loss_cases},     {"augment", augment_cases},
  };
  return r;
}

// Central differences over every `stride`-th coordinate. A coordinate whose
// central differences at eps and eps/4 disagree has a kink inside the stencil
// and is skipped; a leaf that loses more than half its coordinates fails.
double fd_error(const GradCase& c, T leaf, const Eigen::ArrayXd& analytic, Index stride, double eps) {
  NoGradGuard guard;
  auto& v = leaf.mutable_values();
  auto central = [&](Index i, double h) {
    const double keep = v[i];
    v[i] = keep + h;
    const double up = c.loss().item();
    v[i] = keep - h;
    const double down = c.loss().item();
    v[i] = keep;
    return (up - down) / (2 * h);
  };
  std::vector<double> a, fd;
  Index visited = 0;
  for (Index i = stride / 2; i < v.size(); i += stride) {
    ++visited;
    const double coarse = central(i, eps), fine = central(i, eps / 4);
    if (std::abs(coarse - fine) > 1e-6 * (1 + std::abs(fine))) continue;
    a.push_back(analytic[i]);
    fd.push_back(coarse);
  }
  if (2 * static_cast<Index>(a.size()) < visited) return 1.0;
  // Differences resolve gradients only down to about 1e-11 |loss| / eps.
  const double floor = std::max(1e-6, 1e-5 * std::abs(c.loss().item()));
  return relative_error(Eigen::Map<Eigen::ArrayXd>(a.data(), static_cast<Index>(a.size())),
                        Eigen::Map<Eigen::ArrayXd>(fd.data(), static_cast<Index>(fd.size())), floor);
}

CheckResult check(std::string name, bool ok, const std::string& detail) { return {std::move(name), ok, detail}; }

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

}  // namespace

std::vector<std::string> gradient_modules() {
  std::vector<std::string> out;
  for (const auto& [name, fn] : registry()) out.push_back(name);
  return out;
}

std::vector<GradCase> gradient_cases(const std::string& module, std::uint64_t seed) {
  std::vector<GradCase> out;
  bool found = module.empty();
  for (const auto& [name, build] : registry()) {
    if (!module.empty() && name != module) continue;
    found = true;
    CaseBuilder b(name, seed, out);
    build(b);
  }
  if (!found) throw ConfigError("unknown gradient module '" + module + "'");
  return out;
}

GradCheckResult run_gradient_case(const GradCase& c, Index samples, double eps) {
  std::vector<T> all = c.leaves;
  all.insert(all.end(), c.sampled.begin(), c.sampled.end());
  for (auto& leaf : all) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  c.loss().backward();
  std::vector<Eigen::ArrayXd> analytic;
  for (auto& leaf : all) {
    analytic.push_back(leaf.has_grad() ? Eigen::ArrayXd(leaf.grad().template cast<double>())
                                       : Eigen::ArrayXd::Zero(leaf.numel()));
  }
  for (auto& leaf : all) leaf.zero_grad();

  GradCheckResult result{c.module + "/" + c.name, 0.0, c.tolerance};
  for (std::size_t i = 0; i < all.size(); ++i) {
    const Index stride = i < c.leaves.size() ? 1 : std::max<Index>(1, all[i].numel() / samples);
    result.max_rel_error = std::max(result.max_rel_error, fd_error(c, all[i], analytic[i], stride, eps));
  }
  return result;
}

std::vector<GradCheckResult> gradient_suite(const std::string& module, int seeds) {
  std::vector<GradCheckResult> out;
  for (int s = 0; s < seeds; ++s) {
    for (const auto& c : gradient_cases(module, static_cast<std::uint64_t>(s))) {
      auto r = run_gradient_case(c);
      r.name += "#" + std::to_string(s);
      out.push_back(std::move(r));
    }
  }
  return out;
}

std::vector<CheckResult> selftest() {
  std::vector<CheckResult> out;
  Rng rng(2024);

  {
    const auto x = Tensor<float>::uniform({2, 3, 16, 16}, rng, -1, 1);
    const auto back = idwt2_packed(dwt2_packed(x));
    const double err = (back.values() - x.values()).abs().maxCoeff();
    const double energy = std::abs(dwt2_packed(x).values().square().sum() / x.values().square().sum() - 1);
    out.push_back(check("wavelet round trip", err < 1e-5, "max error " + fmt(err)));
    out.push_back(check("wavelet energy", energy < 1e-4, "relative drift " + fmt(energy)));
  }

  int failed_grads = 0;
  double worst = 0;
  for (const auto& r : gradient_suite("", 1)) {
    failed_grads += !r.passed();
    worst = std::max(worst, r.max_rel_error / r.tolerance);
  }
  out.push_back(check("gradients (one seed)", failed_grads == 0,
                      std::to_string(failed_grads) + " failing, worst error/tolerance " + fmt(worst)));

  RunConfig config;
  config.generator = tiny_generator();
  config.generator.img_size = 16;
  config.generator.channels = {8, 8, 8};
  config.generator.style_dim = 8;
  config.roi_size = 8;
  config.batch_size = 2;
  {
    Rng grng(7);
    Generator<float> g(config.generator, grng);
    AttentionTrace<float> trace;
    const auto x = Tensor<float>::uniform({2, 3, 16, 16}, grng, -1, 1);
    const auto y = g.decode(g.encoder(x), g.style_mlp(g.encoder(x).deep_flat), &trace);
    double row_err = 0;
    for (const auto& w : trace.weights) {
      const auto rows = sum(w, {-1});
      row_err = std::max(row_err, static_cast<double>((rows.values() - 1.0f).abs().maxCoeff()));
    }
    out.push_back(check("attention rows sum to one", !trace.weights.empty() && row_err < 1e-5,
                        "max deviation " + fmt(row_err)));
    out.push_back(check("generator shape and range", y.shape() == x.shape() && y.values().abs().maxCoeff() <= 1.0f,
                        to_string(y.shape())));
    g.zero_grad();
    sum(mul(g(x), Tensor<float>::randn(x.shape(), grng))).backward();
    int dead = 0;
    for (auto& [name, p] : g.named_parameters()) dead += !p->value.has_grad();
    out.push_back(check("generator gradient reachability", dead == 0, std::to_string(dead) + " unreached"));
  }

  {
    Rng drng(9);
    WaveletDiscriminator<float> d(16, drng);
    d.refine_spectral(500);
    d.refine_spectral(20);
    double lo = 2, hi = 0;
    for (auto& [name, p] : d.named_parameters()) {
      if (!p->spectral) continue;
      const auto eff = spectral_normalize(p->value, *p->spectral, 0, false);
      const Index rows = eff.dim(0);
      Eigen::MatrixXd m(rows, eff.numel() / rows);
      for (Index i = 0; i < m.size(); ++i) m(i / m.cols(), i % m.cols()) = eff.values()[i];
      const double top = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()[0];
      lo = std::min(lo, top);
      hi = std::max(hi, top);
    }
    out.push_back(check("spectral bound", lo >= 0.99 && hi <= 1.01, "top singular values in [" + fmt(lo) + ", " +
                                                                         fmt(hi) + "]"));
  }

  {
    LossNets<float> nets;
    const auto x = Tensor<float>::uniform({2, 3, 16, 16}, rng, -1, 1);
    const double l1 = l1_loss(x, x).item(), per = perceptual_loss(x, x, nets.perceptual).item();
    const double id = identity_loss(x, x, nets.identity).item();
    const double sp = softplus(Tensor<float>::zeros({1})).item();
    out.push_back(check("losses vanish on identical inputs", l1 == 0 && per == 0 && std::abs(id) < 1e-6,
                        "l1 " + fmt(l1) + ", perceptual " + fmt(per) + ", identity " + fmt(id)));
    out.push_back(check("softplus(0) = ln 2", std::abs(sp - std::log(2.0)) < 1e-6, fmt(sp)));
    Rng crng(4);
    WaveletDiscriminator<float> d(16, crng);
    d.set_spectral_update(false);
    ImageFn<float> critic = [&d](const Tensor<float>& img) { return d(img); };
    const double bcr = bcr_penalty<float>(critic, x, x, [](const Tensor<float>& img) { return img; }).item();
    out.push_back(check("bcr vanishes under identity augmentation", bcr == 0, fmt(bcr)));
  }

  {
    Dataset data = synthetic_faces(2, 16, 3);
    synthesize_lq(data, DegradationParams{}, 4);
    TrainState a(config), b(config);
    std::string ta, tb;
    train(a, data, 2, [&](const StepReport& r) { ta += r.summary() + "\n"; });
    train(b, data, 2, [&](const StepReport& r) { tb += r.summary() + "\n"; });
    out.push_back(check("training determinism", ta == tb && encode_checkpoint(a) == encode_checkpoint(b),
                        "2 steps, two runs"));
    const auto bytes = encode_checkpoint(a);
    TrainState c(checkpoint_config(bytes));
    decode_checkpoint(c, bytes);
    out.push_back(check("checkpoint round trip", encode_checkpoint(c) == bytes, std::to_string(bytes.size()) + " bytes"));
  }
  return out;
}

}  // namespace bfr
