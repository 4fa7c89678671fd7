// Acceptance run: one PASS/FAIL line per criterion, each with its runtime
// budget. Exits non-zero when any criterion fails.

#include "bfr/diagnostics.hpp"
#include "bfr/errors.hpp"
#include "bfr/ops.hpp"
#include "bfr/trainkit.hpp"
#include "bfr/wavelet.hpp"
#include "oracles.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

using namespace bfr;
using T = Tensor<double>;
using F = Tensor<float>;
namespace fs = std::filesystem;

namespace {

constexpr std::int64_t kOverfitSteps = 1200;
constexpr std::int64_t kAblationSteps = 200;

struct Outcome {
  bool passed = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      passed = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

int failures = 0;

void criterion(const std::string& name, double budget_s, const std::function<void(Outcome&)>& body) {
  Outcome out;
  const auto start = std::chrono::steady_clock::now();
  try {
    body(out);
  } catch (const std::exception& e) {
    out.passed = false;
    out.detail << "[exception: " << e.what() << "] ";
  }
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.require(elapsed <= budget_s, "runtime");
  failures += !out.passed;
  std::printf("%s  %-26s %.1fs (budget %.0fs)  %s\n", out.passed ? "PASS" : "FAIL", name.c_str(), elapsed, budget_s,
              out.detail.str().c_str());
  std::fflush(stdout);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

template <typename S>
double max_diff(const Tensor<S>& a, const Tensor<S>& b) {
  return (a.values().template cast<double>() - b.values().template cast<double>()).abs().maxCoeff();
}

template <typename S>
void jitter(Module<S>& m, Rng& rng, double scale) {
  for (auto& [name, p] : m.named_parameters()) {
    p->value.mutable_values() += Tensor<S>::randn(p->value.shape(), rng, static_cast<S>(scale)).values();
  }
}

template <typename S>
void zero_module(Module<S>& m) {
  for (auto& [name, p] : m.named_parameters()) p->value.mutable_values().setZero();
}

template <typename S>
void copy_matching(Module<S>& from, Module<S>& to) {
  std::map<std::string, Parameter<S>*> src;
  for (auto& [name, p] : from.named_parameters()) src[name] = p;
  for (auto& [name, p] : to.named_parameters()) {
    auto it = src.find(name);
    if (it != src.end()) p->value.mutable_values() = it->second->value.values();
  }
}

using Snapshot = std::vector<std::vector<float>>;

Snapshot snapshot(const std::vector<std::pair<std::string, Parameter<float>*>>& params) {
  Snapshot out;
  for (const auto& [name, p] : params) {
    const auto& v = p->value.values();
    out.emplace_back(v.data(), v.data() + v.size());
    if (p->spectral) {
      out.emplace_back(p->spectral->u.data(), p->spectral->u.data() + p->spectral->u.size());
      out.emplace_back(p->spectral->v.data(), p->spectral->v.data() + p->spectral->v.size());
      out.push_back({p->spectral->sigma});
    }
  }
  return out;
}

bool bit_equal(const Snapshot& a, const Snapshot& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size() || std::memcmp(a[i].data(), b[i].data(), a[i].size() * sizeof(float)) != 0)
      return false;
  }
  return true;
}

Snapshot full_snapshot(TrainState& s) {
  Snapshot a = snapshot(s.generator_parameters()), b = snapshot(s.critic_parameters());
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("bfr_accept_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Eight 64x64 faces written to disk, degraded with a fixed seed and read
// back, as `synth` followed by `degrade` would produce them.
Dataset paired_faces(const fs::path& root) {
  Dataset hq = synthetic_faces(8, 64, 5);
  hq.boxes = RoiBoxes{};
  save_dataset(hq, root / "hq_only");
  Dataset data = load_dataset(root / "hq_only");
  synthesize_lq(data, RunConfig{}.degradation, 7);
  save_dataset(data, root / "paired");
  return load_dataset(root / "paired");
}

void gradient_suite_criterion(Outcome& out) {
  int cases = 0, failed = 0;
  double worst_ratio = 0;
  std::string worst;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (auto& c : gradient_cases("", seed)) {
      double err = 0;
      for (auto& leaf : c.leaves) err = std::max(err, oracle::grad_error_strided(c.loss, leaf, 1));
      for (auto& leaf : c.sampled) {
        err = std::max(err, oracle::grad_error_strided(c.loss, leaf, std::max<Index>(1, leaf.numel() / 24)));
      }
      ++cases;
      failed += !(err < c.tolerance);
      if (err / c.tolerance > worst_ratio) {
        worst_ratio = err / c.tolerance;
        worst = c.module + "/" + c.name + "#" + std::to_string(seed);
      }
    }
  }
  out.require(failed == 0, std::to_string(failed) + " cases over tolerance");
  out.detail << cases << " case runs over 5 seeds; worst " << worst << " at " << fmt(worst_ratio) << "x tolerance";
}

void wavelet_criterion(Outcome& out) {
  Rng rng(101);
  double trip = 0, energy_err = 0, adjoint = 0;
  for (int trial = 0; trial < 5; ++trial) {
    auto x = F::uniform({2, 3, 64, 64}, rng, -1, 1);
    trip = std::max(trip, max_diff(idwt2(dwt2(x)), x));

    auto q = dwt2(x);
    auto e = [](const F& t) { return t.values().cast<double>().square().sum(); };
    const double ex = e(x);
    energy_err = std::max(energy_err, std::abs(e(q.ll) + e(q.lh) + e(q.hl) + e(q.hh) - ex) / ex);

    auto xd = T::randn({2, 3, 16, 16}, rng);
    auto yd = T::randn({2, 12, 8, 8}, rng);
    const double lhs = (dwt2_packed(xd).values() * yd.values()).sum();
    const double rhs = (xd.values() * idwt2_packed(yd).values()).sum();
    adjoint = std::max(adjoint, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
  }
  out.require(trip < 1e-5, "round trip");
  out.require(energy_err < 1e-4, "energy");
  out.require(adjoint < 1e-6, "adjoint");
  out.detail << "round trip " << fmt(trip) << ", energy " << fmt(energy_err) << ", adjoint " << fmt(adjoint);
}

void architecture_criterion(Outcome& out) {
  Rng rng(202);
  const auto cfg = GeneratorConfig::for_size(64);

  {
    AggregatedAttention<double> aam(32, 16, cfg, rng);
    jitter(aam, rng, 0.1);
    zero_module(aam.attention.proj);
    zero_module(aam.cab->conv2);
    zero_module(aam.mlp_out);
    auto x = T::randn({2, 32, 16, 16}, rng);
    const double d = max_diff(aam(x, {T::randn({2, cfg.style_dim}, rng)}), x);
    out.require(d == 0, "residual identity");
    out.detail << "residual identity " << fmt(d);
  }
  {
    auto zero_alpha = cfg;
    zero_alpha.cab_alpha = 0;
    auto off = cfg;
    off.use_cab = false;
    AggregatedAttention<float> with(32, 16, zero_alpha, rng);
    AggregatedAttention<float> without(32, 16, off, rng);
    jitter(with, rng, 0.1);
    copy_matching(with, without);
    auto x = F::randn({2, 32, 16, 16}, rng);
    StyleVector<float> style{F::randn({2, cfg.style_dim}, rng)};
    const double d = max_diff(with(x, style), without(x, style));
    out.require(without.cab == nullptr && d == 0, "alpha=0 vs CAB off");
    out.detail << ", alpha0-vs-off " << fmt(d);
  }
  {
    Generator<float> g(cfg, rng);
    jitter(g, rng, 0.02);
    NoGradGuard guard;
    auto x = F::uniform({2, 3, 64, 64}, rng, -1, 1);
    auto features = g.encoder(x);
    AttentionTrace<float> trace;
    g.decode(features, g.style_mlp(features.deep_flat), &trace);
    double dev = 0;
    for (const auto& w : trace.weights) {
      const Index n = w.dim(w.ndim() - 1);
      for (Index r = 0; r < w.numel() / n; ++r) dev = std::max(dev, std::abs(w.values().segment(r * n, n).sum() - 1.0));
    }
    out.require(!trace.weights.empty() && dev < 1e-5, "attention rows");
    out.detail << ", attention rows " << fmt(dev) << " over " << trace.weights.size() << " maps";
  }
  for (Index s : {32, 64, 128}) {
    Generator<float> g(GeneratorConfig::for_size(s), rng);
    NoGradGuard guard;
    auto y = g(F::uniform({1, 3, s, s}, rng, -1, 1));
    out.require(y.shape() == Shape{1, 3, s, s} && y.values().abs().maxCoeff() <= 1.f,
                "shape law at " + std::to_string(s));
  }
  out.detail << ", shape law 32/64/128";
  {
    Generator<float> g(cfg, rng);
    jitter(g, rng, 0.02);
    auto x = F::uniform({2, 3, 64, 64}, rng, -1, 1);
    auto y = F::uniform({2, 3, 64, 64}, rng, -1, 1);
    mean(abs(sub(g(x), y))).backward();
    Index total = 0, covered = 0;
    for (auto& [name, p] : g.named_parameters()) {
      ++total;
      covered += p->value.has_grad() && p->value.grad().abs().maxCoeff() > 0;
    }
    out.require(covered == total, "gradient coverage");
    out.detail << ", coverage " << covered << "/" << total;
  }
}

void spectral_criterion(Outcome& out) {
  Rng rng(303);
  WaveletDiscriminator<float> d(64, rng);
  RoiDiscriminators<float> roi(16, false, rng);
  double lo = 2, hi = 0;
  Index count = 0;
  for (Module<float>* m : std::initializer_list<Module<float>*>{&d, &roi}) {
    m->refine_spectral(500);
    m->refine_spectral(20);
    for (auto& [name, p] : m->named_parameters()) {
      if (!p->spectral) continue;
      const auto eff = spectral_normalize(p->value, *p->spectral, 0, false);
      const Index rows = eff.dim(0);
      Eigen::MatrixXd a(rows, eff.numel() / rows);
      for (Index i = 0; i < a.rows(); ++i)
        for (Index j = 0; j < a.cols(); ++j) a(i, j) = eff.values()[i * a.cols() + j];
      const double top = oracle::top_singular_value(a, 2000);
      lo = std::min(lo, top);
      hi = std::max(hi, top);
      ++count;
    }
  }
  out.require(count > 0 && lo >= 0.99 && hi <= 1.01, "singular value range");
  out.detail << count << " weights, top singular values in [" << fmt(lo) << ", " << fmt(hi) << "]";
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
  return c;
}

void loss_criterion(Outcome& out) {
  Rng rng(404);
  LossNets<double> nets;
  auto x = T::uniform({2, 3, 16, 16}, rng, -1, 1);
  const double l1 = l1_loss(x, x).item(), per = perceptual_loss(x, x, nets.perceptual).item();
  const double id = identity_loss(x, x, nets.identity).item();
  out.require(l1 == 0 && per == 0 && std::abs(id) < 1e-12, "trivial inputs");
  out.detail << "l1 " << fmt(l1) << ", perceptual " << fmt(per) << ", identity " << fmt(id);

  const auto zero = T::zeros({4, 1});
  const double g = generator_adversarial(zero).item(), dsum = discriminator_adversarial(zero, zero).item();
  const double roi = roi_generator_loss<double>({zero}).item();
  const double ln2 = std::log(2.0);
  out.require(std::abs(g - ln2) < 1e-6 && std::abs(dsum - 2 * ln2) < 1e-6 && std::abs(roi - ln2) < 1e-6,
              "softplus at 0");
  out.detail << ", softplus(0) terms off by " << fmt(std::max({std::abs(g - ln2), std::abs(dsum / 2 - ln2), std::abs(roi - ln2)}));

  Generator<double> gen(tiny_generator(), rng);
  WaveletDiscriminator<double> d(8, rng);
  RoiDiscriminators<double> rd(8, false, rng);
  d.set_spectral_update(false);
  rd.set_spectral_update(false);
  for (auto& [name, p] : gen.named_parameters()) {
    if (name.find("to_scale") != std::string::npos || name.find("to_shift") != std::string::npos)
      p->value.mutable_values() = T::randn(p->value.shape(), rng, 0.1).values();
  }
  auto lq = T::uniform({2, 3, 8, 8}, rng, -1, 1), hq = T::uniform({2, 3, 8, 8}, rng, -1, 1);
  ImageFn<double> critic = [&](const T& img) { return d(img); };
  const double bcr_id = bcr_penalty<double>(critic, hq, gen(lq), [](const T& img) { return img; }).item();
  d.zero_grad();
  bcr_penalty<double>(critic, hq, gen(lq), [](const T& img) { return flip(img, 3); }).backward();
  Index leaked = 0;
  for (auto& [name, p] : gen.named_parameters()) leaked += p->value.has_grad();
  d.zero_grad();
  out.require(bcr_id == 0 && leaked == 0, "bcr laws");
  out.detail << ", bcr(identity) " << fmt(bcr_id) << ", generator tensors reached by bcr " << leaked;

  Critics<double> critics{&d, &rd, {}};
  using Grads = std::map<std::string, Eigen::ArrayXd>;
  auto grads = [&](const LossWeights& w) {
    generator_objective(gen(lq), hq, critics, nets, w).total.backward();
    d.zero_grad();
    rd.zero_grad();
    Grads g;
    for (auto& [name, p] : gen.named_parameters())
      g[name] = p->value.has_grad() ? Eigen::ArrayXd(p->value.grad()) : Eigen::ArrayXd::Zero(p->value.numel());
    gen.zero_grad();
    return g;
  };
  const LossWeights all;
  const Grads full = grads(all);
  double worst = 0;
  for (double LossWeights::*field : {&LossWeights::l1, &LossWeights::perceptual, &LossWeights::identity,
                                     &LossWeights::adversarial, &LossWeights::roi}) {
    LossWeights without = all, only{0, 0, 0, 0, 0, 0};
    without.*field = 0;
    only.*field = all.*field;
    const Grads rest = grads(without), alone = grads(only);
    double dev = 0, scale = 0;
    for (const auto& [name, gfull] : full) {
      dev = std::max(dev, (gfull - rest.at(name) - alone.at(name)).abs().maxCoeff());
      scale = std::max(scale, alone.at(name).abs().maxCoeff());
    }
    out.require(scale > 0, "toggle has no effect");
    worst = std::max(worst, dev / std::max(1.0, scale));
  }
  out.require(worst <= 1e-9, "toggle isolation");
  out.detail << ", toggle isolation " << fmt(worst);
}

void overfit_criterion(Outcome& out, const Dataset& data) {
  RunConfig config;
  TrainState s(config);
  s.boxes = data.roi_boxes();
  double input_psnr = 0;
  for (const auto& r : data.records) input_psnr += psnr(*r.lq, r.hq);
  input_psnr /= static_cast<double>(data.size());
  std::vector<double> l1;
  train(s, data, kOverfitSteps, [&](const StepReport& r) { l1.push_back(r.generator.value("l1")); });
  const double first = std::accumulate(l1.begin(), l1.begin() + 50, 0.0) / 50;
  const double last = std::accumulate(l1.end() - 50, l1.end(), 0.0) / 50;
  const double restored_psnr = evaluate(s, data).mean_psnr;
  out.require(last <= 0.5 * first, "L1 drop");
  out.require(restored_psnr >= input_psnr + 2, "PSNR gain");
  out.detail << kOverfitSteps << " steps; L1 " << fmt(first) << " -> " << fmt(last) << " (" << fmt(100 * (1 - last / first))
             << "% drop); PSNR " << fmt(input_psnr) << " -> " << fmt(restored_psnr) << " dB";
}

void determinism_criterion(Outcome& out, const Dataset& data) {
  TempDir dir;
  const RunConfig config;
  TrainState a(config), b(config);
  a.boxes = b.boxes = data.roi_boxes();
  std::vector<std::string> ta, tb;
  train(a, data, 10, [&](const StepReport& r) { ta.push_back(r.summary()); });
  train(b, data, 10, [&](const StepReport& r) { tb.push_back(r.summary()); });
  out.require(ta == tb && bit_equal(full_snapshot(a), full_snapshot(b)), "10-step trace");

  save_checkpoint(a, dir.path / "a.bfrf");
  auto resumed = load_checkpoint(dir.path / "a.bfrf");
  resumed->boxes = data.roi_boxes();
  save_checkpoint(*resumed, dir.path / "b.bfrf");
  out.require(read_bytes(dir.path / "a.bfrf") == read_bytes(dir.path / "b.bfrf"), "save/load/save bytes");

  train(a, data, 20);
  train(*resumed, data, 20);
  out.require(bit_equal(full_snapshot(a), full_snapshot(*resumed)) && encode_checkpoint(a) == encode_checkpoint(*resumed),
              "resume");
  out.detail << "10-step traces identical, checkpoint bytes identical, 10+10 resume equals 20 straight";
}

void ablation_criterion(Outcome& out, const Dataset& data) {
  for (int row = 0; row < RunConfig::kAblationRows; ++row) {
    RunConfig config = RunConfig::ablation(row);
    TrainState s(config);
    s.boxes = data.roi_boxes();
    std::string label = config.toggle_label();
    try {
      train(s, data, kAblationSteps);
      out.detail << label << " ok; ";
    } catch (const NonFiniteError& e) {
      out.require(false, label + " non-finite " + e.component());
    }
  }
}

}  // namespace

int main() {
  TempDir dir;
  const Dataset data = paired_faces(dir.path);

  criterion("gradient suite", 120, gradient_suite_criterion);
  criterion("wavelet suite", 10, wavelet_criterion);
  criterion("architecture laws", 60, architecture_criterion);
  criterion("spectral bound", 30, spectral_criterion);
  criterion("loss laws", 30, loss_criterion);
  criterion("determinism & persistence", 300, [&](Outcome& o) { determinism_criterion(o, data); });
  criterion("ablation harness", 1200, [&](Outcome& o) { ablation_criterion(o, data); });
  criterion("overfit smoke test", 1800, [&](Outcome& o) { overfit_criterion(o, data); });

  std::printf("%d of 8 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
