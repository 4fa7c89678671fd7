#include "bfr/errors.hpp"
#include "bfr/ops.hpp"
#include "bfr/pipeline.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>

using namespace bfr;
using F = Tensor<float>;
using T = Tensor<double>;
namespace fs = std::filesystem;

namespace {

F random_image(Index s, std::uint64_t seed, Index batch = 0) {
  Rng rng(seed);
  return batch ? F::uniform({batch, 3, s, s}, rng, -1.f, 1.f) : F::uniform({3, s, s}, rng, -1.f, 1.f);
}

F smooth_image(Index s) {
  F x = F::zeros({3, s, s});
  auto& v = x.mutable_values();
  for (Index c = 0; c < 3; ++c)
    for (Index i = 0; i < s; ++i)
      for (Index j = 0; j < s; ++j)
        v[(c * s + i) * s + j] = static_cast<float>(0.6 * std::sin(0.3 * i + c) * std::cos(0.2 * j));
  return x;
}

float max_abs(const F& a, const F& b) { return (a.values() - b.values()).abs().maxCoeff(); }

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("bfr_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::size_t parse_offset(const std::function<void()>& f) {
  try {
    f();
  } catch (const ParseError& e) {
    return e.offset();
  }
  FAIL("expected ParseError");
  return 0;
}

std::uint32_t be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | p[3];
}

}  // namespace

TEST_CASE("degrade: identity chain and determinism") {
  const F hq = random_image(32, 1);
  Rng rng(5);
  CHECK(max_abs(degrade(hq, DegradationParams::identity(), rng), hq) <= 1e-5f);

  DegradationParams params;
  Rng a(42), b(42);
  const F x = degrade(hq, params, a), y = degrade(hq, params, b);
  CHECK(x.shape() == hq.shape());
  CHECK((x.values() == y.values()).all());
  CHECK(x.values().abs().maxCoeff() <= 1.f);
  Rng c(43);
  CHECK_FALSE((degrade(hq, params, c).values() == x.values()).all());

  const F batch = random_image(16, 2, 3);
  Rng d(1);
  CHECK(degrade(batch, params, d).shape() == batch.shape());
}

TEST_CASE("degrade: PSNR falls as the noise level rises") {
  const F hq = smooth_image(64);
  std::vector<double> scores;
  for (double sigma : {0.01, 0.05, 0.1}) {
    DegradationParams params;
    params.noise_sigma = {sigma, sigma};
    Rng rng(7);
    scores.push_back(psnr(degrade(hq, params, rng), hq));
  }
  CHECK(scores[0] < kPsnrCap);
  CHECK(scores[0] > scores[1]);
  CHECK(scores[1] > scores[2]);
}

TEST_CASE("degrade: parameter validation") {
  DegradationParams p;
  p.quality = {90, 30};
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = DegradationParams{};
  p.downscale = {0.5, 2};
  CHECK_THROWS_AS(p.validate(), ConfigError);
  CHECK_NOTHROW(DegradationParams{}.validate());
  CHECK_NOTHROW(DegradationParams::identity().validate());
}

TEST_CASE("gaussian blur: identity limit, mean, and direct convolution") {
  const T x = T::uniform({2, 24, 24}, *std::make_unique<Rng>(3), -1.0, 1.0);
  CHECK((gaussian_blur(x, 1e-9).values() - x.values()).abs().maxCoeff() <= 1e-4);
  CHECK((gaussian_blur(x, 0.0).values() - x.values()).abs().maxCoeff() == 0);

  for (double sigma : {0.5, 1.3, 3.0}) {
    const T y = gaussian_blur(x, sigma);
    CHECK(std::abs(y.values().mean() - x.values().mean()) <= 1e-4);
    // Direct 2-D convolution with mirrored indices at one interior and one corner pixel.
    const Index r = std::max<Index>(1, static_cast<Index>(std::ceil(3 * sigma)));
    auto mirror = [](Index i, Index n) {
      while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
      return i;
    };
    for (auto [pi, pj] : {std::pair<Index, Index>{12, 11}, {0, 23}}) {
      double num = 0, den = 0;
      for (Index a = -r; a <= r; ++a)
        for (Index b = -r; b <= r; ++b) {
          const double w = std::exp(-(a * a + b * b) / (2 * sigma * sigma));
          num += w * x.values()[(24 + mirror(pi + a, 24)) * 24 + mirror(pj + b, 24)];
          den += w;
        }
      CHECK(y.values()[(24 + pi) * 24 + pj] == doctest::Approx(num / den).epsilon(1e-12));
    }
  }
}

TEST_CASE("area downscale averages blocks") {
  const T x = T::uniform({1, 8, 8}, *std::make_unique<Rng>(4), -1.0, 1.0);
  const T y = area_downscale(x, 2.0);
  REQUIRE(y.shape() == Shape{1, 4, 4});
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j) {
      const auto& v = x.values();
      const double m = (v[2 * i * 8 + 2 * j] + v[2 * i * 8 + 2 * j + 1] + v[(2 * i + 1) * 8 + 2 * j] + v[(2 * i + 1) * 8 + 2 * j + 1]) / 4;
      CHECK(y.values()[i * 4 + j] == doctest::Approx(m).epsilon(1e-12));
    }
  CHECK(box_downscale_upscale(x, 2.0).shape() == x.shape());
  CHECK((box_downscale_upscale(x, 1.0).values() == x.values()).all());
}

TEST_CASE("dct compression") {
  const F x = random_image(20, 6);
  CHECK(max_abs(dct_compress(x, 100.0), x) <= 1e-3f);

  // A constant block keeps only its DC term: round(8·v·127.5 / step)·step.
  const double v = 0.3137;
  for (double q : {10.0, 30.0, 75.0}) {
    const double scale = q < 50 ? 5000 / q : 200 - 2 * q;
    const double step = 16 * scale / 100;
    const double expect = std::round(8 * v * 127.5 / step) * step / (8 * 127.5);
    const T c = dct_compress(T::constant({1, 8, 8}, v), q);
    CHECK((c.values() - expect).abs().maxCoeff() <= 1e-12);
  }

  // Re-quantizing at the same quality is a fixed point, stronger compression loses more.
  const T y = T::uniform({1, 16, 16}, *std::make_unique<Rng>(8), -1.0, 1.0);
  const T once = dct_compress(y, 40.0);
  CHECK((dct_compress(once, 40.0).values() - once.values()).abs().maxCoeff() <= 1e-9);
  const double err90 = (dct_compress(y, 90.0).values() - y.values()).square().mean();
  const double err30 = (dct_compress(y, 30.0).values() - y.values()).square().mean();
  CHECK(err90 > 0);
  CHECK(err30 > err90);
}

TEST_CASE("noise is seeded and scaled") {
  const T x = T::zeros({3, 64, 64});
  Rng a(9), b(9);
  const T n1 = add_gaussian_noise(x, 0.1, a), n2 = add_gaussian_noise(x, 0.1, b);
  CHECK((n1.values() == n2.values()).all());
  const double sd = std::sqrt(n1.values().square().mean());
  CHECK(sd == doctest::Approx(0.1).epsilon(0.05));
}

TEST_CASE("augmentation: identities, replay, and shapes") {
  const F x = random_image(16, 10, 3);
  Rng rng(1);
  CHECK((diff_augment(x, AugPolicy::none(), rng).values() == x.values()).all());

  AugPolicy cut = AugPolicy::none();
  cut.cutout = true;
  cut.cutout_ratio = 0;
  CHECK((diff_augment(x, cut, rng).values() == x.values()).all());

  AugPolicy all;
  const AugToken token = sample_augmentation(all, 3, 16, 16, rng);
  const F a = apply_augmentation(x, token), b = apply_augmentation(x, token);
  CHECK(a.shape() == x.shape());
  CHECK((a.values() == b.values()).all());
  CHECK_FALSE((a.values() == x.values()).all());

  for (const auto& s : token.samples) {
    CHECK(std::abs(s.dy) <= 2);
    CHECK(std::abs(s.dx) <= 2);
    CHECK(s.cut_size == 8);
    CHECK(std::abs(s.brightness) <= 0.5);
  }

  AugPolicy bad;
  bad.translation_ratio = 0.2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  const AugToken wrong = sample_augmentation(all, 2, 16, 16, rng);
  CHECK_THROWS_AS(apply_augmentation(x, wrong), DimensionError);
}

TEST_CASE("augmentation: forced transforms match their definitions") {
  const T x = T::uniform({1, 3, 8, 8}, *std::make_unique<Rng>(11), -1.0, 1.0);
  AugToken t;
  t.height = t.width = 8;
  t.samples.resize(1);

  t.policy = AugPolicy::none();
  t.policy.flip = true;
  t.samples[0].flip = true;
  const T f = apply_augmentation(x, t);
  for (Index c = 0; c < 3; ++c)
    for (Index i = 0; i < 8; ++i)
      for (Index j = 0; j < 8; ++j) CHECK(f.values()[(c * 8 + i) * 8 + j] == x.values()[(c * 8 + i) * 8 + 7 - j]);

  t.policy = AugPolicy::none();
  t.policy.translation = true;
  t.samples[0] = {};
  t.samples[0].dy = 1;
  t.samples[0].dx = -2;
  const T s = apply_augmentation(x, t);
  for (Index c = 0; c < 3; ++c)
    for (Index i = 0; i < 8; ++i)
      for (Index j = 0; j < 8; ++j) {
        const Index si = i - 1, sj = j + 2;
        const double expect = (si >= 0 && si < 8 && sj >= 0 && sj < 8) ? x.values()[(c * 8 + si) * 8 + sj] : 0.0;
        CHECK(s.values()[(c * 8 + i) * 8 + j] == expect);
      }

  t.policy = AugPolicy::none();
  t.policy.cutout = true;
  t.samples[0] = {};
  t.samples[0].cut_size = 4;
  t.samples[0].cut_y = 0;
  t.samples[0].cut_x = 5;
  const T k = apply_augmentation(x, t);
  Index zeros = 0;
  for (Index i = 0; i < k.numel(); ++i) zeros += k.values()[i] == 0.0;
  CHECK(zeros == 3 * 2 * 4);  // rows 0..1, cols 3..6

  t.policy = AugPolicy::none();
  t.policy.color = true;
  t.samples[0] = {};
  t.samples[0].brightness = 0.25;
  const T br = apply_augmentation(x, t);
  CHECK((br.values() - x.values() - 0.25).abs().maxCoeff() <= 1e-12);
  t.samples[0] = {};
  t.samples[0].saturation = 0;
  const T gray = apply_augmentation(x, t);
  for (Index p = 0; p < 64; ++p) {
    const double m = (x.values()[p] + x.values()[64 + p] + x.values()[128 + p]) / 3;
    CHECK(gray.values()[p] == doctest::Approx(m));
    CHECK(gray.values()[128 + p] == doctest::Approx(m));
  }
}

TEST_CASE("augmentation: gradient reaches the input through every transform") {
  const char* names[] = {"flip", "color", "translation", "cutout"};
  for (int op = 0; op < 4; ++op) {
    CAPTURE(names[op]);
    AugPolicy policy = AugPolicy::none();
    (op == 0 ? policy.flip : op == 1 ? policy.color : op == 2 ? policy.translation : policy.cutout) = true;
    T x = T::uniform({2, 3, 8, 8}, *std::make_unique<Rng>(12 + op), -1.0, 1.0);
    x.set_requires_grad(true);
    Rng rng(3);
    T y = diff_augment(x, policy, rng);
    CHECK(y.shape() == x.shape());
    sum(mul(y, y)).backward();
    REQUIRE(x.has_grad());
    CHECK(x.grad().abs().maxCoeff() > 0);
  }
}

TEST_CASE("image io: PPM fixture") {
  // 3x3 P6, comment in the header, row-major RGB triplets.
  std::string header = "P6\n# fixture\n3 3\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  const std::uint8_t px[9][3] = {{0, 0, 0},     {255, 255, 255}, {255, 0, 0},   {0, 255, 0},   {0, 0, 255},
                                 {128, 64, 32}, {1, 2, 3},       {254, 253, 252}, {100, 150, 200}};
  for (auto& p : px) bytes.insert(bytes.end(), p, p + 3);
  const F img = decode_ppm(bytes);
  REQUIRE(img.shape() == Shape{3, 3, 3});
  for (Index i = 0; i < 9; ++i)
    for (Index c = 0; c < 3; ++c) CHECK(img.values()[c * 9 + i] == doctest::Approx(px[i][c] / 127.5 - 1).epsilon(1e-7));
  CHECK(img.values()[0] == -1.f);
  CHECK(img.values()[1] == 1.f);

  CHECK(decode_ppm(encode_ppm(img)).values().isApprox(img.values(), 0));
}

TEST_CASE("image io: errors carry offsets") {
  const std::string good = "P6\n2 2\n255\n";
  auto as_bytes = [](const std::string& s) { return std::vector<std::uint8_t>(s.begin(), s.end()); };
  CHECK(parse_offset([&] { decode_ppm(as_bytes("P3\n2 2\n255\n")); }) == 0);
  CHECK(parse_offset([&] { decode_ppm(as_bytes("P6\n2 x\n255\n")); }) == 5);
  CHECK(parse_offset([&] { decode_ppm(as_bytes("P6\n2 2\n65535\n")); }) == 7);
  auto truncated = as_bytes(good);
  truncated.resize(truncated.size() + 5);
  CHECK(parse_offset([&] { decode_ppm(truncated); }) == truncated.size());

  const F img = random_image(8, 13);
  auto png = encode_png(img);
  CHECK(max_abs(decode_png(png), img) <= 1.f / 255 + 1e-6f);
  // Locate IDAT by walking chunks independently, then corrupt a payload byte.
  std::size_t off = 8;
  while (std::memcmp(&png[off + 4], "IDAT", 4) != 0) off += 12 + be32(&png[off]);
  auto bad = png;
  bad[off + 10] ^= 0x5a;
  CHECK(parse_offset([&] { decode_png(bad); }) == off);
  auto cut = png;
  cut.resize(off + 6);
  CHECK(parse_offset([&] { decode_png(cut); }) == off);
  CHECK(parse_offset([&] { decode_png(as_bytes("GIF89a....")); }) == 0);
}

TEST_CASE("image io: save/load round trip and validation") {
  TempDir dir("io");
  const F img = random_image(16, 14);
  for (const char* ext : {".png", ".ppm"}) {
    const auto path = dir.path / (std::string("img") + ext);
    save_image(img, path);
    const ImageRecord rec = load_image(path);
    CHECK(rec.id == "img");
    CHECK(max_abs(rec.hq, img) <= 1.f / 255 + 1e-6f);
  }
  save_image(F::constant({3, 8, 8}, -1.f), dir.path / "black.png");
  CHECK((load_image(dir.path / "black.png").hq.values() == -1.f).all());
  save_image(F::constant({3, 8, 8}, 1.f), dir.path / "white.ppm");
  CHECK((load_image(dir.path / "white.ppm").hq.values() == 1.f).all());

  save_image(F::zeros({3, 8, 16}), dir.path / "wide.png");
  CHECK_THROWS_AS(load_image(dir.path / "wide.png"), ValidationError);
  save_image(F::zeros({3, 12, 12}), dir.path / "twelve.ppm");
  CHECK_THROWS_AS(load_image(dir.path / "twelve.ppm"), ValidationError);
  CHECK_THROWS_AS(save_image(img, dir.path / "x.bmp"), ConfigError);
  write_bytes(dir.path / "junk.ppm", {'P', '6', '\n'});
  CHECK_THROWS_AS(load_image(dir.path / "junk.ppm"), ParseError);
}

TEST_CASE("metrics: psnr") {
  const F x = random_image(16, 15);
  CHECK(psnr(x, x) == kPsnrCap);
  // 1/255 on the [0,1] scale is 2/255 on [-1,1].
  const F y = F(x.shape(), x.values() + 2.f / 255);
  CHECK(psnr(x, y) == doctest::Approx(20 * std::log10(255.0)).epsilon(1e-5));
  CHECK(psnr(x, y) == doctest::Approx(48.1308).epsilon(1e-5));
  const F z = random_image(16, 16);
  CHECK(psnr(x, z) == psnr(z, x));
  CHECK_THROWS_AS(psnr(x, random_image(8, 1)), DimensionError);
}

TEST_CASE("metrics: ssim") {
  const T x = T::uniform({3, 32, 32}, *std::make_unique<Rng>(17), -1.0, 1.0);
  CHECK(ssim(x, x) == doctest::Approx(1.0).epsilon(1e-12));
  // Constants a, b on [0,1]: zero variance leaves (2ab + C1) / (a² + b² + C1).
  const double a = 0.2, b = 0.7, c1 = 1e-4;
  const double expect = (2 * a * b + c1) / (a * a + b * b + c1);
  CHECK(ssim(T::constant({1, 16, 16}, 2 * a - 1), T::constant({1, 16, 16}, 2 * b - 1)) == doctest::Approx(expect).epsilon(1e-12));
  const T noisy = T(x.shape(), x.values() + 0.2 * T::randn(x.shape(), *std::make_unique<Rng>(2)).values());
  const double s = ssim(x, noisy);
  CHECK(s < 1);
  CHECK(s == doctest::Approx(ssim(noisy, x)).epsilon(1e-12));
  CHECK(ssim(T::constant({1, 8, 8}, 0.0), T::constant({1, 8, 8}, 0.0)) == doctest::Approx(1.0));
}

TEST_CASE("metrics: frechet distance") {
  // One-dimensional Gaussians: (μa − μb)² + (σa − σb)².
  Eigen::MatrixXd a(4, 1), b(4, 1);
  a << 1, 2, 3, 4;
  b << 0, 4, 8, 12;
  const double va = 5.0 / 3, vb = 80.0 / 3;
  CHECK(frechet_distance(a, b) == doctest::Approx(std::pow(2.5 - 6, 2) + std::pow(std::sqrt(va) - std::sqrt(vb), 2)));
  Eigen::MatrixXd s = Eigen::MatrixXd::Random(20, 5);
  CHECK(frechet_distance(s, s) <= 1e-9);
  // Diagonal covariances reduce to per-axis sums.
  Eigen::MatrixXd p(4, 2), q(4, 2);
  p << 1, 0, -1, 0, 0, 2, 0, -2;
  q << 3, 1, 1, 1, 2, 3, 2, -1;
  const double got = frechet_distance(p, q);
  const double v1 = 2.0 / 3, v2 = 8.0 / 3;
  const double expect = 4 + 1 + std::pow(std::sqrt(v1) - std::sqrt(v1), 2) + std::pow(std::sqrt(v2) - std::sqrt(v2), 2);
  CHECK(got == doctest::Approx(expect));
  CHECK_THROWS_AS(frechet_distance(p, s), DimensionError);

  FrozenFeatureNet<float> net(FrozenFeatureNet<float>::kPerceptualSeed);
  const F set = random_image(32, 18, 4);
  CHECK(feature_frechet(set, set, net) <= 1e-4);
  CHECK(feature_frechet(set, random_image(32, 19, 4), net) > 0);
}

TEST_CASE("roi box config") {
  const RoiBoxes parsed = parse_roi_boxes("# override\nmouth 0.25 0.6 0.75 0.85  # wider\n\nleft_eye 0.1 0.2 0.4 0.45\n");
  CHECK(parsed.mouth.x0 == 0.25);
  CHECK(parsed.mouth.y1 == 0.85);
  CHECK(parsed.left_eye.x1 == 0.4);
  CHECK(parsed.right_eye.x0 == RoiBoxes{}.right_eye.x0);
  const RoiBoxes again = parse_roi_boxes(format_roi_boxes(parsed));
  for (Region r : kRegions) {
    CHECK(again[r].x0 == parsed[r].x0);
    CHECK(again[r].y0 == parsed[r].y0);
    CHECK(again[r].x1 == parsed[r].x1);
    CHECK(again[r].y1 == parsed[r].y1);
  }
  CHECK_THROWS_AS(parse_roi_boxes("nose 0 0 1 1"), ConfigError);
  CHECK_THROWS_AS(parse_roi_boxes("mouth 0 0 1"), ConfigError);
  CHECK_THROWS_AS(parse_roi_boxes("mouth 0.5 0 0.2 1"), ConfigError);
  CHECK_THROWS_AS(parse_roi_boxes("mouth 0 0 1 1 7"), ConfigError);
}

TEST_CASE("datasets: synthesis, streams, and persistence") {
  const Dataset faces = synthetic_faces(4, 32, 21);
  REQUIRE(faces.size() == 4);
  CHECK(faces.image_size() == 32);
  CHECK_FALSE(faces.has_lq());
  for (const auto& r : faces.records) CHECK(r.hq.values().abs().maxCoeff() <= 1.f);
  CHECK_FALSE((faces.records[0].hq.values() == faces.records[1].hq.values()).all());
  const Dataset same = synthetic_faces(4, 32, 21);
  for (Index i = 0; i < 4; ++i) CHECK((same.records[i].hq.values() == faces.records[i].hq.values()).all());

  Dataset paired = faces;
  synthesize_lq(paired, DegradationParams{}, 99);
  CHECK(paired.has_lq());
  // Record i depends only on (seed, i), not on what was degraded before it.
  for (Index i : {2, 0}) {
    Rng rng = stream_rng(99, static_cast<std::uint64_t>(i));
    const F low = degrade(faces.records[i].hq, DegradationParams{}, rng);
    CHECK(max_abs(*paired.records[i].lq, low) <= 0.5f / 127.5f + 1e-6f);
  }
  CHECK_FALSE((paired.records[0].lq->values() == paired.records[1].lq->values()).all());

  const F lq = stack_images(paired, {3, 1}, true);
  CHECK(lq.shape() == Shape{2, 3, 32, 32});
  CHECK((lq.values().head(3 * 32 * 32) == paired.records[3].lq->values()).all());
  CHECK_THROWS_AS(stack_images(faces, {0}, true), ContractError);
  CHECK_THROWS_AS(stack_images(faces, {4}, false), ContractError);

  TempDir dir("data");
  paired.boxes = parse_roi_boxes("mouth 0.3 0.6 0.7 0.82");
  save_dataset(paired, dir.path);
  const Dataset loaded = load_dataset(dir.path);
  REQUIRE(loaded.size() == 4);
  CHECK(loaded.has_lq());
  REQUIRE(loaded.boxes.has_value());
  CHECK(loaded.roi_boxes().mouth.y1 == 0.82);
  for (Index i = 0; i < 4; ++i) {
    CHECK(loaded.records[i].id == paired.records[i].id);
    CHECK((loaded.records[i].hq.values() == paired.records[i].hq.values()).all());
    CHECK((loaded.records[i].lq->values() == paired.records[i].lq->values()).all());
  }

  fs::remove(dir.path / "lq" / "face_0001.png");
  CHECK_THROWS_AS(load_dataset(dir.path), ValidationError);
  save_image(F::zeros({3, 16, 16}), dir.path / "lq" / "face_0001.png");
  CHECK_THROWS_AS(load_dataset(dir.path), ValidationError);
  CHECK_THROWS_AS(load_dataset(dir.path / "missing"), ValidationError);
}
