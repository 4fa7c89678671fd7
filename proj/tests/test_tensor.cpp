#include "bfr/errors.hpp"
#include "bfr/ops.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace bfr;
using T = Tensor<double>;
using F = Tensor<float>;

namespace {

T random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  return T::uniform(shape, rng, lo, hi);
}

}  // namespace

TEST_CASE("matmul identity cases") {
  auto eye = T::from_values({2, 2}, {1, 0, 0, 1});
  auto prod = matmul(eye, eye);
  CHECK(prod.values().isApprox(eye.values()));
  auto m = T::from_values({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(m, eye).values().isApprox(m.values()));
}

TEST_CASE("matmul gradient of sum equals row sums of b") {
  auto a = random_tensor({3, 4}, 1);
  auto b = random_tensor({4, 2}, 2);
  a.set_requires_grad(true);
  sum(matmul(a, b)).backward();
  for (Index i = 0; i < 3; ++i) {
    for (Index k = 0; k < 4; ++k) {
      CHECK(a.grad()[i * 4 + k] == doctest::Approx(b.at({k, 0}) + b.at({k, 1})));
    }
  }
  a.zero_grad();
  CHECK(oracle::grad_error([&] { return sum(matmul(a, b)); }, a) < 1e-6);
}

TEST_CASE("batched matmul broadcasts and differentiates both sides") {
  auto a = random_tensor({2, 3, 4}, 3);
  auto b = random_tensor({1, 4, 5}, 4);
  auto r = random_tensor({2, 3, 5}, 5);
  auto loss = [&] { return sum(mul(matmul(a, b), r)); };
  CHECK(matmul(a, b).shape() == Shape{2, 3, 5});
  CHECK(oracle::grad_error(loss, a) < 1e-6);
  CHECK(oracle::grad_error(loss, b) < 1e-6);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  auto a = T::zeros({2, 3});
  auto b = T::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("conv2d known values") {
  auto x = T::ones({1, 1, 5, 5});
  auto k = T::ones({1, 1, 3, 3});
  auto y = conv2d(x, k, 1, 1);
  CHECK(y.shape() == Shape{1, 1, 5, 5});
  CHECK(y.at({0, 0, 2, 2}) == 9.0);
  CHECK(y.at({0, 0, 0, 0}) == 4.0);
  CHECK(y.at({0, 0, 0, 2}) == 6.0);

  auto xr = random_tensor({2, 3, 4, 4}, 7);
  auto id = T::ones({1, 3, 1, 1});
  // 1x1 kernel of ones on one channel is the identity map.
  auto one = T::ones({1, 1, 1, 1});
  auto single = slice(xr, 1, 0, 1);
  CHECK(conv2d(single, one).values().isApprox(single.values()));
  CHECK(conv2d(xr, id).shape() == Shape{2, 1, 4, 4});
}

TEST_CASE("conv2d output extent and errors") {
  auto x = T::zeros({1, 2, 8, 8});
  CHECK(conv2d(x, T::zeros({4, 2, 3, 3}), 2, 1).shape() == Shape{1, 4, 4, 4});
  CHECK_THROWS_AS(conv2d(T::zeros({1, 2, 2, 2}), T::zeros({1, 2, 5, 5}), 1, 0), DimensionError);
  CHECK_THROWS_AS(conv2d(x, T::zeros({1, 2, 2, 2}), 1, 0), DimensionError);
  CHECK_THROWS_AS(conv2d(x, T::zeros({1, 3, 3, 3}), 1, 1), DimensionError);
}

TEST_CASE("conv2d gradients match finite differences") {
  auto x = random_tensor({2, 3, 5, 5}, 11);
  auto k = random_tensor({4, 3, 3, 3}, 12);
  auto bias = random_tensor({4}, 13);
  for (Index stride : {1, 2}) {
    auto r = random_tensor(conv2d(x, k, bias, stride, 1).shape(), 14);
    auto loss = [&] { return sum(mul(conv2d(x, k, bias, stride, 1), r)); };
    CHECK(oracle::grad_error(loss, k) < 1e-6);
    CHECK(oracle::grad_error(loss, x) < 1e-6);
    CHECK(oracle::grad_error(loss, bias) < 1e-6);
  }
  auto k1 = random_tensor({4, 3, 1, 1}, 15);
  auto r1 = random_tensor({2, 4, 5, 5}, 16);
  auto loss1 = [&] { return sum(mul(conv2d(x, k1), r1)); };
  CHECK(oracle::grad_error(loss1, k1) < 1e-6);
  CHECK(oracle::grad_error(loss1, x) < 1e-6);
}

TEST_CASE("softmax values") {
  auto c = softmax(T::constant({1, 4}, 2.5), -1);
  for (Index i = 0; i < 4; ++i) CHECK(c.values()[i] == doctest::Approx(0.25));
  auto p = softmax(T::from_values({2}, {0.0, std::log(3.0)}), 0);
  CHECK(p.values()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(p.values()[1] == doctest::Approx(0.75).epsilon(1e-12));

  auto x = random_tensor({3, 5}, 21, -3, 3);
  auto shifted = softmax(add_scalar(x, 7.0), -1);
  CHECK((shifted.values() - softmax(x, -1).values()).abs().maxCoeff() < 1e-6);

  auto f = random_tensor({2, 3, 4}, 22, -5, 5).cast<float>();
  auto rows = sum(softmax(f, 1), {1});
  CHECK((rows.values() - 1.0f).abs().maxCoeff() < 1e-5f);
  CHECK((softmax(f, 1).values() > 0.0f).all());
}

TEST_CASE("elementwise trivia") {
  CHECK(gelu(T::scalar(0.0)).item() == 0.0);
  auto up = upsample_bilinear(T::constant({1, 2, 3, 3}, 0.7));
  CHECK(up.shape() == Shape{1, 2, 6, 6});
  CHECK((up.values() - 0.7).abs().maxCoeff() < 1e-12);
  CHECK(leaky_relu(T::scalar(-1.0)).item() == doctest::Approx(-0.2));
  CHECK(softplus(T::scalar(0.0)).item() == doctest::Approx(std::log(2.0)));
  CHECK(softplus(T::scalar(1000.0)).item() == doctest::Approx(1000.0));
  CHECK_THROWS_AS(concat<double>({T::zeros({1, 2, 3}), T::zeros({1, 3, 4})}, 1), DimensionError);
}

TEST_CASE("every elementwise op passes finite-difference checks at 5 random points") {
  using Op = std::function<T(const T&)>;
  const std::vector<std::pair<const char*, Op>> unary = {
      {"gelu", [](const T& x) { return gelu(x); }},
      {"leaky_relu", [](const T& x) { return leaky_relu(x); }},
      {"sigmoid", [](const T& x) { return sigmoid(x); }},
      {"tanh", [](const T& x) { return bfr::tanh(x); }},
      {"softplus", [](const T& x) { return softplus(x); }},
      {"scale", [](const T& x) { return scale(x, 1.7); }},
      {"square", [](const T& x) { return square(x); }},
      {"exp", [](const T& x) { return bfr::exp(x); }},
      {"sqrt", [](const T& x) { return bfr::sqrt(add_scalar(x, 2.0)); }},
      {"log", [](const T& x) { return bfr::log(add_scalar(x, 2.0)); }},
      {"mean", [](const T& x) { return mean(x, {1}, true); }},
      {"sum", [](const T& x) { return sum(x, {0, 3}); }},
      {"reshape", [](const T& x) { return reshape(x, {4, 16}); }},
      {"transpose", [](const T& x) { return transpose(x, 1, 3); }},
      {"permute", [](const T& x) { return permute(x, {2, 0, 3, 1}); }},
      {"upsample_bilinear", [](const T& x) { return upsample_bilinear(x); }},
      {"upsample_nearest", [](const T& x) { return upsample_nearest(x); }},
      {"resize_bilinear", [](const T& x) { return resize_bilinear(x, 3, 7); }},
      {"avgpool_global", [](const T& x) { return avgpool_global(x); }},
      {"instance_norm", [](const T& x) { return instance_norm(x); }},
      {"roll", [](const T& x) { return roll(x, 2, 3); }},
      {"flip", [](const T& x) { return flip(x, 3); }},
      {"slice", [](const T& x) { return slice(x, 2, 1, 2); }},
      {"translate", [](const T& x) { return translate(x, {{1, -2}, {0, 3}}); }},
      {"softmax", [](const T& x) { return softmax(x, 2); }},
      {"take_last", [](const T& x) { return take_last(x, {3, 0, 0, 2}); }},
      {"abs", [](const T& x) { return bfr::abs(x); }},
  };
  for (const auto& [name, op] : unary) {
    for (std::uint64_t point = 0; point < 5; ++point) {
      auto x = random_tensor({2, 2, 4, 4}, 100 + point);
      auto r = random_tensor(op(x).shape(), 200 + point);
      const double err = oracle::grad_error([&] { return sum(mul(op(x), r)); }, x);
      INFO(name << " point " << point);
      CHECK(err < 1e-6);
    }
  }

  using BinOp = std::function<T(const T&, const T&)>;
  const std::vector<std::pair<const char*, BinOp>> binary = {
      {"add", [](const T& a, const T& b) { return add(a, b); }},
      {"sub", [](const T& a, const T& b) { return sub(a, b); }},
      {"mul", [](const T& a, const T& b) { return mul(a, b); }},
      {"div", [](const T& a, const T& b) { return div(a, add_scalar(b, 3.0)); }},
      {"concat", [](const T& a, const T& b) { return concat<double>({a, broadcast_to(b, a.shape())}, 1); }},
  };
  for (const auto& [name, op] : binary) {
    for (std::uint64_t point = 0; point < 5; ++point) {
      auto a = random_tensor({2, 3, 4}, 300 + point);
      auto b = random_tensor({3, 1}, 400 + point);  // broadcast operand
      auto r = random_tensor(op(a, b).shape(), 500 + point);
      auto loss = [&] { return sum(mul(op(a, b), r)); };
      INFO(name << " point " << point);
      CHECK(oracle::grad_error(loss, a) < 1e-6);
      CHECK(oracle::grad_error(loss, b) < 1e-6);
    }
  }
}

TEST_CASE("backward basics") {
  auto x = T::from_values({3}, {1, 2, 3});
  x.set_requires_grad(true);
  sum(x).backward();
  CHECK((x.grad() == 1.0).all());

  x.zero_grad();
  scale(sum(square(x)), 0.5).backward();
  CHECK(x.grad()[0] == 1.0);
  CHECK(x.grad()[1] == 2.0);
  CHECK(x.grad()[2] == 3.0);

  // Repeated backward without zero_grad accumulates.
  auto loss = scale(sum(square(x)), 0.5);
  loss.backward();
  CHECK(x.grad()[2] == 6.0);

  CHECK_THROWS_AS(square(x).backward(), ContractError);
}

TEST_CASE("backward populates every reachable requires_grad tensor") {
  auto a = T::from_values({2}, {1, -1});
  auto b = T::from_values({2}, {0.5, 0.5});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto mid = mul(a, b);
  auto dead = mul(slice(b, 0, 0, 1), T::zeros({1}));
  auto loss = add(sum(mid), sum(dead));
  loss.backward();
  CHECK(a.has_grad());
  CHECK(b.has_grad());
  CHECK(mid.has_grad());
  CHECK(dead.has_grad());
}

TEST_CASE("composite network matches finite differences") {
  auto x = random_tensor({1, 2, 4, 4}, 31);
  auto k = random_tensor({3, 2, 3, 3}, 32);
  auto w = random_tensor({4, 5}, 33);
  auto net = [&] {
    auto h = gelu(conv2d(x, k, 1, 1));  // [1,3,4,4]
    auto flat = reshape(h, {12, 4});
    return sum(mul(softmax(matmul(flat, w), -1), random_tensor({12, 5}, 34)));
  };
  CHECK(oracle::grad_error(net, x) < 1e-5);
  CHECK(oracle::grad_error(net, k) < 1e-5);
  CHECK(oracle::grad_error(net, w) < 1e-5);
}

TEST_CASE("linearity of backward") {
  auto x = random_tensor({2, 3}, 41);
  auto f = [&] { return sum(gelu(x)); };
  auto g = [&] { return sum(mul(x, bfr::tanh(x))); };
  const double a = 0.7, b = -1.3;
  auto gf = oracle::analytic_gradient(f, x);
  auto gg = oracle::analytic_gradient(g, x);
  auto combo = oracle::analytic_gradient([&] { return add(scale(f(), a), scale(g(), b)); }, x);
  CHECK((combo - (a * gf + b * gg)).abs().maxCoeff() < 1e-6);
}

TEST_CASE("no-grad guard stops recording") {
  auto x = T::from_values({2}, {1, 2});
  x.set_requires_grad(true);
  {
    NoGradGuard guard;
    CHECK_FALSE(square(x).requires_grad());
  }
  CHECK(square(x).requires_grad());
}

TEST_CASE("forward is deterministic") {
  Rng r1(5), r2(5);
  auto a = F::randn({2, 3, 8, 8}, r1);
  auto b = F::randn({2, 3, 8, 8}, r2);
  auto k = F::randn({4, 3, 3, 3}, r1);
  CHECK((a.values() == b.values()).all());
  auto y1 = gelu(conv2d(a, k, 1, 1));
  auto y2 = gelu(conv2d(b, k, 1, 1));
  CHECK((y1.values() == y2.values()).all());
}
