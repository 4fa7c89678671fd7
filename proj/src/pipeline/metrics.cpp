#include "bfr/errors.hpp"
#include "bfr/pipeline.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>

namespace bfr {

namespace {

using Plane = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
void require_same(const Tensor<S>& a, const Tensor<S>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
}

// Valid-mode correlation with a separable kernel g.
Plane filter_valid(const Plane& x, const Eigen::VectorXd& g) {
  const Index k = g.size();
  const Index oh = x.rows() - k + 1, ow = x.cols() - k + 1;
  Plane rows(x.rows(), ow);
  for (Index j = 0; j < ow; ++j) rows.col(j) = x.middleCols(j, k) * g;
  Plane out(oh, ow);
  for (Index i = 0; i < oh; ++i) out.row(i) = g.transpose() * rows.middleRows(i, k);
  return out;
}

Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

template <typename S>
double psnr(const Tensor<S>& a, const Tensor<S>& b) {
  require_same(a, b, "psnr");
  // Differences on the [0, 1] scale are half those on [-1, 1].
  const double mse = ((a.values() - b.values()).template cast<double>() * 0.5).square().mean();
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

template <typename S>
double ssim(const Tensor<S>& a, const Tensor<S>& b) {
  require_same(a, b, "ssim");
  const Index h = a.dim(-2), w = a.dim(-1);
  const Index planes = a.numel() / (h * w);
  Index k = std::min<Index>(11, std::min(h, w));
  if (k % 2 == 0) --k;
  Eigen::VectorXd g(k);
  for (Index i = 0; i < k; ++i) {
    const double d = static_cast<double>(i - k / 2);
    g[i] = std::exp(-d * d / (2 * 1.5 * 1.5));
  }
  g /= g.sum();
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0;
  Index count = 0;
  for (Index p = 0; p < planes; ++p) {
    auto plane = [&](const Tensor<S>& t) {
      Plane m = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                    t.values().data() + p * h * w, h, w)
                    .template cast<double>();
      return Plane((m.array() + 1.0) * 0.5);
    };
    const Plane x = plane(a), y = plane(b);
    const Plane mx = filter_valid(x, g), my = filter_valid(y, g);
    const Plane sxx = filter_valid(x.cwiseProduct(x), g) - mx.cwiseProduct(mx);
    const Plane syy = filter_valid(y.cwiseProduct(y), g) - my.cwiseProduct(my);
    const Plane sxy = filter_valid(x.cwiseProduct(y), g) - mx.cwiseProduct(my);
    const auto num = (2 * mx.array() * my.array() + c1) * (2 * sxy.array() + c2);
    const auto den = (mx.array().square() + my.array().square() + c1) * (sxx.array() + syy.array() + c2);
    total += (num / den).sum();
    count += mx.size();
  }
  return total / static_cast<double>(count);
}

double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols() || a.rows() == 0 || b.rows() == 0) {
    throw DimensionError("frechet_distance: embedding sets must be non-empty with equal width");
  }
  auto fit = [](const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    mu = x.colwise().mean().transpose();
    const Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
    cov = x.rows() > 1 ? Eigen::MatrixXd(centered.transpose() * centered / double(x.rows() - 1))
                       : Eigen::MatrixXd::Zero(x.cols(), x.cols());
  };
  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd cov_a, cov_b;
  fit(a, mu_a, cov_a);
  fit(b, mu_b, cov_b);
  const Eigen::MatrixXd root_a = sqrt_psd(cov_a);
  const Eigen::MatrixXd cross = sqrt_psd(root_a * cov_b * root_a);
  const double d = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2 * cross.trace();
  return std::max(0.0, d);
}

double feature_frechet(const Tensor<float>& set_a, const Tensor<float>& set_b, FrozenFeatureNet<float>& net) {
  NoGradGuard guard;
  auto embed = [&net](const Tensor<float>& set) {
    const auto e = net.embed(set);
    return Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
               e.values().data(), e.dim(0), e.dim(1))
        .cast<double>()
        .eval();
  };
  return frechet_distance(embed(set_a), embed(set_b));
}

template double psnr(const Tensor<float>&, const Tensor<float>&);
template double psnr(const Tensor<double>&, const Tensor<double>&);
template double ssim(const Tensor<float>&, const Tensor<float>&);
template double ssim(const Tensor<double>&, const Tensor<double>&);

}  // namespace bfr
