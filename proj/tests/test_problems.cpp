#include "oracles.hpp"
#include "sgdm/problems.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace sgdm;

namespace {

Mat random_spd(int d, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> N(0.0, 1.0);
  Mat B(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) B(i, j) = N(rng);
  return B * B.transpose() + 0.5 * Mat::Identity(d, d);
}

std::filesystem::path temp_file(const std::string& name, const std::string& text) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST(Quadratic, SpectrumMatchesJacobi) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Mat A = random_spd(6, seed);
    const ProblemSpec p = make_quadratic(A, Vec::Zero(6));
    const auto ev = oracle::jacobi_eigenvalues(A);
    EXPECT_NEAR(p.L, ev.back(), 1e-8 * ev.back());
    EXPECT_NEAR(p.mu, ev.front(), 1e-8 * ev.back());
  }
}

TEST(Quadratic, DiagonalConstants) {
  Mat A = Mat::Zero(2, 2);
  A(0, 0) = 1.0;
  A(1, 1) = 10.0;
  const ProblemSpec p = make_quadratic(A, Vec::Zero(2));
  EXPECT_NEAR(p.L, 10.0, 1e-9);
  EXPECT_NEAR(p.mu, 1.0, 1e-9);
  EXPECT_DOUBLE_EQ(p.f_star, 0.0);
  EXPECT_DOUBLE_EQ(objective(p, Vec::Ones(2)), 5.5);
}

TEST(Quadratic, GradientMatchesFiniteDifferences) {
  const Mat A = random_spd(5, 7);
  Vec b(5);
  b << 1, -2, 0.5, 3, -1;
  const ProblemSpec p = make_quadratic(A, b);
  Vec x(5);
  x << 0.3, -0.1, 2.0, 0.7, -1.2;
  const Vec fd = oracle::fd_gradient([&](const Vec& v) { return objective(p, v); }, x);
  EXPECT_LT((full_gradient(p, x) - fd).norm(), 1e-6 * (1.0 + fd.norm()));
  EXPECT_LT(full_gradient(p, *p.x_star).norm(), 1e-9);
  EXPECT_NEAR(objective(p, *p.x_star), p.f_star, 1e-12);
}

TEST(Quadratic, RejectsBadMatrices) {
  Mat ns(2, 2);
  ns << 1, 2, 0, 1;
  EXPECT_THROW(make_quadratic(ns, Vec::Zero(2)), std::invalid_argument);
  Mat indefinite(2, 2);
  indefinite << 1, 0, 0, -1;
  EXPECT_THROW(make_quadratic(indefinite, Vec::Zero(2)), std::invalid_argument);
  EXPECT_THROW(make_quadratic(Mat::Identity(2, 2), Vec::Zero(3)), std::invalid_argument);
  const ProblemSpec p = make_quadratic(Mat::Identity(2, 2), Vec::Zero(2));
  EXPECT_THROW(objective(p, Vec::Zero(3)), std::invalid_argument);
}

TEST(LeastSquares, GradientAndSmoothness) {
  auto D = std::make_shared<const Dataset>(make_synthetic_regression(200, 4, 0.1, 3));
  const ProblemSpec p = make_least_squares(D);
  const Vec x = Vec::LinSpaced(4, -1.0, 1.0);
  const Vec fd = oracle::fd_gradient([&](const Vec& v) { return objective(p, v); }, x);
  EXPECT_LT((full_gradient(p, x) - fd).norm(), 1e-6 * (1.0 + fd.norm()));
  const auto ev = oracle::jacobi_eigenvalues(D->X.transpose() * D->X / 200.0);
  EXPECT_NEAR(p.L, ev.back(), 1e-8 * ev.back());
  EXPECT_NEAR(p.mu, ev.front(), 1e-8 * ev.back());
  EXPECT_LT(full_gradient(p, *p.x_star).norm(), 1e-10);
}

TEST(Logistic, GradientMatchesFiniteDifferences) {
  const ProblemSpec p = make_logistic(make_synthetic_classification(300, 5, 1.0, 4), 1e-2);
  Vec x(5);
  x << 0.5, -0.3, 0.1, 0.0, 1.0;
  const Vec fd = oracle::fd_gradient([&](const Vec& v) { return objective(p, v); }, x);
  EXPECT_LT((full_gradient(p, x) - fd).norm(), 1e-7 * (1.0 + fd.norm()));
}

TEST(Logistic, SmoothnessDominatesHessian) {
  const Dataset D = make_synthetic_classification(400, 6, 1.5, 5);
  const ProblemSpec p = make_logistic(D, 1e-3);
  const auto top = oracle::jacobi_eigenvalues(D.X.transpose() * D.X).back();
  EXPECT_NEAR(p.L, top / (4.0 * 400) + 1e-3, 1e-8 * p.L);
  EXPECT_DOUBLE_EQ(p.mu, 1e-3);
  // Hessian at a probe point is below L
  const Vec x = Vec::Constant(6, 0.2);
  Vec w(400);
  for (int i = 0; i < 400; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-D.y[i] * D.X.row(i).dot(x)));
    w[i] = s * (1.0 - s);
  }
  Mat H = D.X.transpose() * w.asDiagonal() * D.X / 400.0;
  H.diagonal().array() += 1e-3;
  EXPECT_LE(oracle::jacobi_eigenvalues(H).back(), p.L);
}

TEST(Logistic, OptimumMatchesAcceleratedGradient) {
  const ProblemSpec p = make_logistic(make_synthetic_classification(256, 4, 2.0, 6), 5e-3);
  const Vec xo = oracle::nesterov_minimize(p, Vec::Constant(4, 0.1));
  EXPECT_NEAR(objective(p, xo), p.f_star, 1e-12);
  EXPECT_LT((xo - *p.x_star).norm(), 1e-6);
}

TEST(Logistic, RejectsBadInputs) {
  const Dataset D = make_synthetic_classification(20, 2, 1.0, 1);
  EXPECT_THROW(make_logistic(D, 0.0), std::invalid_argument);
  Dataset R = make_synthetic_regression(20, 2, 0.1, 1);
  EXPECT_THROW(make_logistic(R, 1e-3), std::invalid_argument);
}

TEST(Synthetic, BalancedAndDeterministic) {
  const Dataset a = make_synthetic_classification(101, 3, 2.0, 9);
  const Dataset b = make_synthetic_classification(101, 3, 2.0, 9);
  EXPECT_EQ(a.X, b.X);
  EXPECT_EQ(a.y, b.y);
  EXPECT_EQ((a.y.array() > 0).count(), 51);
  const Dataset c = make_synthetic_classification(101, 3, 2.0, 10);
  EXPECT_NE(a.X, c.X);
}

TEST(CsvDataset, HeaderAndErrors) {
  const auto ok = temp_file("sgdm_ok.csv", "f1,f2,label\n1,2,1\n3,4,-1\n");
  const Dataset D = load_csv_dataset(ok.string(), true);
  EXPECT_EQ(D.n(), 2);
  EXPECT_EQ(D.d(), 2);
  EXPECT_EQ(D.y[1], -1.0);
  const auto ragged = temp_file("sgdm_ragged.csv", "1,2,1\n3,-1\n");
  EXPECT_THROW(load_csv_dataset(ragged.string(), true), std::invalid_argument);
  const auto bad = temp_file("sgdm_bad.csv", "1,2,1\n3,x,1\n");
  EXPECT_THROW(load_csv_dataset(bad.string(), true), std::invalid_argument);
  EXPECT_THROW(load_csv_dataset("/nonexistent/file.csv", true), std::invalid_argument);
}

TEST(Noise, AdditiveVarianceIsExact) {
  const ProblemSpec p = make_quadratic(Mat::Identity(3, 3), Vec::Zero(3));
  const NoiseModel nm = NoiseModel::additive(2.0);
  Rng rng(11);
  const Vec x = Vec::Ones(3);
  const Vec g = full_gradient(p, x);
  GradientOracle o(p, nm);
  Vec gt(3), mean = Vec::Zero(3);
  const int n = 40000;
  double s = 0.0, s2 = 0.0;
  for (int t = 0; t < n; ++t) {
    o.sample(x, g, rng, gt);
    const double e = (gt - g).squaredNorm();
    s += e;
    s2 += e * e;
    mean += gt;
  }
  const double m = s / n, se = std::sqrt((s2 / n - m * m) / n);
  EXPECT_NEAR(m, 2.0, 4.0 * se);
  EXPECT_LT((mean / n - g).norm(), 0.05);
}

TEST(Noise, ZeroVarianceIsExactGradient) {
  const ProblemSpec p = make_quadratic(Mat::Identity(2, 2), Vec::Zero(2));
  Rng rng(1);
  const Vec x = Vec::Constant(2, 3.0);
  EXPECT_EQ(stochastic_gradient(p, NoiseModel::additive(0.0), x, rng), full_gradient(p, x));
}

TEST(Noise, MinibatchUnbiasedWithExactVariance) {
  const ProblemSpec p = make_logistic(make_synthetic_classification(60, 3, 1.0, 2), 1e-2);
  const NoiseModel nm = NoiseModel::minibatch(8);
  const Vec x = Vec::Constant(3, 0.3);
  const Vec g = full_gradient(p, x);
  GradientOracle o(p, nm);
  Rng rng(5);
  Vec gt(3), mean = Vec::Zero(3);
  const int n = 40000;
  double s = 0.0, s2 = 0.0;
  for (int t = 0; t < n; ++t) {
    o.sample(x, g, rng, gt);
    mean += gt;
    const double e = (gt - g).squaredNorm();
    s += e;
    s2 += e * e;
  }
  const double m = s / n, se = std::sqrt((s2 / n - m * m) / n);
  EXPECT_NEAR(m, oracle::minibatch_variance(p, x, 8), 4.0 * se);
  EXPECT_LT((mean / n - g).norm(), 4.0 * std::sqrt(m / n) * 3.0);
}

TEST(Noise, FullBatchAndOversizedBatch) {
  const ProblemSpec p = make_least_squares(std::make_shared<const Dataset>(make_synthetic_regression(16, 2, 0.1, 1)));
  Rng rng(1);
  const Vec x = Vec::Ones(2);
  const Vec gt = stochastic_gradient(p, NoiseModel::minibatch(16), x, rng);
  EXPECT_LT((gt - full_gradient(p, x)).norm(), 1e-12);
  EXPECT_THROW(GradientOracle(p, NoiseModel::minibatch(17)), std::invalid_argument);
  const ProblemSpec q = make_quadratic(Mat::Identity(2, 2), Vec::Zero(2));
  EXPECT_THROW(GradientOracle(q, NoiseModel::minibatch(1)), std::invalid_argument);
  EXPECT_THROW(NoiseModel::additive(-1.0), std::invalid_argument);
}

TEST(Noise, EstimatedCertificateCoversTrueVariance) {
  const ProblemSpec p = make_quadratic(Mat::Identity(2, 2), Vec::Zero(2));
  Rng rng(3);
  const double s2 = estimate_sigma2(p, NoiseModel::additive(1.5), {Vec::Zero(2), Vec::Ones(2)}, 20000, rng);
  EXPECT_GE(s2, 1.5 * (1.0 - 4.0 / std::sqrt(20000.0)));
  EXPECT_LE(s2, 1.5 * 1.1);
}
