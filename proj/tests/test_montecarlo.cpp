#include "sgdm/montecarlo.hpp"

#include <gtest/gtest.h>

using namespace sgdm;

namespace {

ProblemSpec diag_quadratic() {
  Mat A = Mat::Zero(2, 2);
  A(0, 0) = 1.0;
  A(1, 1) = 10.0;
  return make_quadratic(A, Vec::Zero(2));
}

}  // namespace

TEST(Moments, PushAndMergeMatchTwoPass) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> N(3.0, 2.0);
  std::vector<double> xs(1000);
  for (double& x : xs) x = N(rng);
  MomentTable a(1), b(1), all(1);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double v[1] = {xs[i]};
    (i < 300 ? a : b).push(v);
    all.push(v);
  }
  a.merge(b);
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= 1000.0;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  EXPECT_NEAR(a.mean[0], mean, 1e-12);
  EXPECT_NEAR(a.var(0), ss / 999.0, 1e-10);
  EXPECT_NEAR(all.var(0), ss / 999.0, 1e-10);
  EXPECT_NEAR(a.se(0), std::sqrt(ss / 999.0 / 1000.0), 1e-12);
  MomentTable empty(1);
  empty.merge(a);
  EXPECT_EQ(empty.n, 1000u);
  EXPECT_DOUBLE_EQ(empty.mean[0], a.mean[0]);
}

TEST(Collect, IndependentOfWorkerCount) {
  auto fn = [](std::uint64_t seed, std::vector<double>& row) {
    Rng rng(seed);
    std::normal_distribution<double> N(0.0, 1.0);
    row[0] = N(rng);
    row[1] = row[0] * row[0];
  };
  const MomentTable one = mc_collect(1000, 7, 2, fn, 1);
  const MomentTable three = mc_collect(1000, 7, 2, fn, 3);
  EXPECT_EQ(one.n, 1000u);
  EXPECT_EQ(one.mean, three.mean);
  EXPECT_EQ(one.m2, three.m2);
}

TEST(Collect, PropagatesTrialErrors) {
  auto fn = [](std::uint64_t seed, std::vector<double>&) {
    if (seed == 100) throw std::runtime_error("boom");
  };
  EXPECT_THROW(mc_collect(200, 1, 1, fn, 2), std::runtime_error);
}

TEST(MomentumVariance, ZeroNoiseGivesZero) {
  const ProblemSpec p = diag_quadratic();
  const auto r = mc_momentum_variance(p, NoiseModel::additive(0.0), Vec::Ones(2), Schedule::constant(0.02, 0.9, 20), {100, 1, 1});
  for (double e : r.estimate) EXPECT_EQ(e, 0.0);
}

TEST(MomentumVariance, FixedBetaAttainsClosedForm) {
  const ProblemSpec p = diag_quadratic();
  McOptions opt;
  opt.n_mc = 4000;
  const auto r = mc_momentum_variance(p, NoiseModel::additive(1.0), Vec::Ones(2), Schedule::constant(0.02, 0.9, 40), opt);
  for (const CheckResult& c : r.rows()) EXPECT_TRUE(c.pass) << "k=" << c.k << " est " << c.lhs << " bound " << c.rhs;
  EXPECT_NEAR(r.bound.back(), 0.1 / 1.9 * (1.0 - std::pow(0.9, 80.0)), 1e-15);
}

TEST(MomentumVariance, MultistageRowsWithinBounds) {
  const ProblemSpec p = diag_quadratic();
  const Schedule sched = plan_from_lengths(theoretical_a1(p.L), 20.0 * theoretical_a1(p.L), {30, 60, 210});
  McOptions opt;
  opt.n_mc = 1000;
  const auto r = mc_momentum_variance(p, NoiseModel::additive(1.0), Vec::Ones(2), sched, opt);
  const auto rows = r.rows("ms");
  EXPECT_EQ(rows.size(), 2 * 300u - 1);
  for (const CheckResult& c : rows) EXPECT_TRUE(c.pass) << c.check << " k=" << c.k;
}

TEST(Descent, SmallRunDominated) {
  const ProblemSpec p = diag_quadratic();
  const double a = 0.5 * max_stepsize_nonconvex(0.9, p.L);
  McOptions opt;
  opt.n_mc = 500;
  const DescentResult r = mc_descent_check(p, NoiseModel::additive(1.0), Vec::Ones(2), a, 0.9, 60, opt);
  for (const CheckResult& c : r.descent_rows()) EXPECT_TRUE(c.pass) << "k=" << c.k << " margin " << c.margin;
  for (const CheckResult& c : r.thm1_rows({15, 30, 60})) EXPECT_TRUE(c.pass) << "k=" << c.k;
  EXPECT_DOUBLE_EQ(r.f1_gap, 5.5);
  EXPECT_THROW(mc_descent_check(p, NoiseModel::additive(1.0), Vec::Ones(2), 1.0, 0.9, 10, opt), std::invalid_argument);
}

TEST(Descent, NoiselessMarginsAreDeterministic) {
  const ProblemSpec p = diag_quadratic();
  const double a = 0.5 * max_stepsize_nonconvex(0.5, p.L);
  const DescentResult r = mc_descent_check(p, NoiseModel::additive(0.0), Vec::Ones(2), a, 0.5, 40, {64, 1, 1});
  for (std::size_t i = 0; i < r.margin.size(); ++i) {
    EXPECT_NEAR(r.margin_se[i], 0.0, 1e-15);
    EXPECT_GE(r.margin[i], -1e-13);
  }
}

TEST(StronglyConvexBound, SmallRunDominated) {
  const ProblemSpec p = diag_quadratic();
  const double a = 0.5 * max_stepsize_strongly_convex(0.9, p.L, p.mu);
  McOptions opt;
  opt.n_mc = 300;
  const StronglyConvexResult r = mc_theorem2(p, NoiseModel::additive(1.0), Vec::Ones(2), a, 0.9, 1500, opt);
  EXPECT_EQ(r.k0, 6);
  for (const CheckResult& c : r.rows()) ASSERT_TRUE(c.pass) << "k=" << c.k;
  EXPECT_EQ(r.rows().size(), 1500u - 5u);
}

TEST(StronglyConvexBound, FitRecoversSyntheticRate) {
  StronglyConvexResult r;
  r.k0 = 6;
  for (int k = 1; k <= 400; ++k) r.fx_gap.push_back(5.0 * std::pow(0.95, k) + 1e-4);
  fit_transient(r);
  EXPECT_NEAR(r.fitted_slope, std::log(0.95), 1e-3);
  EXPECT_GT(r.fit_end, r.fit_begin + 100);
  EXPECT_NEAR(r.plateau, 1e-4, 1e-7);
}

TEST(MultistageBound, TheoreticalPlanDominated) {
  const ProblemSpec p = diag_quadratic();
  const Schedule sched = plan_from_lengths(theoretical_a1(p.L), 20.0 * theoretical_a1(p.L), {30, 60, 210});
  McOptions opt;
  opt.n_mc = 500;
  const MultistageBoundResult r = mc_theorem3(p, NoiseModel::additive(1.0), Vec::Ones(2), sched, opt);
  EXPECT_TRUE(r.row().pass) << r.aggregate << " vs " << r.bound;
  ASSERT_EQ(r.stage_means.size(), 3u);
  EXPECT_NEAR((r.stage_means[0] + r.stage_means[1] + r.stage_means[2]) / 3.0, r.aggregate, 1e-12 * r.aggregate);
}
