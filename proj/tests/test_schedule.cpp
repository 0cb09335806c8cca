#include "sgdm/schedule.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace sgdm;

TEST(Planner, QuotedFigureValues) {
  const Schedule s = plan_from_lengths(1.0, 2.0, {3, 6, 21});
  ASSERT_EQ(s.size(), 3u);
  EXPECT_DOUBLE_EQ(s[0].alpha, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(s[1].alpha, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(s[2].alpha, 2.0 / 21.0);
  EXPECT_DOUBLE_EQ(s[0].beta, 0.6);
  EXPECT_DOUBLE_EQ(s[1].beta, 0.75);
  EXPECT_NEAR(s[2].beta, 21.0 / 23.0, 1e-15);
  EXPECT_EQ(s.total_length(), 30);
}

TEST(Planner, InvariantsHoldOnRandomPlans) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> U(0.01, 5.0);
  std::uniform_int_distribution<int> T(1, 50), n(1, 6);
  for (int t = 0; t < 500; ++t) {
    std::vector<std::int64_t> len(static_cast<std::size_t>(n(rng)));
    for (auto& l : len) l = T(rng);
    std::sort(len.begin(), len.end());
    const double A1 = U(rng), A2 = U(rng);
    const Schedule s = plan_from_lengths(A1, A2, len);
    for (std::size_t i = 0; i < s.size(); ++i) {
      EXPECT_NEAR(s.a1(i), A1, 1e-12 * A1);
      EXPECT_NEAR(s.a2(i), A2, 1e-12 * A2);
      if (i > 0) EXPECT_GE(s[i].beta, s[i - 1].beta);
    }
    const ValidationReport r = validate(s, 1.0, ValidationMode::practical);
    EXPECT_TRUE(r.practical_ok);
  }
}

TEST(Planner, RejectsDecreasingLengthsNamingTheStages) {
  try {
    plan_from_lengths(1.0, 2.0, {6, 3});
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("stage 1"), std::string::npos);
    EXPECT_NE(msg.find("stage 2"), std::string::npos);
  }
  EXPECT_THROW(plan_from_lengths(0.0, 2.0, {1}), std::invalid_argument);
  EXPECT_THROW(plan_from_lengths(1.0, -2.0, {1}), std::invalid_argument);
  EXPECT_THROW(plan_from_lengths(1.0, 2.0, {}), std::invalid_argument);
  EXPECT_THROW(plan_from_lengths(1.0, 2.0, {0, 3}), std::invalid_argument);
}

TEST(Schedule, ConstructorValidatesStages) {
  EXPECT_THROW(Schedule(std::vector<Stage>{}), std::invalid_argument);
  EXPECT_THROW(Schedule({{0.0, 0.5, 1}}), std::invalid_argument);
  EXPECT_THROW(Schedule({{0.1, 1.0, 1}}), std::invalid_argument);
  EXPECT_THROW(Schedule({{0.1, 0.5, 0}}), std::invalid_argument);
}

TEST(Schedule, Accessors) {
  const Schedule s({{0.5, 0.5, 2}, {0.25, 0.75, 3}});
  EXPECT_EQ(s.stage_of(1), 0u);
  EXPECT_EQ(s.stage_of(2), 0u);
  EXPECT_EQ(s.stage_of(3), 1u);
  EXPECT_EQ(s.stage_of(5), 1u);
  EXPECT_THROW(s.stage_of(6), std::out_of_range);
  EXPECT_EQ(s.stage_begin(1), 3);
  EXPECT_EQ(s.beta_per_iteration(), (std::vector<double>{0.5, 0.5, 0.75, 0.75, 0.75}));
  EXPECT_EQ(s.alpha_per_iteration(), (std::vector<double>{0.5, 0.5, 0.25, 0.25, 0.25}));
  EXPECT_DOUBLE_EQ(s.a1(1), 0.75);
  EXPECT_DOUBLE_EQ(s.a2(1), 0.75);
}

TEST(Validate, PracticalFlagsInconsistentProducts) {
  const Schedule s({{0.5, 0.5, 2}, {0.3, 0.75, 3}});
  const ValidationReport r = validate(s, 1.0, ValidationMode::practical);
  EXPECT_FALSE(r.at("A1_consistent").pass);
  EXPECT_FALSE(r.at("A2_consistent").pass);
  EXPECT_FALSE(r.practical_ok);
  EXPECT_FALSE(r.at("A1_theoretical").evaluated);
}

TEST(Validate, TheoreticalRegime) {
  const double L = 1.0;
  const double A1 = theoretical_a1(L);
  // beta_1 = 0.6 needs alpha_1 = A1 / 1.5; lengths scaled so beta^(2T) <= 1/2
  const Schedule s = plan_from_lengths(A1, 20.0 * A1, {30, 60, 210});
  EXPECT_NEAR(s[0].beta, 0.6, 1e-12);
  const ValidationReport r = validate(s, L, ValidationMode::theoretical);
  for (const auto& e : r.entries) EXPECT_TRUE(e.pass) << e.name << " margin " << e.margin;
  EXPECT_TRUE(r.theoretical_ok);

  // the figure plan is practical but fails the theoretical A1
  const ValidationReport f = validate(plan_from_lengths(1.0, 2.0, {3, 6, 21}), L, ValidationMode::theoretical);
  EXPECT_TRUE(f.practical_ok);
  EXPECT_FALSE(f.at("A1_theoretical").pass);
  EXPECT_FALSE(f.theoretical_ok);
}

TEST(Validate, A1ToleranceAdmitsFiveSignificantDigits) {
  const Schedule s = plan_from_lengths(0.029463, 20.0 * 0.029463, {30, 60, 210});
  EXPECT_TRUE(validate(s, 1.0, ValidationMode::theoretical).at("A1_theoretical").pass);
  const Schedule off = plan_from_lengths(0.0295, 20.0 * 0.0295, {30, 60, 210});
  EXPECT_FALSE(validate(off, 1.0, ValidationMode::theoretical).at("A1_theoretical").pass);
}

TEST(Caps, ClosedForms) {
  EXPECT_DOUBLE_EQ(max_stepsize_nonconvex(0.0, 2.0), 1.0 / 8.0);
  const double b = 0.9;
  const double t1 = 0.1 / (4.0 - 0.9 + 2.0 * 0.81);
  const double t2 = 0.1 / (2.0 * std::sqrt(2.0) * std::sqrt(0.9 + 0.81));
  EXPECT_DOUBLE_EQ(max_stepsize_nonconvex(b, 1.0), std::min(t1, t2));
  EXPECT_LE(max_stepsize_nonconvex(b, 1.0), max_stepsize_nonconvex_statement(b, 1.0));
  EXPECT_DOUBLE_EQ(max_stepsize_strongly_convex(0.0, 1.0, 1.0), std::min(1.0 / 5.0, 1.0 / 3.0));
  const double sc = max_stepsize_strongly_convex(0.9, 10.0, 1.0);
  const double den = 10.0 * (3.0 - 0.9 + 1.62 + 48.0 * std::sqrt(0.9) / 25.0 * (20.0 + 18.0) / 10.0);
  EXPECT_DOUBLE_EQ(sc, std::min(0.1 / 50.0, 0.1 / den));
  EXPECT_THROW(max_stepsize_nonconvex(1.0, 1.0), std::invalid_argument);
  EXPECT_THROW(max_stepsize_strongly_convex(0.5, 1.0, 2.0), std::invalid_argument);
}

TEST(Caps, ScaleInverselyWithL) {
  for (double b : {0.0, 0.3, 0.9, 0.99}) {
    EXPECT_NEAR(max_stepsize_nonconvex(b, 4.0), max_stepsize_nonconvex(b, 1.0) / 4.0, 1e-16);
    EXPECT_GT(max_stepsize_nonconvex(b, 1.0), 0.0);
  }
}

TEST(K0, MatchesDefinition) {
  EXPECT_EQ(k0(0.9), 6);
  EXPECT_EQ(k0(0.5), 1);
  EXPECT_EQ(k0(0.0), 0);
  for (double b : {0.3, 0.6, 0.75, 0.913, 0.99}) {
    const int k = k0(b);
    EXPECT_GE(std::pow(b, k), 0.5);
    EXPECT_LT(std::pow(b, k + 1), 0.5);
  }
}
