#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "sivqr/core_model.hpp"
#include "test_support.hpp"

namespace sivqr {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Matrix col(std::initializer_list<double> v) {
  Matrix m(static_cast<Index>(v.size()), 1);
  Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

EstimationProblem intercept_only(const Vector& y, double tau) {
  return build_problem(y, Matrix(y.size(), 0), Matrix(y.size(), 0), Matrix(y.size(), 0),
                       std::nullopt, tau, true);
}

TEST(CoreModel, QuantileNormalization) {
  EXPECT_DOUBLE_EQ(normalize_quantile(0.5), 0.5);
  EXPECT_DOUBLE_EQ(normalize_quantile(50), 0.5);
  EXPECT_DOUBLE_EQ(normalize_quantile(1), 0.01);
  EXPECT_DOUBLE_EQ(normalize_quantile(99.5), 0.995);
  EXPECT_THROW(normalize_quantile(0.0), InputError);
  EXPECT_THROW(normalize_quantile(100.0), InputError);
  EXPECT_THROW(normalize_quantile(-3.0), InputError);
}

TEST(CoreModel, ColumnCountsAndLayout) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> N;
  const Index n = 40;
  Matrix exog(n, 3), endog(n, 1), instr(n, 3);
  Vector y(n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < 3; ++j) exog(i, j) = N(rng), instr(i, j) = N(rng);
    endog(i, 0) = N(rng);
    y(i) = N(rng);
  }
  const auto prob = build_problem(y, exog, endog, instr, std::nullopt, 50, true);
  EXPECT_EQ(prob.p(), 5);
  EXPECT_EQ(prob.q(), 7);
  EXPECT_DOUBLE_EQ(prob.tau(), 0.5);
  EXPECT_EQ(prob.constant_col(), 4);
  EXPECT_TRUE(prob.is_endogenous(0));
  EXPECT_FALSE(prob.is_endogenous(1));
  // X = [endog | exog | 1], Z = [exog | instr | 1]
  EXPECT_EQ(prob.X().col(0), endog.col(0));
  EXPECT_EQ(prob.X().block(0, 1, n, 3), exog);
  EXPECT_EQ(prob.Z().block(0, 0, n, 3), exog);
  EXPECT_EQ(prob.Z().block(0, 3, n, 3), instr);
  EXPECT_TRUE((prob.X().col(4).array() == 1.0).all());
  EXPECT_TRUE((prob.Z().col(6).array() == 1.0).all());
  EXPECT_TRUE((prob.w().array() == 1.0).all());
}

TEST(CoreModel, ListwiseDeletion) {
  Vector y(6);
  y << 1, 2, kNaN, 4, 5, 6;
  Matrix exog = col({1, 0, 3, 1, kNaN, 2});
  Matrix endog = col({2, 1, 0, 3, 1, 5});
  Matrix instr = col({0.5, 1, 2, 2.5, 4, 1});
  const auto prob = build_problem(y, exog, endog, instr, std::nullopt, 0.5, true);
  EXPECT_EQ(prob.n(), 4);
  Vector kept(4);
  kept << 1, 2, 4, 6;
  EXPECT_EQ(prob.y(), kept);

  // Rebuilding from the cleaned data is a no-op.
  const Matrix ex2 = prob.X().col(1), en2 = prob.X().col(0), in2 = prob.Z().col(1);
  const auto again = build_problem(prob.y(), ex2, en2, in2, std::nullopt, 0.5, true);
  EXPECT_EQ(again.y(), prob.y());
  EXPECT_EQ(again.X(), prob.X());
  EXPECT_EQ(again.Z(), prob.Z());
  EXPECT_EQ(again.w(), prob.w());
}

TEST(CoreModel, MissingWeightDropsRow) {
  Vector y(4), w(4);
  y << 1, 2, 3, 4;
  w << 1, kNaN, 2, 1;
  const auto prob = build_problem(y, col({1, 2, 0, 1}), Matrix(4, 0), Matrix(4, 0), w, 0.3, true);
  EXPECT_EQ(prob.n(), 3);
  EXPECT_DOUBLE_EQ(prob.w()(1), 2.0);
}

TEST(CoreModel, BuildErrors) {
  Vector y(4);
  y << 1, 2, 3, 4;
  const Matrix none(4, 0);
  // underidentified: one endogenous column, no excluded instrument
  EXPECT_THROW(build_problem(y, none, col({1, 2, 3, 5}), none, std::nullopt, 0.5, true),
               InputError);
  EXPECT_THROW(build_problem(y, none, none, none, std::nullopt, 1.5e2, true), InputError);
  EXPECT_THROW(build_problem(y, col({1, 2, 3}), none, none, std::nullopt, 0.5, true),
               InputError);
  Vector all_missing = Vector::Constant(4, kNaN);
  EXPECT_THROW(build_problem(all_missing, none, none, none, std::nullopt, 0.5, true),
               InputError);
  EXPECT_THROW(build_problem(y, col({0, 0, 0, 0}), none, none, std::nullopt, 0.5, true),
               InputError);
  Matrix dup(4, 2);
  dup << 1, 1, 2, 2, 3, 3, 5, 5;
  EXPECT_THROW(build_problem(y, dup, none, none, std::nullopt, 0.5, true), InputError);
  // an exogenous column equal to the constant duplicates it
  EXPECT_THROW(build_problem(y, col({1, 1, 1, 1}), none, none, std::nullopt, 0.5, true),
               InputError);
  Vector w(4);
  w << 1, -1, 1, 1;
  EXPECT_THROW(build_problem(y, none, none, none, w, 0.5, true), InputError);
  EXPECT_THROW(build_problem(y, none, none, none, Vector(Vector::Zero(4)), 0.5, true),
               InputError);
}

TEST(CoreModel, ProblemInvariantsEnforced) {
  Vector y(3);
  y << 1, 2, 3;
  Matrix X = Matrix::Ones(3, 1), Z = Matrix::Ones(3, 1);
  Vector w = Vector::Ones(3);
  EXPECT_NO_THROW(EstimationProblem(y, X, Z, w, 0.5, {}, true));
  EXPECT_THROW(EstimationProblem(y, X, Z, w, 0.0, {}, true), InputError);
  EXPECT_THROW(EstimationProblem(y, X, Z, w, 1.0, {}, true), InputError);
  Vector yi = y;
  yi(1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(EstimationProblem(yi, X, Z, w, 0.5, {}, true), InputError);
  Matrix X2(3, 1);
  X2 << 1, 2, 4;
  // exogenous column missing from Z
  EXPECT_THROW(EstimationProblem(y, X2, Z, w, 0.5, {}, false), InputError);
  EXPECT_NO_THROW(EstimationProblem(y, X2, Z, w, 0.5, {0}, false));
  Matrix Xwide = Matrix::Ones(3, 4);
  EXPECT_THROW(EstimationProblem(y, Xwide, Matrix::Ones(3, 4), w, 0.5, {}, false), InputError);
}

TEST(CoreModel, UnsmoothedMomentExamples) {
  Vector y(4);
  y << 1, 2, 3, 4;
  const auto prob = intercept_only(y, 0.5);
  EXPECT_DOUBLE_EQ(unsmoothed_moments(prob, Vector::Constant(1, 2.5))(0), 0.0);
  EXPECT_DOUBLE_EQ(unsmoothed_moments(prob, Vector::Constant(1, 5.0))(0), 0.5);
  EXPECT_DOUBLE_EQ(unsmoothed_moments(prob, Vector::Constant(1, 0.0))(0), -0.5);
}

TEST(CoreModel, UnsmoothedMomentHandSum) {
  // y = (1, 3, 2), x = (0, 1, 2), constant; beta = (1, 0.5) -> fitted (0.5, 1.5, 2.5)
  // residuals (0.5, 1.5, -0.5): indicators (0, 0, 1); tau = 0.25
  Vector y(3);
  y << 1, 3, 2;
  const auto prob = build_problem(y, col({0, 1, 2}), Matrix(3, 0), Matrix(3, 0), std::nullopt,
                                  0.25, true);
  Vector beta(2);
  beta << 1, 0.5;
  const Vector m = unsmoothed_moments(prob, beta);
  // x entry: (0*(-.25) + 1*(-.25) + 2*(.75)) / 3; constant: (-.25 - .25 + .75) / 3
  EXPECT_DOUBLE_EQ(m(0), 1.25 / 3);
  EXPECT_DOUBLE_EQ(m(1), 0.25 / 3);
}

TEST(CoreModelProperty, MomentsScaleWithInstrumentColumn) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto prob = testing::random_instance(60, 1, 1, 2, seed, 0.3);
    std::mt19937_64 rng(seed + 100);
    std::normal_distribution<double> N;
    Vector beta(prob.p());
    for (Index j = 0; j < prob.p(); ++j) beta(j) = N(rng);
    const Vector m = unsmoothed_moments(prob, beta);
    for (Index k = 0; k < prob.q(); ++k) {
      Matrix Z2 = prob.Z();
      Z2.col(k) *= 2.0;
      // keep the exogenous column visible in Z when it is the one doubled
      Matrix Zaug(prob.n(), prob.q() + 1);
      Zaug << Z2, prob.Z().col(k);
      const EstimationProblem scaled(prob.y(), prob.X(), Zaug, prob.w(), prob.tau(),
                                     prob.endog_idx(), prob.has_constant());
      const Vector m2 = unsmoothed_moments(scaled, beta);
      for (Index j = 0; j < prob.q(); ++j)
        EXPECT_NEAR(m2(j), (j == k ? 2.0 : 1.0) * m(j), 1e-14);
    }
  }
}

TEST(CoreModelProperty, MomentBounds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const double tau = 0.1 + 0.04 * static_cast<double>(seed);
    const auto prob = testing::random_instance(50, 1, 1, 1, seed, tau, true, true);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> N(0.0, 3.0);
    Vector beta(prob.p());
    for (Index j = 0; j < prob.p(); ++j) beta(j) = N(rng);
    const Vector m = unsmoothed_moments(prob, beta);
    const double wmax = prob.w().maxCoeff();
    for (Index j = 0; j < prob.q(); ++j) {
      const double zmax = prob.Z().col(j).cwiseAbs().maxCoeff();
      const double bound = std::max(tau, 1 - tau) * zmax * wmax;
      EXPECT_LE(std::abs(m(j)), bound + 1e-15);
    }
    // constant column is nonnegative: the tighter one-sided bounds apply
    const Index c = prob.q() - 1;
    EXPECT_GE(m(c), -tau * wmax - 1e-15);
    EXPECT_LE(m(c), (1 - tau) * wmax + 1e-15);
  }
}

TEST(CoreModel, DerivedProblemsKeepDesign) {
  const auto prob = testing::random_instance(30, 1, 0, 1, 1, 0.5);
  const auto p2 = prob.with_tau(0.75);
  EXPECT_DOUBLE_EQ(p2.tau(), 0.75);
  EXPECT_EQ(p2.X(), prob.X());
  const auto p3 = prob.with_weights(Vector::Constant(30, 2.0));
  EXPECT_DOUBLE_EQ(p3.w().sum(), 60.0);
  EXPECT_THROW(prob.with_weights(Vector::Zero(30)), InputError);
}

}  // namespace
}  // namespace sivqr
