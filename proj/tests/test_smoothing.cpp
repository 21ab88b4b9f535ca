#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "sivqr/smoothing.hpp"
#include "test_support.hpp"

namespace sivqr {
namespace {

TEST(Smoothing, ItildePointValues) {
  EXPECT_DOUBLE_EQ(itilde(0.0), 0.5);
  EXPECT_DOUBLE_EQ(itilde(-2.0), 1.0);
  EXPECT_DOUBLE_EQ(itilde(0.5), 0.25);
  EXPECT_DOUBLE_EQ(itilde(-1.0), 1.0);
  EXPECT_DOUBLE_EQ(itilde(1.0), 0.0);
  EXPECT_DOUBLE_EQ(itilde(7.0), 0.0);
}

TEST(Smoothing, DerivativePointValues) {
  EXPECT_DOUBLE_EQ(itilde_deriv(0.0), -0.5);
  EXPECT_DOUBLE_EQ(itilde_deriv(3.0), 0.0);
  EXPECT_DOUBLE_EQ(itilde_deriv(-1.0), 0.0);
  EXPECT_DOUBLE_EQ(itilde_deriv(1.0), 0.0);
}

TEST(Smoothing, ConstantsAreExact) {
  constexpr auto c = smoothing_constants();
  EXPECT_EQ(c.one_minus_int_G2, 1.0 / 3.0);
  EXPECT_EQ(c.int_Gprime_v2_sq, 1.0 / 9.0);
}

TEST(Smoothing, ConstantsMatchQuadrature) {
  // Simpson for G^2 (continuous on the closed interval); Gauss-Legendre for
  // G'(v) v^2, whose derivative factor jumps at the endpoints.
  const double int_g2 = testing::simpson([](double v) { return smoothed_g(v) * smoothed_g(v); },
                                         -1.0, 1.0, 2000);
  const double int_gp_v2 = testing::gauss_legendre(
      [](double v) {
        const double d = 1e-4;  // smaller than the node-to-endpoint gap
        return (smoothed_g(v + d) - smoothed_g(v - d)) / (2 * d) * v * v;
      },
      -1.0, 1.0, 1000);
  constexpr auto c = smoothing_constants();
  EXPECT_NEAR(1.0 - int_g2, c.one_minus_int_G2, 1e-10);
  EXPECT_NEAR(int_gp_v2 * int_gp_v2, c.int_Gprime_v2_sq, 1e-10);
}

TEST(Smoothing, ComplementOfG) {
  for (double v = -3.0; v <= 3.0; v += 0.01) EXPECT_NEAR(itilde(v) + smoothed_g(v), 1.0, 1e-15);
}

TEST(SmoothingProperty, RangeMonotoneSymmetricLipschitz) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> U(-4.0, 4.0);
  for (int k = 0; k < 20000; ++k) {
    const double a = U(rng), b = U(rng);
    EXPECT_GE(itilde(a), 0.0);
    EXPECT_LE(itilde(a), 1.0);
    EXPECT_DOUBLE_EQ(itilde(a) + itilde(-a), 1.0);
    EXPECT_LE(std::abs(itilde(a) - itilde(b)), 0.5 * std::abs(a - b) + 1e-15);
    if (a <= b) {
      EXPECT_GE(itilde(a), itilde(b));
    }
  }
}

TEST(SmoothingProperty, FiniteDifferenceMatchesDerivative) {
  const double eps = 1e-6;
  for (double mag : {0.0, 0.3, 0.9}) {
    for (double v : {mag, -mag}) {
      const double fd = (itilde(v + eps) - itilde(v - eps)) / (2.0 * eps);
      EXPECT_NEAR(fd, itilde_deriv(v), 1e-8) << "v=" << v;
    }
  }
}

}  // namespace
}  // namespace sivqr
