#pragma once

#include <cmath>
#include <numbers>

#include <boost/math/special_functions/erf.hpp>

namespace sivqr::normal {

inline double pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

/// Derivative of the standard normal density, -x * phi(x).
inline double pdf_deriv(double x) { return -x * pdf(x); }

inline double cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

/// Inverse of the standard normal CDF; p must lie in (0, 1).
inline double quantile(double p) {
  return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p);
}

}  // namespace sivqr::normal
