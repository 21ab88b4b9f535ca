#pragma once

#include <algorithm>

namespace sivqr {

// Piecewise-linear smoothed indicator for 1{v <= 0}. The window has unit
// half-width; callers pass v / h to apply a bandwidth.

inline double itilde(double v) {
  if (v <= -1.0) return 1.0;
  if (v >= 1.0) return 0.0;
  return 0.5 * (1.0 - v);
}

/// Derivative of itilde. Zero at the kinks v = +/-1.
inline double itilde_deriv(double v) {
  return (v > -1.0 && v < 1.0) ? -0.5 : 0.0;
}

/// G(v) = 1 - itilde(v), the smoothed CDF-type counterpart.
inline double smoothed_g(double v) {
  return std::max(0.0, std::min(1.0, 0.5 * (v + 1.0)));
}

struct SmoothingConstants {
  double one_minus_int_G2;  // 1 - int_{-1}^{1} G(v)^2 dv
  double int_Gprime_v2_sq;  // (int_{-1}^{1} G'(v) v^2 dv)^2
};

constexpr SmoothingConstants smoothing_constants() {
  return {1.0 / 3.0, 1.0 / 9.0};
}

}  // namespace sivqr
