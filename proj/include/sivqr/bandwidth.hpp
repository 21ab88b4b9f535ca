#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "sivqr/core_model.hpp"
#include "sivqr/error.hpp"
#include "sivqr/normal.hpp"
#include "sivqr/projection.hpp"
#include "sivqr/see_solver.hpp"

namespace sivqr {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Floor on the denominators of the Gaussian-reference formulas; below it
/// the corresponding bandwidth is reported as +inf.
inline constexpr double kSingularFloor = 1e-12;

/// Sample quantile with linear interpolation between order statistics.
inline double sample_quantile(std::vector<double> v, double prob) {
  if (v.empty()) throw InputError("sample_quantile: empty sample");
  std::sort(v.begin(), v.end());
  const double pos = prob * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

inline double sample_sd(const Vector& v) {
  const double mean = v.mean();
  return std::sqrt((v.array() - mean).square().sum() / static_cast<double>(v.size() - 1));
}

/// min(SD, IQR / 1.349). Falls back to the SD when the IQR is zero.
inline double robust_sigma(const Vector& resid) {
  if (resid.size() < 2) throw InputError("robust_sigma: need at least two residuals");
  if ((resid.array() == resid(0)).all())
    throw NumericalError("residuals are all identical; scale cannot be estimated");
  const double sd = sample_sd(resid);
  std::vector<double> v(resid.data(), resid.data() + resid.size());
  const double iqr = sample_quantile(v, 0.75) - sample_quantile(v, 0.25);
  const double iqr_sigma = iqr / 1.349;
  if (iqr_sigma <= 0.0) return sd;
  return std::min(sd, iqr_sigma);
}

/// Pointwise Gaussian-reference bandwidth for estimating the density at zero.
inline double s_star(Index n, double sigma, double tau) {
  const double zq = normal::quantile(tau);
  const double curv = (zq * zq - 1.0) * (zq * zq - 1.0);
  if (curv < kSingularFloor) return kInf;
  return 0.776 * std::pow(static_cast<double>(n), -0.2) * sigma *
         std::pow(normal::pdf(zq) * curv, -0.2);
}

/// Gaussian-reference bandwidth for estimating the density derivative at zero.
inline double b_star(Index n, double sigma, double tau) {
  const double zq = normal::quantile(tau);
  const double t = 3.0 - zq * zq;
  const double denom = normal::pdf(zq) * zq * zq * t * t;
  if (denom < kSingularFloor) return kInf;
  return std::pow(static_cast<double>(n), -1.0 / 7.0) * sigma *
         std::pow(0.423 / denom, 1.0 / 7.0);
}

/// Gaussian-kernel density estimate at zero: (1/(ns)) sum phi(-v_i/s).
inline double kde_f0(const Vector& resid, double s) {
  double acc = 0.0;
  for (Index i = 0; i < resid.size(); ++i) acc += normal::pdf(-resid(i) / s);
  return acc / (static_cast<double>(resid.size()) * s);
}

/// Gaussian-kernel density-derivative estimate at zero: (1/(nb^2)) sum K'(-v_i/b).
inline double kde_fprime0(const Vector& resid, double b) {
  double acc = 0.0;
  for (Index i = 0; i < resid.size(); ++i) acc += normal::pdf_deriv(-resid(i) / b);
  return acc / (static_cast<double>(resid.size()) * b * b);
}

/// The three plug-in candidates computed from residuals of an initial fit.
/// h_requested is the minimum and h_max the maximum of the finite candidates;
/// h_used is left equal to h_requested for the caller to update.
inline BandwidthReport plug_in_bandwidth(const EstimationProblem& prob, const Vector& resid) {
  const Index n = resid.size();
  if (n < 2) throw InputError("plug-in bandwidth needs at least two observations");
  const double tau = prob.tau();
  const double d = static_cast<double>(prob.p());
  const double nd = static_cast<double>(n);
  const double zq = normal::quantile(tau);

  BandwidthReport rep;
  rep.sigma_hat = robust_sigma(resid);
  BandwidthCandidates c;

  const double s = s_star(n, rep.sigma_hat, tau);
  const double b = b_star(n, rep.sigma_hat, tau);
  if (std::isfinite(s)) rep.f0_hat = kde_f0(resid, s);
  if (std::isfinite(b)) rep.fprime0_hat = kde_fprime0(resid, b);
  if (std::isfinite(s) && std::isfinite(b) && std::abs(rep.fprime0_hat) >= kSingularFloor)
    c.h_nonparametric = std::pow(nd, -1.0 / 3.0) *
                        std::cbrt(3.0 * d * rep.f0_hat / (rep.fprime0_hat * rep.fprime0_hat));

  if (zq * zq >= kSingularFloor)
    c.h_gaussian_ref = std::pow(nd, -1.0 / 3.0) * rep.sigma_hat *
                       std::cbrt(3.0 * d / (zq * zq * normal::pdf(zq)));

  c.h_silverman = 1.06 * rep.sigma_hat * std::pow(nd, -0.2);

  double lo = kInf, hi = -kInf;
  for (double h : {c.h_nonparametric, c.h_gaussian_ref, c.h_silverman}) {
    if (!std::isfinite(h)) continue;
    lo = std::min(lo, h);
    hi = std::max(hi, h);
  }
  if (!std::isfinite(lo)) throw NumericalError("no finite plug-in bandwidth candidate");
  rep.candidates = c;
  rep.h_requested = lo;
  rep.h_used = lo;
  rep.h_max = hi;
  return rep;
}

struct PluginFit {
  Vector beta;
  BandwidthReport report;
  SolverDiagnostics diag;
};

/// Residuals for the first plug-in pass: IV residuals, recentred so their
/// tau-quantile is zero when the model has an intercept.
inline Vector initial_residuals(const EstimationProblem& prob, const ProjectedInstruments& zhat) {
  Vector resid = prob.y() - prob.X() * iv_estimate(prob, zhat);
  if (prob.has_constant()) {
    std::vector<double> v(resid.data(), resid.data() + resid.size());
    resid.array() -= sample_quantile(std::move(v), prob.tau());
  }
  return resid;
}

/// Plug-in bandwidth selection with one refinement pass: select from initial
/// residuals, solve, recompute residuals from the new estimate, select again
/// and re-solve. beta_init, when given, seeds the first solve.
inline PluginFit fit_with_plugin(const EstimationProblem& prob, const ProjectedInstruments& zhat,
                                 const std::optional<Vector>& beta_init = {},
                                 const SolverOptions& opts = {}) {
  const BandwidthReport first = plug_in_bandwidth(prob, initial_residuals(prob, zhat));
  const SeeSolution sol1 = solve_see(prob, zhat, first.h_requested, beta_init, opts);

  const Vector resid = prob.y() - prob.X() * sol1.beta;
  BandwidthReport rep = plug_in_bandwidth(prob, resid);
  SeeSolution sol2 = solve_see(prob, zhat, rep.h_requested, sol1.beta, opts);

  rep.h_used = sol2.h_used;
  rep.refined = true;
  rep.h_first_pass = first.h_requested;
  return {std::move(sol2.beta), rep, sol2.diag};
}

}  // namespace sivqr
