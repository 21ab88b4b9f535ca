#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sivqr/bandwidth.hpp"
#include "sivqr/core_model.hpp"
#include "sivqr/error.hpp"
#include "sivqr/normal.hpp"
#include "sivqr/parallel.hpp"
#include "sivqr/projection.hpp"
#include "sivqr/see_solver.hpp"

namespace sivqr {

struct CovarianceEstimate {
  Matrix cov;
  VcovKind kind = VcovKind::Analytic;
  int reps_used = 0;
  double kernel_bandwidth = std::numeric_limits<double>::quiet_NaN();  // analytic only
  Matrix replicates;  // bootstrap only: one row per successful replication
  int failed_reps = 0;
};

inline Matrix symmetrize(const Matrix& C) { return 0.5 * (C + C.transpose()); }

/// Sandwich-form asymptotic covariance (J' S^-1 J)^-1 / n with a Gaussian
/// kernel (Powell-type) estimate of J. Uses the original q-column Z. Weights
/// are normalised to mean one, so rescaling them leaves the result unchanged.
inline CovarianceEstimate analytic_covariance(const EstimationProblem& prob,
                                              const Vector& beta_hat) {
  const Index n = prob.n();
  const double nd = static_cast<double>(n);
  const double tau = prob.tau();
  const Vector resid = prob.y() - prob.X() * beta_hat;
  const double h = 1.06 * std::pow(nd, -0.2) * robust_sigma(resid);
  const Vector w = prob.w() * (nd / prob.w().sum());

  Vector kern(n);
  for (Index i = 0; i < n; ++i) kern(i) = w(i) * normal::pdf(resid(i) / h);
  const Matrix S = tau * (1.0 - tau) * (prob.Z().transpose() * w.asDiagonal() * prob.Z()) / nd;
  const Matrix J = prob.Z().transpose() * kern.asDiagonal() * prob.X() / (nd * h);
  if (!(J.cwiseAbs().maxCoeff() > 0.0))
    throw NumericalError("kernel estimate of the Jacobian is zero; residuals are degenerate");

  const Eigen::LDLT<Matrix> s_ldlt(S);
  if (s_ldlt.info() != Eigen::Success || !(s_ldlt.rcond() > 1e-14))
    throw NumericalError("instrument second-moment matrix is singular");
  const Matrix A = symmetrize(J.transpose() * s_ldlt.solve(J));
  const Eigen::LDLT<Matrix> a_ldlt(A);
  if (a_ldlt.info() != Eigen::Success || !(a_ldlt.rcond() > 1e-14))
    throw NumericalError("sandwich matrix J'S^-1J is singular");

  CovarianceEstimate out;
  out.cov = symmetrize(a_ldlt.solve(Matrix::Identity(prob.p(), prob.p())) / nd);
  out.kind = VcovKind::Analytic;
  out.kernel_bandwidth = h;
  return out;
}

/// Dirichlet(1,...,1) * n resampling multipliers xi_i / mean(xi) for
/// replication `rep`.
inline Vector bootstrap_weights(Index n, std::uint64_t seed, std::uint64_t rep) {
  auto rng = substream(seed, rep);
  Vector xi(n);
  for (Index i = 0; i < n; ++i) xi(i) = standard_exponential(rng);
  return xi / xi.mean();
}

/// Sample covariance of the rows of `estimates` (denominator rows - 1).
inline Matrix replication_covariance(const Matrix& estimates) {
  const Index r = estimates.rows();
  if (r < 2) throw InputError("at least two replications are needed for a covariance");
  const Eigen::RowVectorXd mean = estimates.colwise().mean();
  const Matrix centered = estimates.rowwise() - mean;
  return symmetrize(centered.transpose() * centered / static_cast<double>(r - 1));
}

struct BootstrapOptions {
  unsigned workers = 1;
  std::function<void()> on_replication;  // progress callback, may be called concurrently
  double max_failure_share = 0.05;
};

/// Bayesian bootstrap: each replication re-solves the weighted SEE at the
/// point estimate's bandwidth, warm-started from the point estimate, with
/// weights base_w_i * xi_i / mean(xi).
inline CovarianceEstimate bayesian_bootstrap(const EstimationProblem& prob,
                                             const ProjectedInstruments& zhat, double h_used,
                                             const Vector& beta_hat, int reps,
                                             std::uint64_t seed,
                                             const BootstrapOptions& bopts = {}) {
  if (reps < 2) throw InputError("bootstrap needs at least 2 replications");
  const Index p = prob.p();
  Matrix est(reps, p);
  std::vector<char> ok(static_cast<std::size_t>(reps), 0);

  SolverOptions direct;
  direct.max_escalations = 0;

  parallel_for(static_cast<std::size_t>(reps), bopts.workers, [&](std::size_t r) {
    const Vector mult = bootstrap_weights(prob.n(), seed, r);
    const EstimationProblem rp = prob.with_weights(prob.w().cwiseProduct(mult));
    std::optional<Vector> beta;
    try {
      beta = solve_see(rp, zhat, h_used, beta_hat, direct).beta;
    } catch (const NumericalError&) {
      try {
        beta = solve_see(rp, zhat, h_used).beta;
      } catch (const NumericalError&) {
      }
    }
    if (beta) {
      est.row(static_cast<Index>(r)) = beta->transpose();
      ok[r] = 1;
    }
    if (bopts.on_replication) bopts.on_replication();
  });

  int n_ok = 0;
  for (char c : ok) n_ok += c;
  const int failed = reps - n_ok;
  if (failed > bopts.max_failure_share * reps)
    throw NumericalError(std::to_string(failed) + " of " + std::to_string(reps) +
                         " bootstrap replications failed to converge");

  CovarianceEstimate out;
  out.kind = VcovKind::Bootstrap;
  out.replicates.resize(n_ok, p);
  for (int r = 0, k = 0; r < reps; ++r)
    if (ok[static_cast<std::size_t>(r)]) out.replicates.row(k++) = est.row(r);
  out.cov = replication_covariance(out.replicates);
  out.reps_used = n_ok;
  out.failed_reps = failed;
  return out;
}

/// Standard errors and normal-based confidence intervals at `level` percent.
inline FitResult make_fit_result(Vector beta, const CovarianceEstimate& cov, double level) {
  if (!(level > 0.0 && level < 100.0)) throw InputError("level must lie in (0, 100)");
  FitResult fit;
  fit.beta = std::move(beta);
  fit.cov = cov.cov;
  fit.se = fit.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  const double z = normal::quantile(0.5 + level / 200.0);
  fit.ci.reserve(static_cast<std::size_t>(fit.beta.size()));
  for (Index j = 0; j < fit.beta.size(); ++j)
    fit.ci.emplace_back(fit.beta(j) - z * fit.se(j), fit.beta(j) + z * fit.se(j));
  fit.vcov_kind = cov.kind;
  fit.reps = cov.kind == VcovKind::Bootstrap ? cov.reps_used : 0;
  fit.level = level;
  return fit;
}

}  // namespace sivqr
