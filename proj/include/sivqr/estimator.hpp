#pragma once

#include <cstdint>
#include <functional>
#include <optional>

#include "sivqr/bandwidth.hpp"
#include "sivqr/core_model.hpp"
#include "sivqr/inference.hpp"
#include "sivqr/projection.hpp"
#include "sivqr/see_solver.hpp"

namespace sivqr {

struct EstimatorConfig {
  std::optional<double> bandwidth;  // unset: plug-in selection
  int reps = 0;                     // 0: analytic covariance
  std::uint64_t seed = 112358;
  double level = 95.0;
  std::optional<Vector> initial;
  unsigned workers = 1;
  IterationSink log;
  std::function<void()> on_replication;
};

/// Full pipeline: project, solve (manual or plug-in bandwidth), covariance.
inline FitResult estimate(const EstimationProblem& prob, const EstimatorConfig& cfg = {}) {
  const ProjectedInstruments zhat = project_instruments(prob);
  SolverOptions opts;
  opts.log = cfg.log;

  Vector beta;
  BandwidthReport report;
  SolverDiagnostics diag;
  if (cfg.bandwidth) {
    SeeSolution sol = solve_see(prob, zhat, *cfg.bandwidth, cfg.initial, opts);
    beta = std::move(sol.beta);
    diag = sol.diag;
    report.h_requested = *cfg.bandwidth;
    report.h_used = sol.h_used;
  } else {
    PluginFit fit = fit_with_plugin(prob, zhat, cfg.initial, opts);
    beta = std::move(fit.beta);
    report = fit.report;
    diag = fit.diag;
  }

  CovarianceEstimate cov;
  if (cfg.reps == 0) {
    cov = analytic_covariance(prob, beta);
  } else {
    BootstrapOptions bopts;
    bopts.workers = cfg.workers;
    bopts.on_replication = cfg.on_replication;
    cov = bayesian_bootstrap(prob, zhat, report.h_used, beta, cfg.reps, cfg.seed, bopts);
  }

  FitResult fit = make_fit_result(std::move(beta), cov, cfg.level);
  fit.bandwidth = report;
  fit.n_obs = prob.n();
  fit.solver = diag;
  fit.reps = cfg.reps;
  fit.tau = prob.tau();
  return fit;
}

}  // namespace sivqr
