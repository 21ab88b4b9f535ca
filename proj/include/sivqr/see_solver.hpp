#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "sivqr/core_model.hpp"
#include "sivqr/error.hpp"
#include "sivqr/projection.hpp"
#include "sivqr/smoothing.hpp"

namespace sivqr {

/// One Newton step, as reported to an iteration log.
struct IterationRecord {
  double h;
  int stage;
  int iteration;
  double residual_inf_norm;
  double step_norm;
};

using IterationSink = std::function<void(const IterationRecord&)>;

struct SolverOptions {
  double homotopy_shrink = 0.5;
  double escalation_factor = 1.5;
  int max_escalations = 40;
  int max_iterations = 200;  // per stage
  int max_step_halvings = 30;
  // Times a failed homotopy stage is retried with a gentler shrink ratio.
  int max_step_refinements = 6;
  double tol_scale = 1e-8;
  // Reciprocal-condition threshold below which the Jacobian counts as singular.
  double singular_rcond = 1e-12;
  IterationSink log;
};

struct SeeSolution {
  Vector beta;
  double h_used = 0.0;
  SolverDiagnostics diag;
};

/// Raised when no bandwidth on the escalation ladder yields a solution.
class SolverFailure : public NumericalError {
 public:
  SolverFailure(const std::string& what, SolverDiagnostics diag)
      : NumericalError(what), diag_(diag) {}
  const SolverDiagnostics& diagnostics() const noexcept { return diag_; }

 private:
  SolverDiagnostics diag_;
};

/// (1/n) sum_i w_i zhat_i [itilde((y_i - x_i'beta)/h) - tau]
inline Vector see_residual(const EstimationProblem& prob, const ProjectedInstruments& zhat,
                           const Vector& beta, double h) {
  const Vector resid = prob.y() - prob.X() * beta;
  Vector coef(prob.n());
  for (Index i = 0; i < prob.n(); ++i)
    coef(i) = prob.w()(i) * (itilde(resid(i) / h) - prob.tau());
  return zhat.zhat.transpose() * coef / static_cast<double>(prob.n());
}

/// Analytic Jacobian of see_residual with respect to beta. Only observations
/// strictly inside the smoothing window contribute.
inline Matrix see_jacobian(const EstimationProblem& prob, const ProjectedInstruments& zhat,
                           const Vector& beta, double h) {
  const Vector resid = prob.y() - prob.X() * beta;
  Vector coef(prob.n());
  for (Index i = 0; i < prob.n(); ++i)
    coef(i) = -prob.w()(i) * itilde_deriv(resid(i) / h) / h;
  return zhat.zhat.transpose() * coef.asDiagonal() * prob.X() / static_cast<double>(prob.n());
}

/// Convergence threshold on the sup-norm of the SEE, scaled by the
/// magnitude of the instruments so it is unit-free.
inline double residual_tolerance(const EstimationProblem& prob, const ProjectedInstruments& zhat,
                                 double tol_scale = 1e-8) {
  const Vector mean_z =
      zhat.zhat.transpose() * prob.w() / static_cast<double>(prob.n());
  return tol_scale * (1.0 + mean_z.lpNorm<Eigen::Infinity>());
}

/// Bandwidth at which every residual of the (intercept-adjusted) IV fit sits
/// inside the smoothing window, so the SEE are linear there.
inline double homotopy_start_bandwidth(const EstimationProblem& prob, const Vector& beta_iv) {
  const double max_abs = (prob.y() - prob.X() * beta_iv).lpNorm<Eigen::Infinity>();
  if (max_abs == 0.0) return std::max(1.0, prob.y().lpNorm<Eigen::Infinity>());
  const double margin = 2.0 * std::min(prob.tau(), 1.0 - prob.tau());
  return 1.5 * max_abs / margin;
}

namespace detail {

struct NewtonOutcome {
  Vector beta;
  bool converged = false;
  bool singular = false;
  int iterations = 0;
  double residual_inf = std::numeric_limits<double>::quiet_NaN();
};

inline NewtonOutcome damped_newton(const EstimationProblem& prob,
                                   const ProjectedInstruments& zhat, Vector beta, double h,
                                   double tol, const SolverOptions& opts, int stage) {
  NewtonOutcome out;
  Vector g = see_residual(prob, zhat, beta, h);
  double g_norm = g.norm();
  for (int it = 0;; ++it) {
    out.residual_inf = g.lpNorm<Eigen::Infinity>();
    const Matrix J = see_jacobian(prob, zhat, beta, h);
    const Eigen::PartialPivLU<Matrix> lu(J);
    const bool singular = !(lu.rcond() > opts.singular_rcond);
    if (out.residual_inf <= tol) {
      // A root inside a flat region of the SEE is not isolated; treat the
      // bandwidth as infeasible so the caller escalates.
      out.converged = !singular;
      out.singular = singular;
      break;
    }
    if (it >= opts.max_iterations) break;

    // With too few observations inside the window the Jacobian is singular;
    // borrow the direction from a wider window and let the line search on
    // the true residual decide.
    Vector step;
    if (!singular) {
      step = -lu.solve(g);
    } else {
      double wide = h;
      for (int k = 0; k < 60 && step.size() == 0; ++k) {
        wide *= 2.0;
        const Eigen::PartialPivLU<Matrix> wlu(see_jacobian(prob, zhat, beta, wide));
        if (wlu.rcond() > opts.singular_rcond) step = -wlu.solve(g);
      }
      if (step.size() == 0) {
        out.singular = true;
        break;
      }
    }
    double t = 1.0;
    bool accepted = false;
    for (int k = 0; k <= opts.max_step_halvings; ++k, t *= 0.5) {
      Vector cand = beta + t * step;
      Vector g_cand = see_residual(prob, zhat, cand, h);
      const double cand_norm = g_cand.norm();
      if (cand_norm < g_norm) {
        beta = std::move(cand);
        g = std::move(g_cand);
        g_norm = cand_norm;
        accepted = true;
        break;
      }
    }
    ++out.iterations;
    if (opts.log)
      opts.log({h, stage, out.iterations, g.lpNorm<Eigen::Infinity>(), t * step.norm()});
    if (!accepted) {
      out.residual_inf = g.lpNorm<Eigen::Infinity>();
      break;
    }
  }
  out.beta = std::move(beta);
  return out;
}

}  // namespace detail

/// Solves the smoothed estimating equations at bandwidth h_request.
///
/// Without beta_init the search starts from the IV estimate at a bandwidth
/// large enough that the equations are linear, then halves the bandwidth
/// toward h_request, warm-starting each stage. If a stage fails (singular
/// Jacobian, stalled line search, or iteration cap) the bandwidth is raised by
/// escalation_factor from the failing value until a solve succeeds; h_used is
/// the smallest bandwidth that converged. h_request == 0 asks for the smallest
/// feasible bandwidth.
///
/// With beta_init the first attempt is a direct solve at h_request from that
/// point; if it fails (and escalation is allowed) the IV homotopy is used.
inline SeeSolution solve_see(const EstimationProblem& prob, const ProjectedInstruments& zhat,
                             double h_request, const std::optional<Vector>& beta_init = {},
                             const SolverOptions& opts = {}) {
  if (!(h_request >= 0.0) || !std::isfinite(h_request))
    throw InputError("bandwidth must be a finite nonnegative number");
  if (beta_init && beta_init->size() != prob.p())
    throw InputError("initial coefficient vector has length " +
                     std::to_string(beta_init->size()) + ", expected " +
                     std::to_string(prob.p()));

  const double tol = residual_tolerance(prob, zhat, opts.tol_scale);
  const double target = h_request > 0.0 ? h_request : std::numeric_limits<double>::min();
  SolverDiagnostics diag;
  int stage = 0;

  auto attempt = [&](const Vector& start, double h) {
    detail::NewtonOutcome r = detail::damped_newton(prob, zhat, start, h, tol, opts, ++stage);
    diag.iterations += r.iterations;
    diag.final_residual_inf_norm = r.residual_inf;
    return r;
  };
  auto success = [&](Vector beta, double h, double resid) {
    diag.converged = true;
    diag.final_residual_inf_norm = resid;
    diag.homotopy_stages = stage;
    return SeeSolution{std::move(beta), h, diag};
  };
  auto failure = [&](const std::string& msg) {
    diag.converged = false;
    diag.homotopy_stages = stage;
    return SolverFailure(msg, diag);
  };

  if (beta_init) {
    detail::NewtonOutcome r = attempt(*beta_init, target);
    if (r.converged) return success(std::move(r.beta), target, r.residual_inf);
    if (opts.max_escalations == 0)
      throw failure("smoothed estimating equations did not converge at the requested bandwidth");
  }

  const Vector beta_iv = iv_estimate(prob, zhat);
  const double h_big = homotopy_start_bandwidth(prob, beta_iv);

  struct Converged {
    double h;
    Vector beta;
    double resid;
  };
  std::optional<Converged> best;
  double h = std::max(target, h_big);
  double h_fail = h;
  {
    detail::NewtonOutcome r = attempt(beta_iv, h);
    if (!r.converged && r.singular && h >= h_big)
      throw failure(
          "Jacobian of the smoothed estimating equations is singular even at a large "
          "bandwidth; check instrument strength (first-stage regression)");
    if (r.converged) best = Converged{h, std::move(r.beta), r.residual_inf};
  }
  // Continuation toward the target. A failed stage is retried closer to the
  // last converged bandwidth before that bandwidth is declared infeasible.
  while (best && best->h > target) {
    double ratio = opts.homotopy_shrink;
    bool advanced = false;
    for (int k = 0; k <= opts.max_step_refinements && !advanced; ++k) {
      const double h_next = std::max(best->h * ratio, target);
      detail::NewtonOutcome r = attempt(best->beta, h_next);
      if (r.converged) {
        best = Converged{h_next, std::move(r.beta), r.residual_inf};
        advanced = true;
      } else {
        h_fail = h_next;
        ratio = 1.0 - 0.5 * (1.0 - ratio);
      }
    }
    if (!advanced) break;
  }
  if (best && best->h <= target) return success(std::move(best->beta), best->h, best->resid);

  double h_try = h_fail;
  for (int k = 1; k <= opts.max_escalations; ++k) {
    h_try *= opts.escalation_factor;
    diag.bandwidth_escalations = k;
    if (best && h_try >= best->h) return success(std::move(best->beta), best->h, best->resid);
    detail::NewtonOutcome r = attempt(best ? best->beta : beta_iv, h_try);
    if (r.converged) return success(std::move(r.beta), h_try, r.residual_inf);
  }
  throw failure("smoothed estimating equations did not converge after " +
                std::to_string(opts.max_escalations) + " bandwidth escalations");
}

}  // namespace sivqr
