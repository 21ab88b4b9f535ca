#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "sivqr/error.hpp"

namespace sivqr {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Validated estimation input. Immutable once constructed.
///
/// Column layout used throughout the library:
///   X = [endogenous | exogenous | constant?]
///   Z = [exogenous | excluded instruments | constant?]
class EstimationProblem {
 public:
  EstimationProblem(Vector y, Matrix X, Matrix Z, Vector w, double tau,
                    std::vector<Index> endog_idx, bool has_constant)
      : y_(std::move(y)),
        X_(std::move(X)),
        Z_(std::move(Z)),
        w_(std::move(w)),
        tau_(tau),
        endog_idx_(std::move(endog_idx)),
        has_constant_(has_constant) {
    validate();
  }

  const Vector& y() const noexcept { return y_; }
  const Matrix& X() const noexcept { return X_; }
  const Matrix& Z() const noexcept { return Z_; }
  const Vector& w() const noexcept { return w_; }
  double tau() const noexcept { return tau_; }
  const std::vector<Index>& endog_idx() const noexcept { return endog_idx_; }
  bool has_constant() const noexcept { return has_constant_; }

  Index n() const noexcept { return y_.size(); }
  Index p() const noexcept { return X_.cols(); }
  Index q() const noexcept { return Z_.cols(); }

  /// Column of X holding the intercept, if any (always the last one).
  std::optional<Index> constant_col() const {
    if (!has_constant_) return std::nullopt;
    return p() - 1;
  }

  bool is_endogenous(Index col) const {
    for (Index e : endog_idx_)
      if (e == col) return true;
    return false;
  }

  /// Same data with a different weight vector (used by resampling).
  EstimationProblem with_weights(Vector w) const {
    return EstimationProblem(y_, X_, Z_, std::move(w), tau_, endog_idx_,
                             has_constant_);
  }

  /// Same design with a different quantile level.
  EstimationProblem with_tau(double tau) const {
    return EstimationProblem(y_, X_, Z_, w_, tau, endog_idx_, has_constant_);
  }

  /// Same design and weights with a different outcome vector.
  EstimationProblem with_outcome(Vector y) const {
    return EstimationProblem(std::move(y), X_, Z_, w_, tau_, endog_idx_,
                             has_constant_);
  }

 private:
  void validate() const {
    const Index n = y_.size();
    if (X_.rows() != n || Z_.rows() != n || w_.size() != n)
      throw InputError("dimension mismatch: y, X, Z and w must have the same number of rows");
    if (n == 0) throw InputError("no observations");
    if (p() == 0) throw InputError("no regressors");
    if (n < p())
      throw InputError("fewer observations (" + std::to_string(n) + ") than coefficients (" +
                       std::to_string(p()) + ")");
    if (q() < p())
      throw InputError("model is underidentified: " + std::to_string(q()) +
                       " instruments for " + std::to_string(p()) + " coefficients");
    if (!(tau_ > 0.0 && tau_ < 1.0))
      throw InputError("quantile level must lie strictly between 0 and 1");
    if (!y_.allFinite() || !X_.allFinite() || !Z_.allFinite() || !w_.allFinite())
      throw InputError("non-finite value in y, X, Z or weights");
    if ((w_.array() < 0.0).any()) throw InputError("weights must be nonnegative");
    if (!(w_.sum() > 0.0)) throw InputError("weights sum to zero");
    for (Index e : endog_idx_)
      if (e < 0 || e >= p()) throw InputError("endogenous column index out of range");
    for (Index j = 0; j < p(); ++j) {
      if (is_endogenous(j)) continue;
      bool found = false;
      for (Index k = 0; k < q() && !found; ++k) found = (Z_.col(k) == X_.col(j));
      if (!found)
        throw InputError("exogenous regressor column " + std::to_string(j) +
                         " does not appear among the instruments");
    }
  }

  Vector y_;
  Matrix X_;
  Matrix Z_;
  Vector w_;
  double tau_;
  std::vector<Index> endog_idx_;
  bool has_constant_;
};

/// Accepts a quantile in (0, 1) or a percentile in [1, 100).
inline double normalize_quantile(double tau_input) {
  if (tau_input > 0.0 && tau_input < 1.0) return tau_input;
  if (tau_input >= 1.0 && tau_input < 100.0) return tau_input / 100.0;
  throw InputError("quantile must be in (0,1) or a percentile in [1,100)");
}

namespace detail {

inline void check_trivial_columns(const Matrix& M, const char* which) {
  for (Index j = 0; j < M.cols(); ++j) {
    if ((M.col(j).array() == 0.0).all())
      throw InputError(std::string(which) + " column " + std::to_string(j) + " is identically zero");
    for (Index k = 0; k < j; ++k)
      if (M.col(k) == M.col(j))
        throw InputError(std::string(which) + " column " + std::to_string(j) +
                         " duplicates column " + std::to_string(k));
  }
}

}  // namespace detail

/// Assembles X = [endog | exog | 1?] and Z = [exog | instr | 1?] from raw
/// columns. NaN marks a missing value; rows with any missing entry are dropped.
inline EstimationProblem build_problem(const Vector& raw_y, const Matrix& raw_exog,
                                       const Matrix& raw_endog, const Matrix& raw_instr,
                                       const std::optional<Vector>& weights, double tau_input,
                                       bool add_constant) {
  const Index rows = raw_y.size();
  if (raw_exog.rows() != rows || raw_endog.rows() != rows || raw_instr.rows() != rows ||
      (weights && weights->size() != rows))
    throw InputError("dimension mismatch: all inputs must have the same number of rows");
  const double tau = normalize_quantile(tau_input);

  auto missing = [](double v) { return std::isnan(v); };
  std::vector<Index> keep;
  keep.reserve(static_cast<std::size_t>(rows));
  for (Index i = 0; i < rows; ++i) {
    bool bad = missing(raw_y(i)) || (weights && missing((*weights)(i)));
    for (Index j = 0; j < raw_exog.cols() && !bad; ++j) bad = missing(raw_exog(i, j));
    for (Index j = 0; j < raw_endog.cols() && !bad; ++j) bad = missing(raw_endog(i, j));
    for (Index j = 0; j < raw_instr.cols() && !bad; ++j) bad = missing(raw_instr(i, j));
    if (!bad) keep.push_back(i);
  }
  const auto n = static_cast<Index>(keep.size());
  if (n == 0) throw InputError("no observations remain after removing rows with missing values");

  const Index n_endog = raw_endog.cols();
  const Index n_exog = raw_exog.cols();
  const Index n_instr = raw_instr.cols();
  const Index c = add_constant ? 1 : 0;
  const Index p = n_endog + n_exog + c;
  const Index q = n_exog + n_instr + c;
  if (q < p)
    throw InputError("model is underidentified: " + std::to_string(q) + " instruments for " +
                     std::to_string(p) + " coefficients");

  Vector y(n), w(n);
  Matrix X(n, p), Z(n, q);
  for (Index r = 0; r < n; ++r) {
    const Index i = keep[static_cast<std::size_t>(r)];
    y(r) = raw_y(i);
    w(r) = weights ? (*weights)(i) : 1.0;
    X.row(r).head(n_endog) = raw_endog.row(i);
    X.row(r).segment(n_endog, n_exog) = raw_exog.row(i);
    Z.row(r).head(n_exog) = raw_exog.row(i);
    Z.row(r).segment(n_exog, n_instr) = raw_instr.row(i);
    if (add_constant) {
      X(r, p - 1) = 1.0;
      Z(r, q - 1) = 1.0;
    }
  }
  detail::check_trivial_columns(X, "regressor");
  detail::check_trivial_columns(Z, "instrument");

  std::vector<Index> endog_idx(static_cast<std::size_t>(n_endog));
  for (Index j = 0; j < n_endog; ++j) endog_idx[static_cast<std::size_t>(j)] = j;
  return EstimationProblem(std::move(y), std::move(X), std::move(Z), std::move(w), tau,
                           std::move(endog_idx), add_constant);
}

/// (1/n) sum_i w_i z_i (1{y_i - x_i'beta <= 0} - tau), the unsmoothed moments.
inline Vector unsmoothed_moments(const EstimationProblem& prob, const Vector& beta) {
  const Vector resid = prob.y() - prob.X() * beta;
  Vector m = Vector::Zero(prob.q());
  for (Index i = 0; i < prob.n(); ++i) {
    const double ind = resid(i) <= 0.0 ? 1.0 : 0.0;
    m += prob.w()(i) * (ind - prob.tau()) * prob.Z().row(i).transpose();
  }
  return m / static_cast<double>(prob.n());
}

// ---------------------------------------------------------------------------
// Result types shared by the solver, bandwidth and inference modules.

struct SolverDiagnostics {
  int iterations = 0;
  double final_residual_inf_norm = std::numeric_limits<double>::quiet_NaN();
  int bandwidth_escalations = 0;
  bool converged = false;
  int homotopy_stages = 0;
};

struct BandwidthCandidates {
  double h_nonparametric = std::numeric_limits<double>::infinity();
  double h_gaussian_ref = std::numeric_limits<double>::infinity();
  double h_silverman = std::numeric_limits<double>::infinity();
};

struct BandwidthReport {
  double h_requested = 0.0;
  double h_used = 0.0;
  // +inf when no plug-in candidates were computed (manual bandwidth).
  double h_max = std::numeric_limits<double>::infinity();
  std::optional<BandwidthCandidates> candidates;
  double sigma_hat = std::numeric_limits<double>::quiet_NaN();
  double f0_hat = std::numeric_limits<double>::quiet_NaN();
  double fprime0_hat = std::numeric_limits<double>::quiet_NaN();
  bool refined = false;
  // Plug-in bandwidth of the first (unrefined) pass, for diagnostics.
  double h_first_pass = std::numeric_limits<double>::quiet_NaN();

  /// True when a plug-in bandwidth had to be raised above every candidate,
  /// which often signals weak instruments.
  bool exceeds_max() const {
    return candidates.has_value() && std::isfinite(h_max) && h_used > h_max;
  }
};

enum class VcovKind { Analytic, Bootstrap };

inline const char* vcetype_name(VcovKind k) {
  return k == VcovKind::Analytic ? "Robust" : "Bootstrap";
}

struct FitResult {
  Vector beta;
  Matrix cov;
  Vector se;
  std::vector<std::pair<double, double>> ci;
  BandwidthReport bandwidth;
  Index n_obs = 0;
  SolverDiagnostics solver;
  VcovKind vcov_kind = VcovKind::Analytic;
  int reps = 0;
  double level = 95.0;
  double tau = 0.5;
};

}  // namespace sivqr
