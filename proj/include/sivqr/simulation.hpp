#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sivqr/core_model.hpp"
#include "sivqr/error.hpp"
#include "sivqr/estimator.hpp"
#include "sivqr/normal.hpp"
#include "sivqr/parallel.hpp"
#include "sivqr/smoothing.hpp"

namespace sivqr {

enum class DgpKind { LocationShift, RandomCoefficient };

/// y = beta0 + beta1*x + v, x = pi*z + e, (v, e) standard bivariate normal
/// with correlation rho, z ~ N(0,1) independent of (v, e).
struct LocationShiftParams {
  double beta0 = 1.0;
  double beta1 = 1.0;
  double rho = 0.5;
  double pi = 1.0;
};

/// y = beta0(u) + beta1(u)*x with beta_k(u) = a_k + b_k * Phi^-1(u),
/// u ~ Unif(0,1) and x = exp(pi*z + rho*Phi^-1(u) + sqrt(1-rho^2)*e) > 0.
/// Nonnegative b_k keep x'beta(u) increasing in u.
struct RandomCoefficientParams {
  double a0 = 1.0;
  double b0 = 1.0;
  double a1 = 1.0;
  double b1 = 0.5;
  double rho = 0.5;
  double pi = 1.0;
};

struct DgpSpec {
  DgpKind kind = DgpKind::LocationShift;
  Index n = 1000;
  std::uint64_t seed = 1;
  double tau = 0.5;
  LocationShiftParams location;
  RandomCoefficientParams random_coef;
};

/// Reference design used by the acceptance suite.
inline DgpSpec reference_dgp(Index n, std::uint64_t seed = 20240601) {
  DgpSpec s;
  s.kind = DgpKind::LocationShift;
  s.n = n;
  s.seed = seed;
  return s;
}

struct GeneratedData {
  EstimationProblem problem;
  // Coefficients in X-column order: [endogenous slope, intercept].
  std::function<Vector(double)> true_beta_at;
};

/// beta(tau) in X-column order: [endogenous slope, intercept].
inline std::function<Vector(double)> true_beta_function(const DgpSpec& spec) {
  if (spec.kind == DgpKind::LocationShift) {
    const auto pr = spec.location;
    // v is standard normal, so its tau-quantile shifts the intercept.
    return [pr](double tau) {
      Vector b(2);
      b << pr.beta1, pr.beta0 + normal::quantile(tau);
      return b;
    };
  }
  const auto pr = spec.random_coef;
  return [pr](double u) {
    const double q = normal::quantile(u);
    Vector b(2);
    b << pr.a1 + pr.b1 * q, pr.a0 + pr.b0 * q;
    return b;
  };
}

/// Draws a dataset; `stream` selects an independent substream of spec.seed.
inline GeneratedData generate(const DgpSpec& spec, std::uint64_t stream = 0) {
  if (spec.n < 2) throw InputError("DGP sample size must be at least 2");
  auto rng = substream(spec.seed, stream);
  const Index n = spec.n;
  Vector y(n);
  Matrix x(n, 1), z(n, 1);
  const Matrix none(n, 0);

  if (spec.kind == DgpKind::LocationShift) {
    const auto& pr = spec.location;
    if (!(std::abs(pr.rho) < 1.0)) throw InputError("rho must lie in (-1, 1)");
    const double tail = std::sqrt(1.0 - pr.rho * pr.rho);
    for (Index i = 0; i < n; ++i) {
      const double zi = standard_normal(rng);
      const double e = standard_normal(rng);
      const double v = pr.rho * e + tail * standard_normal(rng);
      z(i, 0) = zi;
      x(i, 0) = pr.pi * zi + e;
      y(i) = pr.beta0 + pr.beta1 * x(i, 0) + v;
    }
    return {build_problem(y, none, x, z, std::nullopt, spec.tau, true), true_beta_function(spec)};
  }

  const auto& pr = spec.random_coef;
  if (!(std::abs(pr.rho) < 1.0)) throw InputError("rho must lie in (-1, 1)");
  const double tail = std::sqrt(1.0 - pr.rho * pr.rho);
  const auto coef = true_beta_function(spec);
  for (Index i = 0; i < n; ++i) {
    double u = uniform01(rng);
    while (u == 0.0) u = uniform01(rng);
    const double zi = standard_normal(rng);
    const double xi = std::exp(pr.pi * zi + pr.rho * normal::quantile(u) + tail * standard_normal(rng));
    const Vector b = coef(u);
    z(i, 0) = zi;
    x(i, 0) = xi;
    y(i) = b(1) + b(0) * xi;
  }
  // Monotonicity of x'beta(u) in u, checked on a grid for every generated x.
  for (Index i = 0; i < n; ++i) {
    double prev = -std::numeric_limits<double>::infinity();
    for (int k = 1; k <= 99; ++k) {
      const Vector b = coef(k / 100.0);
      const double val = b(0) * x(i, 0) + b(1);
      if (val < prev)
        throw InputError("random-coefficient DGP violates monotonicity in the rank variable");
      prev = val;
    }
  }
  return {build_problem(y, none, x, z, std::nullopt, spec.tau, true), coef};
}

/// Intercept-only smoothed estimator: the m solving
/// (1/n) sum itilde((y_i - m)/h) = tau, found by bisection. When the root set
/// is an interval its midpoint is returned. For tau = 0.5 this is the
/// Huber-type Winsorized mean with clipping at +/-h.
inline double winsorized_mean_oracle(const Vector& y, double h, double tau = 0.5) {
  if (y.size() == 0 || !(h > 0.0)) throw NumericalError("winsorized_mean_oracle: degenerate input");
  auto g = [&](double m) {
    double acc = 0.0;
    for (Index i = 0; i < y.size(); ++i) acc += itilde((y(i) - m) / h);
    return acc / static_cast<double>(y.size()) - tau;
  };
  const double lo0 = y.minCoeff() - 2.0 * h;
  const double hi0 = y.maxCoeff() + 2.0 * h;
  if (!(g(lo0) < 0.0 && g(hi0) > 0.0)) throw NumericalError("winsorized_mean_oracle: bracket failure");
  const double eps = 1e-12 * std::max(1.0, y.cwiseAbs().maxCoeff());
  auto bisect = [&](auto upper_pred) {
    double lo = lo0, hi = hi0;
    for (int it = 0; it < 400 && hi - lo > eps; ++it) {
      const double mid = 0.5 * (lo + hi);
      (upper_pred(g(mid)) ? hi : lo) = mid;
    }
    return 0.5 * (lo + hi);
  };
  const double left = bisect([](double v) { return v >= 0.0; });
  const double right = bisect([](double v) { return v > 0.0; });
  return 0.5 * (left + right);
}

inline double check_loss(const Vector& resid, double tau) {
  double acc = 0.0;
  for (Index i = 0; i < resid.size(); ++i) {
    const double v = resid(i);
    acc += v * (tau - (v <= 0.0 ? 1.0 : 0.0));
  }
  return acc;
}

/// Exact quantile-regression fit by enumerating every p-subset of
/// observations and keeping the exact-fit coefficients with the smallest
/// check-function objective.
inline Vector brute_force_qr_oracle(const Vector& y, const Matrix& X, double tau) {
  const Index n = X.rows();
  const Index p = X.cols();
  if (n > 30 || p > 3 || p < 1 || n < p)
    throw InputError("brute_force_qr_oracle supports 1 <= p <= 3 and p <= n <= 30");
  std::vector<Index> idx(static_cast<std::size_t>(p));
  for (Index k = 0; k < p; ++k) idx[static_cast<std::size_t>(k)] = k;

  double best = std::numeric_limits<double>::infinity();
  Vector best_beta;
  Matrix A(p, p);
  Vector b(p);
  for (;;) {
    for (Index k = 0; k < p; ++k) {
      A.row(k) = X.row(idx[static_cast<std::size_t>(k)]);
      b(k) = y(idx[static_cast<std::size_t>(k)]);
    }
    const Eigen::FullPivLU<Matrix> lu(A);
    if (lu.isInvertible()) {
      const Vector beta = lu.solve(b);
      const double obj = check_loss(y - X * beta, tau);
      if (obj < best) {
        best = obj;
        best_beta = beta;
      }
    }
    // next combination in lexicographic order
    Index k = p - 1;
    while (k >= 0 && idx[static_cast<std::size_t>(k)] == n - p + k) --k;
    if (k < 0) break;
    ++idx[static_cast<std::size_t>(k)];
    for (Index j = k + 1; j < p; ++j)
      idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
  }
  if (!std::isfinite(best)) throw NumericalError("every p-subset of observations is singular");
  return best_beta;
}

struct MonteCarloConfig {
  EstimatorConfig estimator;  // bandwidth/reps/level per replication
  unsigned workers = 1;
};

struct MonteCarloRow {
  double tau = 0.0;
  Index coef = 0;
  double truth = 0.0;
  double mean_estimate = 0.0;
  double mean_bias = 0.0;
  double sd = 0.0;
  double rmse = 0.0;
  double mean_se = 0.0;
  double coverage = 0.0;
  int reps_ok = 0;
  int failures = 0;
};

struct MonteCarloResult {
  std::vector<MonteCarloRow> rows;
  // Per tau: one row per successful replication (estimates and SEs).
  std::vector<Matrix> estimates;
  std::vector<Matrix> std_errors;
};

/// Repeats generate + estimate n_reps times (replication r uses substream r
/// of spec.seed) and summarises each coefficient at each tau.
inline MonteCarloResult monte_carlo(const DgpSpec& spec, const std::vector<double>& taus,
                                    int n_reps, const MonteCarloConfig& cfg = {}) {
  if (n_reps < 2) throw InputError("monte_carlo needs at least 2 replications");
  const std::size_t nt = taus.size();
  const auto reps = static_cast<std::size_t>(n_reps);
  std::vector<std::vector<std::optional<FitResult>>> fits(nt, std::vector<std::optional<FitResult>>(reps));
  parallel_for(reps, cfg.workers, [&](std::size_t r) {
    GeneratedData data = generate(spec, r);
    for (std::size_t t = 0; t < nt; ++t) {
      try {
        fits[t][r] = estimate(data.problem.with_tau(taus[t]), cfg.estimator);
      } catch (const NumericalError&) {
      }
    }
  });
  const auto truth = true_beta_function(spec);

  MonteCarloResult out;
  for (std::size_t t = 0; t < nt; ++t) {
    int ok = 0;
    Index p = 0;
    for (const auto& f : fits[t])
      if (f) {
        ++ok;
        p = f->beta.size();
      }
    Matrix est(ok, p), se(ok, p);
    Matrix covered = Matrix::Zero(ok, p);
    const Vector tb = truth(taus[t]);
    for (std::size_t r = 0, k = 0; r < reps; ++r) {
      const auto& f = fits[t][r];
      if (!f) continue;
      const auto row = static_cast<Index>(k++);
      est.row(row) = f->beta.transpose();
      se.row(row) = f->se.transpose();
      for (Index j = 0; j < p; ++j)
        covered(row, j) =
            (f->ci[static_cast<std::size_t>(j)].first <= tb(j) &&
             tb(j) <= f->ci[static_cast<std::size_t>(j)].second)
                ? 1.0
                : 0.0;
    }
    for (Index j = 0; j < p; ++j) {
      MonteCarloRow row;
      row.tau = taus[t];
      row.coef = j;
      row.truth = tb(j);
      row.reps_ok = ok;
      row.failures = n_reps - ok;
      if (ok > 0) {
        row.mean_estimate = est.col(j).mean();
        row.mean_bias = row.mean_estimate - tb(j);
        row.sd = ok > 1 ? sample_sd(est.col(j)) : 0.0;
        row.rmse = std::sqrt((est.col(j).array() - tb(j)).square().mean());
        row.mean_se = se.col(j).mean();
        row.coverage = covered.col(j).mean();
      }
      out.rows.push_back(row);
    }
    out.estimates.push_back(std::move(est));
    out.std_errors.push_back(std::move(se));
  }
  return out;
}

inline void write_monte_carlo_csv(std::ostream& os, const MonteCarloResult& res) {
  os << "tau,coef,truth,mean_estimate,mean_bias,sd,rmse,mean_se,coverage,reps_ok,failures\n";
  os << std::setprecision(10);
  for (const auto& r : res.rows)
    os << r.tau << ',' << r.coef << ',' << r.truth << ',' << r.mean_estimate << ','
       << r.mean_bias << ',' << r.sd << ',' << r.rmse << ',' << r.mean_se << ','
       << r.coverage << ',' << r.reps_ok << ',' << r.failures << '\n';
}

}  // namespace sivqr
