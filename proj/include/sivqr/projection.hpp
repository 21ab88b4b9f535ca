#pragma once

#include <string>

#include <Eigen/Dense>

#include "sivqr/core_model.hpp"
#include "sivqr/error.hpp"

namespace sivqr {

/// Relative singular-value threshold below which a matrix is treated as
/// rank deficient.
inline constexpr double kRankTolerance = 1e-10;

struct ProjectedInstruments {
  Matrix zhat;  // n x p effective instruments
  Index rank_z = 0;
};

namespace detail {

inline Index numeric_rank(const Matrix& A) {
  if (A.cols() == 0) return 0;
  Eigen::JacobiSVD<Matrix> svd(A);
  const Vector& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0.0) return 0;
  Index r = 0;
  for (Index k = 0; k < s.size(); ++k)
    if (s(k) > kRankTolerance * s(0)) ++r;
  return r;
}

/// Throws RankDeficientError naming the first column that adds no rank.
inline void require_full_column_rank(const Matrix& A, const char* what) {
  if (numeric_rank(A) == A.cols()) return;
  for (Index j = 0; j < A.cols(); ++j) {
    if (numeric_rank(A.leftCols(j + 1)) < j + 1)
      throw RankDeficientError(std::string(what) + " is rank deficient: column " +
                                   std::to_string(j) + " is collinear with earlier columns",
                               static_cast<long>(j));
  }
  throw RankDeficientError(std::string(what) + " is rank deficient", -1);
}

}  // namespace detail

/// Weighted least squares: argmin_C sum_i w_i ||B_i - A_i C||^2.
/// Solved by column-pivoted QR on the sqrt(w)-scaled system.
inline Matrix least_squares(const Matrix& A, const Matrix& B, const Vector& w) {
  if (A.rows() != B.rows() || A.rows() != w.size())
    throw InputError("least_squares: row count mismatch");
  if (A.rows() < A.cols()) throw InputError("least_squares: fewer rows than columns");
  const Vector sw = w.array().sqrt();
  const Matrix Aw = sw.asDiagonal() * A;
  const Matrix Bw = sw.asDiagonal() * B;
  detail::require_full_column_rank(Aw, "least-squares design");
  return Aw.colPivHouseholderQr().solve(Bw);
}

/// Effective instruments: Z itself under exact identification, otherwise the
/// weighted least-squares fitted values of X given Z.
inline ProjectedInstruments project_instruments(const EstimationProblem& prob) {
  if (prob.q() < prob.p()) throw InputError("model is underidentified");
  const Vector sw = prob.w().array().sqrt();
  const Matrix Zw = sw.asDiagonal() * prob.Z();
  detail::require_full_column_rank(Zw, "instrument matrix Z");
  ProjectedInstruments out;
  out.rank_z = prob.q();
  if (prob.q() == prob.p()) {
    out.zhat = prob.Z();
  } else {
    out.zhat = prob.Z() * least_squares(prob.Z(), prob.X(), prob.w());
  }
  return out;
}

/// Weighted (2SLS-type) IV estimate: solves (1/n) sum w_i zhat_i (y_i - x_i'b) = 0.
inline Vector iv_estimate(const EstimationProblem& prob, const ProjectedInstruments& zhat) {
  const double n = static_cast<double>(prob.n());
  const Matrix ZtW = zhat.zhat.transpose() * prob.w().asDiagonal();
  const Matrix M = ZtW * prob.X() / n;
  const Vector b = ZtW * prob.y() / n;
  Eigen::JacobiSVD<Matrix> svd(M);
  const Vector& s = svd.singularValues();
  if (s(0) == 0.0 || s(s.size() - 1) <= kRankTolerance * s(0))
    throw NumericalError(
        "instrument/regressor cross-moment matrix is singular; the instruments may be weak "
        "or collinear (check the first-stage regression)");
  return M.fullPivLu().solve(b);
}

}  // namespace sivqr
