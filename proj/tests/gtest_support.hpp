#pragma once

#include <gtest/gtest.h>

#include "test_support.hpp"

namespace sivqr::testing {

/// Every converged fit must satisfy the moment tolerance at h_used.
inline void expect_moments_solved(const EstimationProblem& prob, const ProjectedInstruments& zh,
                                  const Vector& beta, double h_used) {
  const double tol = residual_tolerance(prob, zh);
  const double g = see_residual(prob, zh, beta, h_used).lpNorm<Eigen::Infinity>();
  EXPECT_LE(g, tol) << "SEE residual at h=" << h_used;
}

}  // namespace sivqr::testing
