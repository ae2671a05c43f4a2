#pragma once

// Small dense helpers over autodiff scalars plus the custom-backward Gaussian
// log-density node. Matrices are stored row-major in flat vectors.

#include <Eigen/Dense>
#include <memory>
#include <vector>

#include "fedcausal/autodiff.hpp"
#include "fedcausal/errors.hpp"

namespace fedcausal::ad {

// In-place lower Cholesky of a row-major n x n matrix of Vars. A fixed
// diagonal jitter is added up front (no escalation: the gradient path must be
// value-independent).
inline void cholesky_inplace(VarVec& a, int n, double jitter = 0.0) {
  for (int i = 0; i < n; ++i) a[i * n + i] += jitter;
  for (int j = 0; j < n; ++j) {
    Var d = a[j * n + j];
    for (int k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (value(d) <= 0.0) throw NumericalError("cholesky_inplace: matrix not positive definite");
    const Var root = sqrt(d);
    a[j * n + j] = root;
    for (int i = j + 1; i < n; ++i) {
      Var s = a[i * n + j];
      for (int k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / root;
    }
    for (int i = 0; i < j; ++i) a[i * n + j] = Var(0.0);
  }
}

inline VarVec solve_lower(const VarVec& l, int n, const VarVec& b) {
  VarVec y(b);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < i; ++k) y[i] -= l[i * n + k] * y[k];
    y[i] /= l[i * n + i];
  }
  return y;
}

// log N(y; mu, K) for constant data y, Var mean and Var covariance, recorded
// as one tape node. K is passed as the lower triangle (row-major, diag
// included); the backward closure solves with the saved factorization.
Var gaussian_logpdf_custom(const std::vector<Var>& k_lower, const std::vector<Var>& mu,
                           const Eigen::VectorXd& y);

// Dense log N(y; mu, K) for plain doubles (shared by prediction paths).
double gaussian_logpdf(const Eigen::MatrixXd& k, const Eigen::VectorXd& mu,
                       const Eigen::VectorXd& y);

}  // namespace fedcausal::ad
