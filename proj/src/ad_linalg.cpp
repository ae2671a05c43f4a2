#include "fedcausal/ad_linalg.hpp"

namespace fedcausal::ad {

Var gaussian_logpdf_custom(const std::vector<Var>& k_lower, const std::vector<Var>& mu,
                           const Eigen::VectorXd& y) {
  const int n = static_cast<int>(mu.size());
  if (static_cast<int>(k_lower.size()) != n * (n + 1) / 2)
    throw SchemaError("gaussian_logpdf_custom: triangle size mismatch");

  Eigen::MatrixXd k(n, n);
  {
    std::size_t p = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j) {
        k(i, j) = value(k_lower[p]);
        k(j, i) = k(i, j);
        ++p;
      }
  }
  Eigen::VectorXd resid(n);
  for (int i = 0; i < n; ++i) resid(i) = y(i) - value(mu[i]);

  auto llt = std::make_shared<Eigen::LLT<Eigen::MatrixXd>>(k);
  if (llt->info() != Eigen::Success)
    throw NumericalError("gaussian_logpdf_custom: covariance not positive definite");
  auto alpha = std::make_shared<Eigen::VectorXd>(llt->solve(resid));

  double logdet = 0.0;
  const auto& l = llt->matrixLLT();
  for (int i = 0; i < n; ++i) logdet += 2.0 * std::log(l(i, i));
  const double ll = -0.5 * resid.dot(*alpha) - 0.5 * logdet - 0.5 * n * std::log(2.0 * M_PI);

  Tape* tape = current_tape();
  std::vector<std::int32_t> parents;
  parents.reserve(k_lower.size() + mu.size());
  for (const Var& v : k_lower) parents.push_back(v.tracked() ? v.idx : tape->leaf(v.v));
  for (const Var& v : mu) parents.push_back(v.tracked() ? v.idx : tape->leaf(v.v));

  auto backward = [llt, alpha, n](double g, double* out) {
    // d ll / d K = 0.5 (alpha alpha^T - K^{-1}); d ll / d mu = alpha.
    Eigen::MatrixXd kinv = llt->solve(Eigen::MatrixXd::Identity(n, n));
    std::size_t p = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j) {
        const double dk = 0.5 * ((*alpha)(i) * (*alpha)(j) - kinv(i, j));
        out[p++] = g * (i == j ? dk : 2.0 * dk);
      }
    for (int i = 0; i < n; ++i) out[p++] = g * (*alpha)(i);
  };

  const std::int32_t idx = tape->custom(std::move(parents), ll, std::move(backward));
  return Var(ll, idx);
}

double gaussian_logpdf(const Eigen::MatrixXd& k, const Eigen::VectorXd& mu,
                       const Eigen::VectorXd& y) {
  const int n = static_cast<int>(y.size());
  Eigen::LLT<Eigen::MatrixXd> llt(k);
  if (llt.info() != Eigen::Success)
    throw NumericalError("gaussian_logpdf: covariance not positive definite");
  const Eigen::VectorXd resid = y - mu;
  const Eigen::VectorXd alpha = llt.solve(resid);
  double logdet = 0.0;
  for (int i = 0; i < n; ++i) logdet += 2.0 * std::log(llt.matrixLLT()(i, i));
  return -0.5 * resid.dot(alpha) - 0.5 * logdet - 0.5 * n * std::log(2.0 * M_PI);
}

}  // namespace fedcausal::ad
