#pragma once

// Bayesian GP-based federated estimator. The joint potential-outcome model
// couples a per-source GP (intra-dependency) with a cross-source offset
// learned from moment statistics (inter-dependency); Wishart-distributed
// outcome scales; decomposable ELBO trained by gradient aggregation.

#include <Eigen/Dense>

#include "fedcausal/dataset.hpp"
#include "fedcausal/kernels.hpp"
#include "fedcausal/params.hpp"

namespace fedcausal {

struct FedCiPrior {
  double psi_scale = 1.0;   // E[Psi] diagonal
  double psi_corr = 0.5;    // prior correlation of the two outcome signals
  double d0 = 3.0;          // Wishart prior degrees of freedom for Psi
  double sigma_scale = 0.1; // E[Sigma] diagonal
  double sigma_corr = 0.0;  // noise cross-correlation; never learned
  double n0 = 3.0;          // Wishart prior degrees of freedom for Sigma

  void validate() const {
    if (d0 <= 2.0 || n0 <= 2.0) throw ConfigError("wishart prior df must exceed 2");
    if (psi_scale <= 0.0 || sigma_scale <= 0.0) throw ConfigError("prior scales must be positive");
  }
};

struct FedCiConfig {
  FedCiPrior prior;
  double ell_k = 0.0;  // within-source kernel lengthscale; 0 = sqrt(d_x) heuristic
  double ell_m = 0.0;  // between-source prior kernel on moment vectors
  double ell_u = 0.0;  // between-source posterior kernel on moment vectors
  int mc_samples = 10;
  bool use_inter_dependency = true;
};

// --- Lemma-level covariance construction (pure helpers) ---

// Psi (x) K + Sigma (x) I, the joint covariance of [y(0); y(1)].
Eigen::MatrixXd joint_covariance(const Eigen::MatrixXd& k, const Eigen::Matrix2d& psi,
                                 const Eigen::Matrix2d& sigma);

// (Psi^{1/2} (x) I) [mu0 + g0; mu1 + g1].
Eigen::VectorXd joint_mean(const Eigen::VectorXd& mu0, const Eigen::VectorXd& mu1, double g0,
                           double g1, const Eigen::Matrix2d& psi);

struct ObsMisBlocks {
  Eigen::VectorXd mu_obs, mu_mis;
  Eigen::MatrixXd k_obs, k_mis, k_om;  // k_om(i,j) = Cov(y_obs_i, y_mis_j)
};

ObsMisBlocks obs_mis_blocks(const Eigen::MatrixXd& k, const Eigen::VectorXd& w,
                            const Eigen::Matrix2d& psi, const Eigen::Matrix2d& sigma,
                            const Eigen::VectorXd& mu0, const Eigen::VectorXd& mu1, double g0,
                            double g1);

// --- Posterior and causal effects ---

struct OutcomePosterior {
  Eigen::VectorXd mean;  // E[y_mis | everything observed]
  Eigen::MatrixXd cov;
};

struct EffectEstimate {
  Eigen::VectorXd ite_mean;
  Eigen::VectorXd ite_var;
  double ate_mean = 0.0;
  double ate_var = 0.0;
};

EffectEstimate estimate_effects(const OutcomePosterior& post, const SourceDataset& shard);

// One reparameterized draw of a scaled 2x2 Wishart from the (nu1, nu2, rho,
// df) variational parameterization and three standard-normal variates; the
// construction used inside training and prediction.
Eigen::Matrix2d wishart_reparam_draw(double nu1, double nu2, double rho, double df,
                                     const double z[3]);

// Closed-form KL[ W2(Vq(nu1, nu2, rho), dq) || W2(V0, d0) ], the divergence
// used by the ELBO.
double wishart_kl2(double nu1, double nu2, double rho, double dq, const Eigen::Matrix2d& v0,
                   double d0);

class FedCiObjective : public FederatedObjective {
 public:
  explicit FedCiObjective(FedCiConfig cfg) : cfg_(std::move(cfg)) { cfg_.prior.validate(); }

  std::string name() const override { return "fedci"; }
  int direction() const override { return +1; }  // ELBO: ascend

  ParameterVector initial_params(const std::vector<SourceInfo>& sources,
                                 std::uint64_t seed) const override;

  EvalResult eval(const ParameterVector& theta, const SourceDataset& shard,
                  std::uint64_t round_seed) const override;

  // Pooled-data evaluation on one tape: the sum of the per-source components
  // for the listed shards, sharing the MC noise stream with eval().
  EvalResult eval_pooled(const ParameterVector& theta,
                         const std::vector<const SourceDataset*>& shards,
                         std::uint64_t round_seed) const;

  // Predictive distribution of the missing outcomes of `target`, conditioning
  // on the target's observed outcomes, the shared parameters, and the moment
  // statistics of every source carried inside theta.
  OutcomePosterior predict_missing(const ParameterVector& theta, const SourceDataset& target,
                                   int mc_samples, std::uint64_t seed) const;

  const FedCiConfig& config() const { return cfg_; }

 private:
  FedCiConfig cfg_;
};

}  // namespace fedcausal
