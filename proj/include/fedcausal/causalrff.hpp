#pragma once

// Adaptive transfer estimator under latent confounding. Structural equations
// are parameterized through shared Random Fourier Feature maps with
// per-source weight vectors combined by learned [0,1] transfer coefficients;
// the variational objective decomposes into per-source components.

#include <Eigen/Dense>
#include <memory>

#include "fedcausal/dataset.hpp"
#include "fedcausal/kernels.hpp"
#include "fedcausal/mh.hpp"
#include "fedcausal/params.hpp"

namespace fedcausal {

enum class RffFamily { Y0, Y1, W, X, Q0, Q1 };

struct CausalRffConfig {
  KernelSpec kernel;
  int feature_count = 50;  // B (phi has 2B entries)
  int d_z = 5;
  int mc_samples = 5;      // reparameterization draws per record
  double ridge = 1e-3;     // zeta
  double ridge_w = 1e-3;   // zeta_w (treatment auxiliary)
  double ridge_y = 1e-3;   // zeta_y (outcome auxiliary)
  double sigma_z = 1.0;    // latent prior scale (fixed)
  double sigma_y_init = 1.0;
  double sigma_x_init = 1.0;
  double sigma_q_init = 0.5;
  bool adaptive = true;    // transfer coefficients trained; false pins them at 0
  std::vector<int> x_binary;  // per-dimension flag; empty = all continuous
  int n_posterior = 200;
  int burn_in = 100;
  int cate_chain_burn = 20;  // chain length per latent draw inside CATE
  bool use_mh = true;        // false: draw latents from the variational proposal
};

// Conditional distributions driving the forward-sampling effect pipeline.
// The RFF parameterization implements this; enumeration oracles in tests
// provide alternative implementations of the same contract.
class GenerativeModel {
 public:
  virtual ~GenerativeModel() = default;
  virtual int z_dim() const = 0;
  // log p_s(y|z,w) + log p_s(w|z) + log p_s(x|z) + log p(z), the unnormalized
  // latent posterior.
  virtual double log_joint(const Eigen::VectorXd& z, double y, int w,
                           const Eigen::VectorXd& x) const = 0;
  virtual double outcome_mean(int w, const Eigen::VectorXd& z) const = 0;
  virtual double treat_prob(const Eigen::VectorXd& x) const = 0;
  virtual double sample_outcome(int w, const Eigen::VectorXd& x, Rng& rng) const = 0;
  virtual Eigen::VectorXd proposal_sample(double y, int w, const Eigen::VectorXd& x,
                                          Rng& rng) const = 0;
  virtual double proposal_logpdf(const Eigen::VectorXd& z, double y, int w,
                                 const Eigen::VectorXd& x) const = 0;
};

// Draws from p_s(z | x, y, w): either the exact posterior through the
// independent-proposal MH chain, or plain variational draws.
MhResult mh_independent_sample(const GenerativeModel& model, double y, int w,
                               const Eigen::VectorXd& x, int n_samples, int burn_in,
                               std::uint64_t seed, bool use_mh = true);

// CATE(x) via the five-step forward-sampling procedure; one latent sample set
// is evaluated under both interventions.
double estimate_cate(const GenerativeModel& model, const Eigen::VectorXd& x, int n_samples,
                     int chain_burn, std::uint64_t seed, bool use_mh = true);

double estimate_local_ate(const GenerativeModel& model, const Eigen::MatrixXd& x_rows,
                          int n_samples, int chain_burn, std::uint64_t seed, bool use_mh = true);

// Weighted average of local ATE values: sum n_s ate_s / sum n_s.
double estimate_global_ate(const std::vector<std::pair<double, int>>& local);

struct MinimaxBounds {
  double latent = 0.0;  // theta parameters, latent-variable model
  double psi = 0.0;     // treatment auxiliary
  double beta = 0.0;    // outcome auxiliary
};

// Closed-form minimax lower bounds (diagnostic reporting only). Row sums are
// the per-source transfer-coefficient totals excluding the diagonal.
MinimaxBounds minimax_bounds(const std::vector<int>& n_per_source, int feature_count, int d_x,
                             const std::vector<double>& lambda_row_sums,
                             const std::vector<double>& gamma_row_sums,
                             const std::vector<double>& eta_row_sums, double sigma);

class CausalRffObjective : public FederatedObjective {
 public:
  explicit CausalRffObjective(CausalRffConfig cfg) : cfg_(std::move(cfg)) {}

  std::string name() const override { return "causalrff"; }
  int direction() const override { return -1; }  // loss: descend

  ParameterVector initial_params(const std::vector<SourceInfo>& sources,
                                 std::uint64_t seed) const override;
  // J^(s): negative ELBO plus the (1/m) ridge over every source's weights.
  EvalResult eval(const ParameterVector& theta, const SourceDataset& shard,
                  std::uint64_t round_seed) const override;

  // The ELBO piece alone (maximization orientation), same MC noise stream.
  EvalResult elbo_hat_source(const ParameterVector& theta, const SourceDataset& shard,
                             std::uint64_t round_seed) const;

  // Pooled-data objective on one tape (sum of the listed components).
  EvalResult eval_pooled(const ParameterVector& theta,
                         const std::vector<const SourceDataset*>& shards,
                         std::uint64_t round_seed) const;

  const CausalRffConfig& config() const { return cfg_; }

 private:
  EvalResult eval_impl(const ParameterVector& theta,
                       const std::vector<const SourceDataset*>& shards,
                       std::uint64_t round_seed, bool with_ridge) const;
  CausalRffConfig cfg_;
};

class CausalRffAuxObjective : public FederatedObjective {
 public:
  explicit CausalRffAuxObjective(CausalRffConfig cfg) : cfg_(std::move(cfg)) {}

  std::string name() const override { return "causalrff_aux"; }
  int direction() const override { return -1; }

  ParameterVector initial_params(const std::vector<SourceInfo>& sources,
                                 std::uint64_t seed) const override;
  EvalResult eval(const ParameterVector& theta, const SourceDataset& shard,
                  std::uint64_t round_seed) const override;  // J_w + J_y

  EvalResult eval_treatment(const ParameterVector& theta, const SourceDataset& shard) const;
  EvalResult eval_outcome(const ParameterVector& theta, const SourceDataset& shard) const;
  EvalResult eval_pooled(const ParameterVector& theta,
                         const std::vector<const SourceDataset*>& shards) const;

 private:
  EvalResult eval_impl(const ParameterVector& theta,
                       const std::vector<const SourceDataset*>& shards, bool with_w,
                       bool with_y) const;
  CausalRffConfig cfg_;
};

// The trained structural + auxiliary distributions of one source.
class RffCausalModel : public GenerativeModel {
 public:
  RffCausalModel(const ParameterVector& theta, const ParameterVector& aux_theta, int source_id,
                 double aux_outcome_sd);

  int z_dim() const override { return d_z_; }
  double log_joint(const Eigen::VectorXd& z, double y, int w,
                   const Eigen::VectorXd& x) const override;
  double outcome_mean(int w, const Eigen::VectorXd& z) const override;
  double treat_prob(const Eigen::VectorXd& x) const override;
  double sample_outcome(int w, const Eigen::VectorXd& x, Rng& rng) const override;
  Eigen::VectorXd proposal_sample(double y, int w, const Eigen::VectorXd& x,
                                  Rng& rng) const override;
  double proposal_logpdf(const Eigen::VectorXd& z, double y, int w,
                         const Eigen::VectorXd& x) const override;

  // Transfer-combined prediction heads (weights theta_c^s + sum_v l^{sv} theta_c^v).
  Eigen::VectorXd predict_family(RffFamily family, const Eigen::VectorXd& input) const;
  const TransferMatrix& lambda() const { return lambda_; }

 private:
  int d_z_, d_x_, b_;
  double sigma_y_, sigma_x_, sigma_q_, sigma_z_, aux_sd_;
  double y_center_ = 0.0, y_scale_ = 1.0;
  std::vector<int> x_binary_;
  RffMap phi_z_, phi_q_, phi_aux_;
  Eigen::VectorXd comb_y0_, comb_y1_, comb_w_, comb_psi_;
  Eigen::MatrixXd comb_x_, comb_q0_, comb_q1_;  // (out_dim x 2B)
  Eigen::VectorXd comb_beta0_, comb_beta1_;
  TransferMatrix lambda_{1};
};

// Residual scale of the auxiliary outcome model on this source's own records,
// used when sampling y ~ p_s(y | x, w).
double aux_outcome_sd(const ParameterVector& aux_theta, const SourceDataset& shard);

// Reads the learned transfer matrices back out of parameter vectors.
TransferMatrix read_transfer(const ParameterVector& theta, const std::string& segment,
                             bool adaptive);

}  // namespace fedcausal
