#pragma once

// Federated estimation from incomplete confounders: variational learning of
// p(u | y, w, x) restricted to observed entries, local pseudo-data
// generation, surrogate models for completion and outcome, and the two-level
// ATE/CATE sampling algorithms plus the missing-mechanism voting wrapper.

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <mutex>
#include <optional>

#include "fedcausal/bnn.hpp"
#include "fedcausal/dataset.hpp"
#include "fedcausal/params.hpp"

namespace fedcausal {

enum class UFamily { Gaussian, Bernoulli, Poisson, Categorical };

struct FamilySpec {
  UFamily family = UFamily::Gaussian;
  int levels = 0;  // categorical only

  int param_width() const {
    switch (family) {
      case UFamily::Gaussian: return 2;
      case UFamily::Bernoulli: return 1;
      case UFamily::Poisson: return 1;
      case UFamily::Categorical: return levels;
    }
    return 0;
  }
};

struct CausalFiConfig {
  std::vector<FamilySpec> u_families;  // per confounder dimension; empty = all Gaussian
  std::vector<int> hidden{20, 20, 20};
  double prior_sd = 1.0;
  int mc_theta = 1;          // parameter draws per ELBO evaluation
  double pseudo_per_n = 5.0; // pseudo rows generated per real record
  int pseudo_theta_draws = 10;
  int k_draws = 100;  // K posterior parameter draws for Algorithm 2
  int n_completions = 20;  // N
  int m_outcome = 20;      // M
  std::uint64_t stage_seed = 1234;  // pseudo-data and mask generation stream
};

// Stage 1: q_phi(theta) over the two (y, x) -> lambda heads of p(u|y,w,x).
class CausalFiThetaObjective : public FederatedObjective {
 public:
  explicit CausalFiThetaObjective(CausalFiConfig cfg) : cfg_(std::move(cfg)) {}

  std::string name() const override { return "causalfi"; }
  int direction() const override { return +1; }

  ParameterVector initial_params(const std::vector<SourceInfo>& sources,
                                 std::uint64_t seed) const override;
  EvalResult eval(const ParameterVector& theta, const SourceDataset& shard,
                  std::uint64_t round_seed) const override;
  // Pooled-data ELBO on one tape with the same parameter-draw stream.
  EvalResult eval_pooled(const ParameterVector& theta,
                         const std::vector<const SourceDataset*>& shards,
                         std::uint64_t round_seed) const;

 private:
  CausalFiConfig cfg_;
};

// Complete synthetic confounder rows paired with resampled (y, w, x).
struct PseudoData {
  Eigen::MatrixXd x;   // n_p x d_x
  Eigen::VectorXd y;   // n_p
  Eigen::VectorXi w;   // n_p
  Eigen::MatrixXd u;   // n_p x d, fully complete
  Eigen::MatrixXi mask;  // surrogate-training masks, 1 = kept visible
};

// One pseudo row set from a single theta draw (flat weight vectors for the
// w=0 and w=1 heads).
PseudoData generate_pseudo(const ParameterVector& theta_params,
                           const Eigen::VectorXd& theta0_draw, const Eigen::VectorXd& theta1_draw,
                           const SourceDataset& source, int count, std::uint64_t seed);

// Stage 2: q over the surrogate completion model p(u_mis | x, u_obs) and the
// outcome model p(y | w, x, u), trained on locally generated pseudo data.
// The trained stage-1 posterior rides along inside the broadcast parameters
// as fixed "stage1/..." segments, so workers regenerate identical pseudo rows
// from their own shard without any extra message kind.
class CausalFiSurrogateObjective : public FederatedObjective {
 public:
  explicit CausalFiSurrogateObjective(CausalFiConfig cfg) : cfg_(std::move(cfg)) {}
  CausalFiSurrogateObjective(CausalFiConfig cfg, ParameterVector theta_stage)
      : cfg_(std::move(cfg)), theta_stage_(std::move(theta_stage)) {}

  std::string name() const override { return "causalfi_surrogate"; }
  int direction() const override { return +1; }

  // Requires the stage-1 result (coordinator side).
  ParameterVector initial_params(const std::vector<SourceInfo>& sources,
                                 std::uint64_t seed) const override;
  EvalResult eval(const ParameterVector& theta, const SourceDataset& shard,
                  std::uint64_t round_seed) const override;
  EvalResult eval_pooled(const ParameterVector& theta,
                         const std::vector<const SourceDataset*>& shards,
                         std::uint64_t round_seed) const;

  const PseudoData& pseudo_for(const ParameterVector& theta, const SourceDataset& shard) const;

 private:
  CausalFiConfig cfg_;
  ParameterVector theta_stage_;  // empty on workers
  mutable std::mutex cache_mutex_;
  mutable std::map<int, PseudoData> pseudo_cache_;
};

struct SurrogateDraws {
  std::vector<Eigen::VectorXd> theta_u;   // K flat weight vectors
  std::vector<Eigen::VectorXd> theta_y0;
  std::vector<Eigen::VectorXd> theta_y1;
};

SurrogateDraws draw_surrogate_params(const ParameterVector& surrogate_params, int k_draws,
                                     std::uint64_t seed);

struct LocalEffectSamples {
  Eigen::MatrixXd cate;  // n' x K
  Eigen::VectorXd ate;   // K
};

// Algorithm: for every record draw N completions of the missing confounders,
// then M outcome draws under each intervention with common random numbers
// across the two arms.
LocalEffectSamples algorithm3_local(const ParameterVector& surrogate_params,
                                    const SurrogateDraws& draws, const SourceDataset& eval_data,
                                    int n_completions, int m_outcome, std::uint64_t seed);

struct EffectSummary {
  double mean = 0.0, sd = 0.0, skewness = 0.0, kurtosis = 0.0;
  double q025 = 0.0, q975 = 0.0;
};

EffectSummary summarize_samples(const Eigen::VectorXd& samples);

struct EffectSamples {
  Eigen::VectorXd ate_samples;  // K
  EffectSummary summary;
};

// Per-draw weighted average of local ATE samples, then higher-order summary
// statistics over the K draws.
EffectSamples algorithm2_global(const std::vector<std::pair<Eigen::VectorXd, int>>& local_ates);

// --- Remark-style bias demonstration -------------------------------------

enum class OutcomeLink { Linear, Softplus, Exp };

struct BiasDemoConfig {
  OutcomeLink link = OutcomeLink::Softplus;
  double cond_mean = 0.0;  // distribution of the missing confounder
  double cond_sd = 1.0;
  double slope = 1.0, intercept = 0.0;
  int mc_draws = 200000;
  std::uint64_t seed = 7;
};

struct BiasDemoResult {
  double bias_imputation = 0.0;      // plug-in-the-conditional-mean estimator
  double bias_distributional = 0.0;  // expectation over the conditional law
  double mc_stderr = 0.0;
};

BiasDemoResult imputation_bias_demo(const BiasDemoConfig& cfg);

// --- Missing-mechanism voting ---------------------------------------------

enum class MissingMechanism { MCAR, MAR };

struct SourceVote {
  int source_id = 0;
  bool abstained = false;
  MissingMechanism verdict = MissingMechanism::MCAR;
  double min_adjusted_p = 1.0;
};

struct VoteResult {
  MissingMechanism verdict = MissingMechanism::MAR;
  std::vector<SourceVote> locals;
};

// A local test returns (verdict, p-value) or nullopt to abstain.
using LocalMissingTest =
    std::function<std::optional<std::pair<MissingMechanism, double>>(const SourceDataset&)>;

std::optional<std::pair<MissingMechanism, double>> default_local_missing_test(
    const SourceDataset& source, double alpha);

VoteResult missing_mechanism_vote(const FederatedDataset& sources,
                                  const LocalMissingTest& local_test = nullptr,
                                  double alpha = 0.05);

}  // namespace fedcausal
