#pragma once

// End-to-end orchestration shared by the CLI and the acceptance suite:
// config parsing, staged training over either transport, and effect
// estimation / metric computation per estimator.

#include <memory>

#include <json.hpp>

#include "fedcausal/causalfi.hpp"
#include "fedcausal/causalrff.hpp"
#include "fedcausal/datagen.hpp"
#include "fedcausal/eval.hpp"
#include "fedcausal/fedci.hpp"
#include "fedcausal/federation.hpp"

namespace fedcausal {

struct AppConfig {
  DgpConfig dgp;
  KernelSpec kernel;
  std::string estimator = "fedci";
  FedCiConfig fedci;
  CausalRffConfig causalrff;
  CausalFiConfig causalfi;
  TrainConfig train;
  double split_train = 0.05, split_test = 0.45, split_val = 0.40;
  std::uint64_t split_seed = 77;
  int eval_mc_samples = 50;  // posterior draws at prediction time (fedci)
  int eval_cate_samples = 100;
};

AppConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const AppConfig& cfg);
std::string config_hash(const nlohmann::json& j);  // hex prefix naming the run dir

int stage_count(const std::string& estimator);

// Stage objectives: fedci has one stage; causalrff trains the structural
// model then the auxiliaries; causalfi trains the confounder model then the
// surrogates (which need the stage-1 result).
std::unique_ptr<FederatedObjective> make_stage_objective(const AppConfig& cfg, int stage,
                                                         const ParameterVector* prev);

struct TrainedModel {
  std::string estimator;
  std::vector<ParameterVector> stage_params;
  std::vector<std::vector<RoundLogEntry>> stage_logs;
};

TrainedModel train_all_stages(const AppConfig& cfg, const FederatedDataset& shards);

// Socket-mode counterparts: the coordinator accepts `expected_workers`
// connections and runs every stage over them; a worker serves all stages of
// the configured estimator on one connection.
TrainedModel coordinate_all_stages(const AppConfig& cfg, std::vector<Channel*> workers);
void serve_worker_stages(const AppConfig& cfg, Channel& channel, const SourceDataset& shard);

// Train/test split applied per source.
struct SplitShards {
  FederatedDataset train;
  FederatedDataset test;
};
SplitShards split_shards(const AppConfig& cfg, const FederatedDataset& data);

struct EstimateOutput {
  std::vector<int> source_ids;
  std::vector<Eigen::VectorXd> ite_mean;  // per source, over its eval records
  std::vector<Eigen::VectorXd> ite_var;
  std::vector<double> local_ate;
  double global_ate = 0.0;
  nlohmann::json posterior;  // estimator-specific distribution summary
};

// Effects on the eval shards. FedCI conditions each source's predictions on
// train + eval observed outcomes; CausalRFF and CausalFI use covariates (and
// observed confounders) only.
EstimateOutput estimate_all(const AppConfig& cfg, const TrainedModel& model,
                            const FederatedDataset& train_shards,
                            const FederatedDataset& eval_shards, std::uint64_t seed);

MetricReport metrics_for(const EstimateOutput& est, const GroundTruth& truth,
                         const std::vector<std::vector<std::size_t>>& eval_indices,
                         const std::string& cell);

// Serialization of trained models.
void write_model(const TrainedModel& model, const std::string& dir);
TrainedModel read_model(const std::string& dir);

}  // namespace fedcausal
