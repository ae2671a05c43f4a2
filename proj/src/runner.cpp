#include "fedcausal/runner.hpp"

#include <openssl/sha.h>

#include <filesystem>
#include <fstream>
#include <numeric>

#include "fedcausal/rng.hpp"

namespace fedcausal {

namespace {

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

AppConfig config_from_json(const nlohmann::json& j) {
  AppConfig cfg;
  if (j.contains("dgp")) {
    const auto& d = j.at("dgp");
    maybe(d, "family", cfg.dgp.family);
    maybe(d, "n_per_source", cfg.dgp.n_per_source);
    maybe(d, "sources", cfg.dgp.sources);
    maybe(d, "d_x", cfg.dgp.d_x);
    maybe(d, "d_u", cfg.dgp.d_u);
    maybe(d, "seed", cfg.dgp.seed);
    maybe(d, "scale_set", cfg.dgp.scale_set);
    maybe(d, "sigma0", cfg.dgp.sigma0);
    maybe(d, "sigma1", cfg.dgp.sigma1);
    maybe(d, "delta", cfg.dgp.delta);
    maybe(d, "rho", cfg.dgp.rho);
    maybe(d, "missing_e0", cfg.dgp.missing_e0);
    maybe(d, "missing_e12_lo", cfg.dgp.missing_e12_lo);
    maybe(d, "missing_e12_hi", cfg.dgp.missing_e12_hi);
    maybe(d, "outcome_link", cfg.dgp.outcome_link);
  }
  if (j.contains("kernel")) {
    const auto& k = j.at("kernel");
    std::string family = "gaussian";
    maybe(k, "family", family);
    cfg.kernel.family = kernel_family_from_string(family);
    maybe(k, "lengthscale", cfg.kernel.lengthscale);
    maybe(k, "matern_nu", cfg.kernel.matern_nu);
  }
  if (j.contains("estimator")) {
    const auto& e = j.at("estimator");
    maybe(e, "name", cfg.estimator);
    if (e.contains("fedci")) {
      const auto& f = e.at("fedci");
      maybe(f, "mc_samples", cfg.fedci.mc_samples);
      maybe(f, "use_inter_dependency", cfg.fedci.use_inter_dependency);
      maybe(f, "ell_k", cfg.fedci.ell_k);
      maybe(f, "ell_m", cfg.fedci.ell_m);
      maybe(f, "ell_u", cfg.fedci.ell_u);
      maybe(f, "psi_scale", cfg.fedci.prior.psi_scale);
      maybe(f, "psi_corr", cfg.fedci.prior.psi_corr);
      maybe(f, "sigma_scale", cfg.fedci.prior.sigma_scale);
      maybe(f, "sigma_corr", cfg.fedci.prior.sigma_corr);
      maybe(f, "d0", cfg.fedci.prior.d0);
      maybe(f, "n0", cfg.fedci.prior.n0);
    }
    if (e.contains("causalrff")) {
      const auto& c = e.at("causalrff");
      maybe(c, "feature_count", cfg.causalrff.feature_count);
      maybe(c, "d_z", cfg.causalrff.d_z);
      maybe(c, "mc_samples", cfg.causalrff.mc_samples);
      maybe(c, "ridge", cfg.causalrff.ridge);
      maybe(c, "ridge_w", cfg.causalrff.ridge_w);
      maybe(c, "ridge_y", cfg.causalrff.ridge_y);
      maybe(c, "adaptive", cfg.causalrff.adaptive);
      maybe(c, "x_binary", cfg.causalrff.x_binary);
      maybe(c, "n_posterior", cfg.causalrff.n_posterior);
      maybe(c, "burn_in", cfg.causalrff.burn_in);
      maybe(c, "cate_chain_burn", cfg.causalrff.cate_chain_burn);
      maybe(c, "use_mh", cfg.causalrff.use_mh);
      maybe(c, "sigma_y_init", cfg.causalrff.sigma_y_init);
      maybe(c, "sigma_x_init", cfg.causalrff.sigma_x_init);
      maybe(c, "sigma_q_init", cfg.causalrff.sigma_q_init);
    }
    if (e.contains("causalfi")) {
      const auto& c = e.at("causalfi");
      if (c.contains("hidden")) cfg.causalfi.hidden = c.at("hidden").get<std::vector<int>>();
      maybe(c, "prior_sd", cfg.causalfi.prior_sd);
      maybe(c, "mc_theta", cfg.causalfi.mc_theta);
      maybe(c, "pseudo_per_n", cfg.causalfi.pseudo_per_n);
      maybe(c, "pseudo_theta_draws", cfg.causalfi.pseudo_theta_draws);
      maybe(c, "k_draws", cfg.causalfi.k_draws);
      maybe(c, "n_completions", cfg.causalfi.n_completions);
      maybe(c, "m_outcome", cfg.causalfi.m_outcome);
      maybe(c, "stage_seed", cfg.causalfi.stage_seed);
    }
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    maybe(t, "max_rounds", cfg.train.max_rounds);
    maybe(t, "learning_rate", cfg.train.learning_rate);
    maybe(t, "tolerance", cfg.train.tolerance);
    maybe(t, "tolerance_window", cfg.train.tolerance_window);
    maybe(t, "master_seed", cfg.train.master_seed);
    maybe(t, "worker_timeout_ms", cfg.train.worker_timeout_ms);
    maybe(t, "dedup", cfg.train.dedup);
    maybe(t, "dedup_keep_limit", cfg.train.dedup_keep_limit);
    maybe(t, "dedup_salt", cfg.train.dedup_salt);
    std::string opt = "adam";
    maybe(t, "optimizer", opt);
    if (opt == "sgd") cfg.train.optimizer = TrainConfig::Optimizer::Sgd;
    else if (opt == "adam") cfg.train.optimizer = TrainConfig::Optimizer::Adam;
    else throw ConfigError("train.optimizer must be 'sgd' or 'adam'");
    if (t.contains("splits")) {
      const auto s = t.at("splits").get<std::vector<double>>();
      if (s.size() != 3) throw ConfigError("train.splits must have 3 entries");
      cfg.split_train = s[0];
      cfg.split_test = s[1];
      cfg.split_val = s[2];
    }
    maybe(t, "split_seed", cfg.split_seed);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    maybe(e, "mc_samples", cfg.eval_mc_samples);
    maybe(e, "cate_samples", cfg.eval_cate_samples);
  }
  if (const char* env_seed = std::getenv("FEDCAUSAL_SEED")) {
    cfg.train.master_seed = std::strtoull(env_seed, nullptr, 10);
    cfg.dgp.seed = cfg.train.master_seed;
  }
  return cfg;
}

nlohmann::json config_to_json(const AppConfig& cfg) {
  nlohmann::json j;
  j["dgp"] = {{"family", cfg.dgp.family},
              {"n_per_source", cfg.dgp.n_per_source},
              {"sources", cfg.dgp.sources},
              {"d_x", cfg.dgp.d_x},
              {"d_u", cfg.dgp.d_u},
              {"seed", cfg.dgp.seed},
              {"scale_set", cfg.dgp.scale_set},
              {"sigma0", cfg.dgp.sigma0},
              {"sigma1", cfg.dgp.sigma1},
              {"delta", cfg.dgp.delta},
              {"rho", cfg.dgp.rho},
              {"missing_e0", cfg.dgp.missing_e0},
              {"outcome_link", cfg.dgp.outcome_link}};
  j["kernel"] = {{"family", to_string(cfg.kernel.family)},
                 {"lengthscale", cfg.kernel.lengthscale},
                 {"matern_nu", cfg.kernel.matern_nu}};
  j["estimator"] = {{"name", cfg.estimator}};
  j["train"] = {{"max_rounds", cfg.train.max_rounds},
                {"learning_rate", cfg.train.learning_rate},
                {"optimizer",
                 cfg.train.optimizer == TrainConfig::Optimizer::Sgd ? "sgd" : "adam"},
                {"master_seed", cfg.train.master_seed},
                {"splits", {cfg.split_train, cfg.split_test, cfg.split_val}},
                {"split_seed", cfg.split_seed}};
  j["eval"] = {{"mc_samples", cfg.eval_mc_samples}, {"cate_samples", cfg.eval_cate_samples}};
  return j;
}

std::string config_hash(const nlohmann::json& j) {
  const std::string dump = j.dump();
  unsigned char out[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(dump.data()), dump.size(), out);
  static const char* hex = "0123456789abcdef";
  std::string encoded;
  for (int i = 0; i < 8; ++i) {
    encoded += hex[out[i] >> 4];
    encoded += hex[out[i] & 0xf];
  }
  return encoded;
}

int stage_count(const std::string& estimator) {
  if (estimator == "fedci") return 1;
  if (estimator == "causalrff") return 2;
  if (estimator == "causalfi") return 2;
  if (estimator == "selftest") return 1;
  throw ConfigError("unknown estimator: " + estimator);
}

namespace {

// Quadratic toy used by the CLI self-test: J^s = -||theta - c_s||^2 / 2,
// whose summed-gradient fixed point is the mean of the per-source centers.
class QuadraticToyObjective : public FederatedObjective {
 public:
  std::string name() const override { return "selftest"; }
  int direction() const override { return +1; }

  ParameterVector initial_params(const std::vector<SourceInfo>& sources,
                                 std::uint64_t /*seed*/) const override {
    ParameterVector theta;
    ParamSegment meta;
    meta.name = "meta";
    meta.shape = {1};
    meta.values = {static_cast<double>(sources.size())};
    meta.trainable = false;
    theta.add(meta);
    ParamSegment seg;
    seg.name = "toy/theta";
    seg.shape = {2};
    seg.values = {0.0, 0.0};
    theta.add(seg);
    return theta;
  }

  EvalResult eval(const ParameterVector& theta, const SourceDataset& shard,
                  std::uint64_t /*round_seed*/) const override {
    const auto& t = theta.segment("toy/theta").values;
    // Center depends only on the source id so every transport sees the same toy.
    const double c0 = static_cast<double>(shard.source_id());
    const double c1 = -0.5 * static_cast<double>(shard.source_id());
    EvalResult out;
    out.objective = -0.5 * ((t[0] - c0) * (t[0] - c0) + (t[1] - c1) * (t[1] - c1));
    out.gradient = theta.zeros_like();
    out.gradient.segment("toy/theta").values = {c0 - t[0], c1 - t[1]};
    return out;
  }
};

}  // namespace

std::unique_ptr<FederatedObjective> make_stage_objective(const AppConfig& cfg, int stage,
                                                         const ParameterVector* prev) {
  if (cfg.estimator == "selftest") return std::make_unique<QuadraticToyObjective>();
  if (cfg.estimator == "fedci") {
    FedCiConfig fc = cfg.fedci;
    return std::make_unique<FedCiObjective>(fc);
  }
  if (cfg.estimator == "causalrff") {
    CausalRffConfig rc = cfg.causalrff;
    rc.kernel = cfg.kernel;
    if (stage == 0) return std::make_unique<CausalRffObjective>(rc);
    return std::make_unique<CausalRffAuxObjective>(rc);
  }
  if (cfg.estimator == "causalfi") {
    if (stage == 0) return std::make_unique<CausalFiThetaObjective>(cfg.causalfi);
    if (prev == nullptr)
      return std::make_unique<CausalFiSurrogateObjective>(cfg.causalfi);
    return std::make_unique<CausalFiSurrogateObjective>(cfg.causalfi, *prev);
  }
  throw ConfigError("unknown estimator: " + cfg.estimator);
}

TrainedModel train_all_stages(const AppConfig& cfg, const FederatedDataset& shards) {
  TrainedModel model;
  model.estimator = cfg.estimator;
  const int stages = stage_count(cfg.estimator);
  const ParameterVector* prev = nullptr;
  for (int stage = 0; stage < stages; ++stage) {
    auto objective = make_stage_objective(cfg, stage, prev);
    TrainConfig tc = cfg.train;
    tc.master_seed = derive_seed(cfg.train.master_seed, {0x57a6e, static_cast<std::uint64_t>(stage)});
    if (stage > 0) tc.dedup = false;  // dedup happens once, before the first stage
    TrainResult result = run_training(tc, *objective, shards);
    model.stage_params.push_back(std::move(result.params));
    model.stage_logs.push_back(std::move(result.log));
    prev = &model.stage_params.back();
  }
  return model;
}

TrainedModel coordinate_all_stages(const AppConfig& cfg, std::vector<Channel*> workers) {
  TrainedModel model;
  model.estimator = cfg.estimator;
  const int stages = stage_count(cfg.estimator);
  const ParameterVector* prev = nullptr;
  for (int stage = 0; stage < stages; ++stage) {
    auto objective = make_stage_objective(cfg, stage, prev);
    TrainConfig tc = cfg.train;
    tc.master_seed = derive_seed(cfg.train.master_seed, {0x57a6e, static_cast<std::uint64_t>(stage)});
    if (stage > 0) tc.dedup = false;
    TrainResult result = coordinate_training(tc, *objective, workers);
    model.stage_params.push_back(std::move(result.params));
    model.stage_logs.push_back(std::move(result.log));
    prev = &model.stage_params.back();
  }
  return model;
}

void serve_worker_stages(const AppConfig& cfg, Channel& channel, const SourceDataset& shard) {
  const int stages = stage_count(cfg.estimator);
  for (int stage = 0; stage < stages; ++stage) {
    auto objective = make_stage_objective(cfg, stage, nullptr);
    TrainConfig tc = cfg.train;
    if (stage > 0) tc.dedup = false;
    run_worker(tc, channel, *objective, shard);
  }
}

SplitShards split_shards(const AppConfig& cfg, const FederatedDataset& data) {
  SplitShards out;
  for (const SourceDataset& src : data) {
    const DatasetSplit sp =
        split(src, cfg.split_train, cfg.split_test, cfg.split_val,
              derive_seed(cfg.split_seed, {static_cast<std::uint64_t>(src.source_id())}));
    out.train.push_back(src.subset(sp.train));
    out.test.push_back(src.subset(sp.test));
  }
  return out;
}

EstimateOutput estimate_all(const AppConfig& cfg, const TrainedModel& model,
                            const FederatedDataset& train_shards,
                            const FederatedDataset& eval_shards, std::uint64_t seed) {
  EstimateOutput out;
  std::vector<std::pair<double, int>> locals;

  if (model.estimator == "fedci") {
    FedCiObjective objective(cfg.fedci);
    const ParameterVector& theta = model.stage_params.at(0);
    for (std::size_t s = 0; s < eval_shards.size(); ++s) {
      const SourceDataset& train = train_shards.at(s);
      const SourceDataset& eval = eval_shards[s];
      // Condition on train + eval observed outcomes; report effects on the
      // eval records (the tail block).
      std::vector<Record> combined(train.records());
      combined.insert(combined.end(), eval.records().begin(), eval.records().end());
      SourceDataset joint(eval.source_id(), std::move(combined));
      const OutcomePosterior post = objective.predict_missing(
          theta, joint, cfg.eval_mc_samples, derive_seed(seed, {0xe57, static_cast<std::uint64_t>(s)}));
      const int n_train = static_cast<int>(train.size());
      const int n_eval = static_cast<int>(eval.size());
      const Eigen::VectorXd w = eval.w_vector();
      const Eigen::VectorXd y = eval.y_vector();
      const Eigen::VectorXd sign = 2.0 * w.array() - 1.0;
      const Eigen::VectorXd mis_mean = post.mean.segment(n_train, n_eval);
      const Eigen::MatrixXd mis_cov = post.cov.block(n_train, n_train, n_eval, n_eval);
      out.ite_mean.push_back(sign.array() * (y - mis_mean).array());
      out.ite_var.push_back(mis_cov.diagonal());
      const double ate = sign.dot(y - mis_mean) / n_eval;
      const double ate_var = sign.dot(mis_cov * sign) / (static_cast<double>(n_eval) * n_eval);
      locals.emplace_back(ate, n_eval);
      out.source_ids.push_back(eval.source_id());
      if (s == 0)
        out.posterior = {{"source_id", eval.source_id()},
                         {"ate_mean", ate},
                         {"ate_var", ate_var},
                         {"ate_sd", std::sqrt(std::max(ate_var, 0.0))}};
    }
  } else if (model.estimator == "causalrff") {
    const ParameterVector& theta = model.stage_params.at(0);
    const ParameterVector& aux = model.stage_params.at(1);
    for (std::size_t s = 0; s < eval_shards.size(); ++s) {
      const SourceDataset& eval = eval_shards[s];
      const double sd = aux_outcome_sd(aux, train_shards.at(s));
      RffCausalModel m(theta, aux, eval.source_id(), sd);
      Eigen::VectorXd ite(eval.size());
      for (std::size_t i = 0; i < eval.size(); ++i) {
        Eigen::VectorXd x(eval.dim_x());
        for (std::size_t j = 0; j < eval.dim_x(); ++j) x(j) = eval.record(i).x[j];
        ite(i) = estimate_cate(m, x, cfg.eval_cate_samples, cfg.causalrff.cate_chain_burn,
                               derive_seed(seed, {0xca, static_cast<std::uint64_t>(s), i}),
                               cfg.causalrff.use_mh);
      }
      out.ite_mean.push_back(ite);
      out.ite_var.push_back(Eigen::VectorXd::Zero(eval.size()));
      locals.emplace_back(ite.mean(), static_cast<int>(eval.size()));
      out.source_ids.push_back(eval.source_id());
    }
  } else if (model.estimator == "causalfi") {
    const ParameterVector& surrogate = model.stage_params.at(1);
    const SurrogateDraws draws =
        draw_surrogate_params(surrogate, cfg.causalfi.k_draws, derive_seed(seed, {0xfed4}));
    std::vector<std::pair<Eigen::VectorXd, int>> local_samples;
    for (std::size_t s = 0; s < eval_shards.size(); ++s) {
      const SourceDataset& eval = eval_shards[s];
      const LocalEffectSamples samples = algorithm3_local(
          surrogate, draws, eval, cfg.causalfi.n_completions, cfg.causalfi.m_outcome,
          derive_seed(seed, {0xa13, static_cast<std::uint64_t>(s)}));
      out.ite_mean.push_back(samples.cate.rowwise().mean());
      Eigen::VectorXd var(eval.size());
      for (Eigen::Index i = 0; i < var.size(); ++i) {
        const double mu = samples.cate.row(i).mean();
        var(i) = (samples.cate.row(i).array() - mu).square().mean();
      }
      out.ite_var.push_back(var);
      locals.emplace_back(samples.ate.mean(), static_cast<int>(eval.size()));
      local_samples.emplace_back(samples.ate, static_cast<int>(eval.size()));
      out.source_ids.push_back(eval.source_id());
    }
    const EffectSamples global = algorithm2_global(local_samples);
    out.posterior = {{"ate_samples", std::vector<double>(global.ate_samples.data(),
                                                         global.ate_samples.data() +
                                                             global.ate_samples.size())},
                     {"mean", global.summary.mean},
                     {"sd", global.summary.sd},
                     {"skew", global.summary.skewness},
                     {"kurt", global.summary.kurtosis},
                     {"q025", global.summary.q025},
                     {"q975", global.summary.q975}};
  } else {
    throw ConfigError("estimate: unknown estimator " + model.estimator);
  }

  out.local_ate.clear();
  for (const auto& [ate, n] : locals) out.local_ate.push_back(ate);
  out.global_ate = estimate_global_ate(locals);
  return out;
}

MetricReport metrics_for(const EstimateOutput& est, const GroundTruth& truth,
                         const std::vector<std::vector<std::size_t>>& eval_indices,
                         const std::string& cell) {
  MetricReport report;
  std::vector<double> all_true, all_est;
  double true_tau_acc = 0.0;
  long true_n = 0;
  for (std::size_t s = 0; s < est.ite_mean.size(); ++s) {
    std::vector<double> t, e;
    for (std::size_t k = 0; k < eval_indices[s].size(); ++k) {
      const double tv = truth.ite[s](static_cast<Eigen::Index>(eval_indices[s][k]));
      t.push_back(tv);
      e.push_back(est.ite_mean[s](static_cast<Eigen::Index>(k)));
      all_true.push_back(tv);
      all_est.push_back(e.back());
      true_tau_acc += tv;
      ++true_n;
    }
    const PeheResult pr = pehe(t, e);
    MetricRow row;
    row.cell = cell;
    row.source_id = est.source_ids[s];
    row.pehe = pr.pehe;
    row.root_pehe = pr.root_pehe;
    row.ate_error = ate_error(std::accumulate(t.begin(), t.end(), 0.0) / t.size(),
                              est.local_ate[s]);
    report.rows.push_back(row);
  }
  const PeheResult pooled = pehe(all_true, all_est);
  MetricRow row;
  row.cell = cell;
  row.source_id = -1;
  row.pehe = pooled.pehe;
  row.root_pehe = pooled.root_pehe;
  row.ate_error = ate_error(true_tau_acc / static_cast<double>(true_n), est.global_ate);
  report.rows.push_back(row);
  report.posterior = est.posterior;
  return report;
}

void write_model(const TrainedModel& model, const std::string& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["estimator"] = model.estimator;
  j["stages"] = nlohmann::json::array();
  for (const auto& params : model.stage_params) j["stages"].push_back(params_to_json(params));
  std::ofstream out(dir + "/params.json");
  out << j.dump() << "\n";
  std::ofstream log(dir + "/rounds.csv");
  log << "stage,round,objective_sum\n";
  char buf[96];
  for (std::size_t stage = 0; stage < model.stage_logs.size(); ++stage)
    for (const auto& entry : model.stage_logs[stage]) {
      std::snprintf(buf, sizeof(buf), "%zu,%d,%.17g\n", stage, entry.round, entry.objective_sum);
      log << buf;
    }
}

TrainedModel read_model(const std::string& dir) {
  std::ifstream in(dir + "/params.json");
  if (!in) throw ParseError("cannot open " + dir + "/params.json");
  nlohmann::json j;
  in >> j;
  TrainedModel model;
  model.estimator = j.at("estimator").get<std::string>();
  for (const auto& stage : j.at("stages")) model.stage_params.push_back(params_from_json(stage));
  return model;
}

}  // namespace fedcausal
