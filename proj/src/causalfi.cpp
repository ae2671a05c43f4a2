#include "fedcausal/causalfi.hpp"

#include <algorithm>
#include <cmath>

#include "fedcausal/param_view.hpp"
#include "fedcausal/rng.hpp"

namespace fedcausal {

namespace {

using ad::Var;
using ad::VarVec;

constexpr std::uint64_t kThetaDrawTag = 0xcf10;
constexpr std::uint64_t kSurrogateDrawTag = 0xcf20;
constexpr std::uint64_t kPseudoTag = 0xcf30;

struct FiMeta {
  int m, d_x, d, mc_theta;
  double prior_sd;
  std::vector<int> source_ids;
  std::vector<int> hidden;
  std::vector<FamilySpec> families;
};

FiMeta read_meta(const ParameterVector& theta) {
  const auto& mv = theta.segment("meta").values;
  FiMeta meta;
  meta.m = static_cast<int>(mv[0]);
  meta.d_x = static_cast<int>(mv[1]);
  meta.d = static_cast<int>(mv[2]);
  meta.mc_theta = static_cast<int>(mv[3]);
  meta.prior_sd = mv[4];
  for (double v : theta.segment("meta/sources").values)
    meta.source_ids.push_back(static_cast<int>(v));
  for (double v : theta.segment("meta/hidden").values) meta.hidden.push_back(static_cast<int>(v));
  const auto& fam = theta.segment("meta/u_families").values;
  for (std::size_t j = 0; j + 1 < fam.size(); j += 2) {
    FamilySpec spec;
    spec.family = static_cast<UFamily>(static_cast<int>(fam[j]));
    spec.levels = static_cast<int>(fam[j + 1]);
    meta.families.push_back(spec);
  }
  return meta;
}

int lambda_width(const std::vector<FamilySpec>& families) {
  int width = 0;
  for (const auto& f : families) width += f.param_width();
  return width;
}

std::vector<int> lambda_offsets(const std::vector<FamilySpec>& families) {
  std::vector<int> offs;
  int acc = 0;
  for (const auto& f : families) {
    offs.push_back(acc);
    acc += f.param_width();
  }
  return offs;
}

// log-density of one confounder entry under its family, parameters on tape.
Var family_loglik(const FamilySpec& spec, const VarVec& lambda, int offset, double value) {
  switch (spec.family) {
    case UFamily::Gaussian: {
      const Var mean = lambda[offset];
      const Var sd = ad::softplus(lambda[offset + 1]) + 1e-3;
      const Var z = (Var(value) - mean) / sd;
      return Var(-0.5 * std::log(2.0 * M_PI)) - ad::log(sd) - 0.5 * z * z;
    }
    case UFamily::Bernoulli: {
      const Var logit = lambda[offset];
      return -(ad::log1p_exp(logit) - Var(value) * logit);
    }
    case UFamily::Poisson: {
      const Var rate = ad::softplus(lambda[offset]) + 1e-6;
      return Var(value) * ad::log(rate) - rate - std::lgamma(value + 1.0);
    }
    case UFamily::Categorical: {
      double max_logit = ad::value(lambda[offset]);
      for (int k = 1; k < spec.levels; ++k)
        max_logit = std::max(max_logit, ad::value(lambda[offset + k]));
      Var lse(0.0);
      for (int k = 0; k < spec.levels; ++k) lse += ad::exp(lambda[offset + k] - max_logit);
      const int level = static_cast<int>(value);
      if (level < 0 || level >= spec.levels)
        throw SchemaError("categorical confounder value out of range");
      return lambda[offset + level] - max_logit - ad::log(lse);
    }
  }
  throw ConfigError("unknown confounder family");
}

double family_sample(const FamilySpec& spec, const Eigen::VectorXd& lambda, int offset, Rng& rng) {
  switch (spec.family) {
    case UFamily::Gaussian: {
      const double sd = ad::softplus(lambda(offset + 1)) + 1e-3;
      return lambda(offset) + sd * rng.normal();
    }
    case UFamily::Bernoulli:
      return rng.bernoulli(ad::sigmoid(lambda(offset))) ? 1.0 : 0.0;
    case UFamily::Poisson:
      return static_cast<double>(rng.poisson(ad::softplus(lambda(offset)) + 1e-6));
    case UFamily::Categorical: {
      std::vector<double> weights(spec.levels);
      double max_logit = lambda(offset);
      for (int k = 1; k < spec.levels; ++k) max_logit = std::max(max_logit, lambda(offset + k));
      for (int k = 0; k < spec.levels; ++k) weights[k] = std::exp(lambda(offset + k) - max_logit);
      return static_cast<double>(rng.categorical(weights));
    }
  }
  throw ConfigError("unknown confounder family");
}

// KL of a diagonal-Gaussian weight posterior against N(0, prior_sd^2).
Var mean_field_kl(const VarVec& mu, const VarVec& logsd, double prior_sd) {
  Var kl(0.0);
  const double inv_p2 = 1.0 / (prior_sd * prior_sd);
  const double log_p = std::log(prior_sd);
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const Var sd = ad::exp(logsd[i]);
    kl += 0.5 * ((sd * sd + mu[i] * mu[i]) * inv_p2 - Var(1.0)) + Var(log_p) - logsd[i];
  }
  return kl;
}

// Reparameterized flat weight draw on the tape (noise shared via seed).
VarVec draw_weights(const VarVec& mu, const VarVec& logsd, Rng& rng) {
  VarVec out(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) out[i] = mu[i] + ad::exp(logsd[i]) * rng.normal();
  return out;
}

Eigen::VectorXd draw_weights_d(const std::vector<double>& mu, const std::vector<double>& logsd,
                               Rng& rng) {
  Eigen::VectorXd out(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) out(i) = mu[i] + std::exp(logsd[i]) * rng.normal();
  return out;
}

void add_fixed(ParameterVector& theta, const std::string& name, std::vector<double> vals) {
  ParamSegment seg;
  seg.name = name;
  seg.shape = {static_cast<int>(vals.size())};
  seg.values = std::move(vals);
  seg.trainable = false;
  theta.add(std::move(seg));
}

void add_train(ParameterVector& theta, const std::string& name, std::vector<double> vals) {
  ParamSegment seg;
  seg.name = name;
  seg.shape = {static_cast<int>(vals.size())};
  seg.values = std::move(vals);
  theta.add(std::move(seg));
}

std::vector<FamilySpec> effective_families(const CausalFiConfig& cfg, int d) {
  if (cfg.u_families.empty()) return std::vector<FamilySpec>(d, FamilySpec{});
  if (static_cast<int>(cfg.u_families.size()) != d)
    throw ConfigError("causalfi: u_families length does not match confounder dimension");
  return cfg.u_families;
}

std::vector<double> meta_families(const std::vector<FamilySpec>& families) {
  std::vector<double> out;
  for (const auto& f : families) {
    out.push_back(static_cast<double>(static_cast<int>(f.family)));
    out.push_back(static_cast<double>(f.levels));
  }
  return out;
}

MlpShape theta_shape(const FiMeta& meta) {
  MlpShape shape;
  shape.in = 1 + meta.d_x;
  shape.out = lambda_width(meta.families);
  shape.hidden = meta.hidden;
  return shape;
}

MlpShape completion_shape(const FiMeta& meta) {
  MlpShape shape;
  shape.in = meta.d_x + 2 * meta.d;
  shape.out = lambda_width(meta.families);
  shape.hidden = meta.hidden;
  return shape;
}

MlpShape outcome_shape(const FiMeta& meta) {
  MlpShape shape;
  shape.in = meta.d_x + meta.d;
  shape.out = 2;
  shape.hidden = meta.hidden;
  return shape;
}

std::vector<double> init_mu(int count, Rng& rng) {
  std::vector<double> out(count);
  for (auto& v : out) v = 0.05 * rng.normal();
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage 1: conditional confounder model
// ---------------------------------------------------------------------------

ParameterVector CausalFiThetaObjective::initial_params(const std::vector<SourceInfo>& sources,
                                                       std::uint64_t seed) const {
  if (sources.empty()) throw ConfigError("causalfi: no sources registered");
  const int m = static_cast<int>(sources.size());
  const int dx = sources.front().dim_x;
  const int d = sources.front().dim_u;
  if (d < 1) throw ConfigError("causalfi: dataset has no partially observed confounders");
  const auto families = effective_families(cfg_, d);

  ParameterVector theta;
  add_fixed(theta, "meta",
            {static_cast<double>(m), static_cast<double>(dx), static_cast<double>(d),
             static_cast<double>(cfg_.mc_theta), cfg_.prior_sd});
  std::vector<double> ids;
  for (const auto& s : sources) ids.push_back(s.source_id);
  add_fixed(theta, "meta/sources", ids);
  add_fixed(theta, "meta/hidden", std::vector<double>(cfg_.hidden.begin(), cfg_.hidden.end()));
  add_fixed(theta, "meta/u_families", meta_families(families));

  FiMeta meta = read_meta(theta);
  const int p = theta_shape(meta).param_count();
  Rng rng(derive_seed(seed, {0xcf1a}));
  add_train(theta, "cfi/theta0/mu", init_mu(p, rng));
  add_train(theta, "cfi/theta0/logsd", std::vector<double>(p, std::log(0.1)));
  add_train(theta, "cfi/theta1/mu", init_mu(p, rng));
  add_train(theta, "cfi/theta1/logsd", std::vector<double>(p, std::log(0.1)));
  return theta;
}

EvalResult CausalFiThetaObjective::eval(const ParameterVector& theta, const SourceDataset& shard,
                                        std::uint64_t round_seed) const {
  return eval_pooled(theta, {&shard}, round_seed);
}

EvalResult CausalFiThetaObjective::eval_pooled(const ParameterVector& theta,
                                               const std::vector<const SourceDataset*>& shards,
                                               std::uint64_t round_seed) const {
  if (shards.empty()) throw ConfigError("causalfi eval: no shards");
  ad::Tape tape;
  ad::ScopedTape guard(tape);
  VarView view(theta);
  const FiMeta meta = read_meta(theta);
  const MlpShape shape = theta_shape(meta);
  const auto offsets = lambda_offsets(meta.families);

  Var recon(0.0);
  for (int k = 0; k < meta.mc_theta; ++k) {
    Rng rng(derive_seed(round_seed, {kThetaDrawTag, static_cast<std::uint64_t>(k)}));
    const VarVec w0 = draw_weights(view["cfi/theta0/mu"], view["cfi/theta0/logsd"], rng);
    const VarVec w1 = draw_weights(view["cfi/theta1/mu"], view["cfi/theta1/logsd"], rng);
    for (const SourceDataset* shard : shards) {
      for (const Record& rec : shard->records()) {
        bool any = false;
        for (int j = 0; j < meta.d; ++j) any = any || rec.r[j] == 1;
        if (!any) continue;  // all-missing rows contribute only the KL share
        std::vector<double> input(1 + meta.d_x);
        input[0] = rec.y;
        for (int j = 0; j < meta.d_x; ++j) input[j + 1] = rec.x[j];
        const VarVec lambda = mlp_forward<Var>(shape, rec.w == 1 ? w1 : w0, input);
        for (int j = 0; j < meta.d; ++j) {
          if (rec.r[j] != 1) continue;  // likelihood over observed entries only
          recon += family_loglik(meta.families[j], lambda, offsets[j], rec.u_raw[j]);
        }
      }
    }
  }
  recon /= static_cast<double>(meta.mc_theta);

  const Var kl = mean_field_kl(view["cfi/theta0/mu"], view["cfi/theta0/logsd"], meta.prior_sd) +
                 mean_field_kl(view["cfi/theta1/mu"], view["cfi/theta1/logsd"], meta.prior_sd);
  const Var objective =
      recon - kl * (static_cast<double>(shards.size()) / static_cast<double>(meta.m));
  if (!std::isfinite(ad::value(objective)))
    throw NumericalError("causalfi: non-finite objective on source " +
                         std::to_string(shards.front()->source_id()));

  tape.backward(objective.idx);
  EvalResult out;
  out.objective = ad::value(objective);
  out.gradient = view.collect_gradient(tape);
  return out;
}

// ---------------------------------------------------------------------------
// Pseudo data
// ---------------------------------------------------------------------------

PseudoData generate_pseudo(const ParameterVector& theta_params, const Eigen::VectorXd& theta0_draw,
                           const Eigen::VectorXd& theta1_draw, const SourceDataset& source,
                           int count, std::uint64_t seed) {
  if (source.size() == 0) throw SchemaError("generate_pseudo: empty source");
  const FiMeta meta = read_meta(theta_params);
  const MlpShape shape = theta_shape(meta);
  const auto offsets = lambda_offsets(meta.families);
  Rng rng(seed);

  PseudoData out;
  out.x.resize(count, meta.d_x);
  out.y.resize(count);
  out.w.resize(count);
  out.u.resize(count, meta.d);
  out.mask = Eigen::MatrixXi::Ones(count, meta.d);
  for (int t = 0; t < count; ++t) {
    const Record& rec = source.record(static_cast<std::size_t>(rng.next_u64() % source.size()));
    out.y(t) = rec.y;
    out.w(t) = rec.w;
    for (int j = 0; j < meta.d_x; ++j) out.x(t, j) = rec.x[j];
    std::vector<double> input(1 + meta.d_x);
    input[0] = rec.y;
    for (int j = 0; j < meta.d_x; ++j) input[j + 1] = rec.x[j];
    const std::vector<double> lambda =
        mlp_forward<double>(shape, rec.w == 1 ? theta1_draw : theta0_draw, input);
    const Eigen::VectorXd lam = Eigen::Map<const Eigen::VectorXd>(lambda.data(), lambda.size());
    for (int j = 0; j < meta.d; ++j)
      out.u(t, j) = family_sample(meta.families[j], lam, offsets[j], rng);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage 3: surrogates
// ---------------------------------------------------------------------------

ParameterVector CausalFiSurrogateObjective::initial_params(const std::vector<SourceInfo>& sources,
                                                           std::uint64_t seed) const {
  if (sources.empty()) throw ConfigError("causalfi surrogate: no sources registered");
  if (theta_stage_.segments().empty())
    throw ConfigError("causalfi surrogate: stage-1 parameters are required for initialization");
  const int m = static_cast<int>(sources.size());
  const int dx = sources.front().dim_x;
  const int d = sources.front().dim_u;
  const auto families = effective_families(cfg_, d);

  ParameterVector theta;
  add_fixed(theta, "meta",
            {static_cast<double>(m), static_cast<double>(dx), static_cast<double>(d),
             static_cast<double>(cfg_.mc_theta), cfg_.prior_sd,
             static_cast<double>(cfg_.pseudo_theta_draws), cfg_.pseudo_per_n,
             static_cast<double>(cfg_.stage_seed)});
  std::vector<double> ids;
  for (const auto& s : sources) ids.push_back(s.source_id);
  add_fixed(theta, "meta/sources", ids);
  add_fixed(theta, "meta/hidden", std::vector<double>(cfg_.hidden.begin(), cfg_.hidden.end()));
  add_fixed(theta, "meta/u_families", meta_families(families));
  // Frozen stage-1 posterior, broadcast so every worker regenerates the same
  // pseudo rows from its local shard.
  for (const char* name : {"cfi/theta0/mu", "cfi/theta0/logsd", "cfi/theta1/mu",
                           "cfi/theta1/logsd"})
    add_fixed(theta, std::string("stage1/") + name, theta_stage_.segment(name).values);

  FiMeta meta = read_meta(theta);
  const int pu = completion_shape(meta).param_count();
  const int py = outcome_shape(meta).param_count();
  Rng rng(derive_seed(seed, {0xcf1b}));
  add_train(theta, "cfi/u/mu", init_mu(pu, rng));
  add_train(theta, "cfi/u/logsd", std::vector<double>(pu, std::log(0.1)));
  add_train(theta, "cfi/y0/mu", init_mu(py, rng));
  add_train(theta, "cfi/y0/logsd", std::vector<double>(py, std::log(0.1)));
  add_train(theta, "cfi/y1/mu", init_mu(py, rng));
  add_train(theta, "cfi/y1/logsd", std::vector<double>(py, std::log(0.1)));
  return theta;
}

const PseudoData& CausalFiSurrogateObjective::pseudo_for(const ParameterVector& theta,
                                                         const SourceDataset& shard) const {
  std::lock_guard<std::mutex> lock(cache_mutex_);
  auto it = pseudo_cache_.find(shard.source_id());
  if (it != pseudo_cache_.end()) return it->second;

  const FiMeta meta = read_meta(theta);
  const auto& mv = theta.segment("meta").values;
  const int g_draws = std::max(1, static_cast<int>(mv.at(5)));
  const double per_n = mv.at(6);
  const std::uint64_t stage_seed = static_cast<std::uint64_t>(mv.at(7));
  const int count = std::max(1, static_cast<int>(per_n * shard.size()));
  const int per_draw = (count + g_draws - 1) / g_draws;

  std::vector<PseudoData> parts;
  const auto& mu0 = theta.segment("stage1/cfi/theta0/mu").values;
  const auto& ls0 = theta.segment("stage1/cfi/theta0/logsd").values;
  const auto& mu1 = theta.segment("stage1/cfi/theta1/mu").values;
  const auto& ls1 = theta.segment("stage1/cfi/theta1/logsd").values;
  int total = 0;
  for (int g = 0; g < g_draws && total < count; ++g) {
    Rng rng(derive_seed(stage_seed, {kPseudoTag, static_cast<std::uint64_t>(shard.source_id()),
                                     static_cast<std::uint64_t>(g)}));
    const Eigen::VectorXd t0 = draw_weights_d(mu0, ls0, rng);
    const Eigen::VectorXd t1 = draw_weights_d(mu1, ls1, rng);
    const int take = std::min(per_draw, count - total);
    parts.push_back(generate_pseudo(theta, t0, t1, shard, take,
                                    derive_seed(stage_seed,
                                                {kPseudoTag + 1,
                                                 static_cast<std::uint64_t>(shard.source_id()),
                                                 static_cast<std::uint64_t>(g)})));
    total += take;
  }
  PseudoData merged;
  merged.x.resize(total, meta.d_x);
  merged.y.resize(total);
  merged.w.resize(total);
  merged.u.resize(total, meta.d);
  merged.mask.resize(total, meta.d);
  int at = 0;
  for (const auto& p : parts) {
    const int n = static_cast<int>(p.y.size());
    merged.x.middleRows(at, n) = p.x;
    merged.y.segment(at, n) = p.y;
    merged.w.segment(at, n) = p.w;
    merged.u.middleRows(at, n) = p.u;
    at += n;
  }

  // Surrogate-training masks mirror the source's empirical per-dimension
  // observation rates.
  Eigen::VectorXd obs_rate = Eigen::VectorXd::Zero(meta.d);
  for (const Record& rec : shard.records())
    for (int j = 0; j < meta.d; ++j) obs_rate(j) += rec.r[j];
  obs_rate /= static_cast<double>(shard.size());
  Rng mask_rng(derive_seed(stage_seed, {kPseudoTag + 2,
                                        static_cast<std::uint64_t>(shard.source_id())}));
  for (int t = 0; t < total; ++t)
    for (int j = 0; j < meta.d; ++j)
      merged.mask(t, j) = mask_rng.bernoulli(obs_rate(j)) ? 1 : 0;

  auto [pos, inserted] = pseudo_cache_.emplace(shard.source_id(), std::move(merged));
  return pos->second;
}

EvalResult CausalFiSurrogateObjective::eval(const ParameterVector& theta,
                                            const SourceDataset& shard,
                                            std::uint64_t round_seed) const {
  return eval_pooled(theta, {&shard}, round_seed);
}

EvalResult CausalFiSurrogateObjective::eval_pooled(const ParameterVector& theta,
                                                   const std::vector<const SourceDataset*>& shards,
                                                   std::uint64_t round_seed) const {
  if (shards.empty()) throw ConfigError("causalfi surrogate eval: no shards");
  std::vector<const PseudoData*> pseudo;
  for (const SourceDataset* shard : shards) pseudo.push_back(&pseudo_for(theta, *shard));

  ad::Tape tape;
  ad::ScopedTape guard(tape);
  VarView view(theta);
  const FiMeta meta = read_meta(theta);
  const MlpShape u_shape = completion_shape(meta);
  const MlpShape y_shape = outcome_shape(meta);
  const auto offsets = lambda_offsets(meta.families);

  Var recon(0.0);
  for (int k = 0; k < meta.mc_theta; ++k) {
    Rng rng(derive_seed(round_seed, {kSurrogateDrawTag, static_cast<std::uint64_t>(k)}));
    const VarVec wu = draw_weights(view["cfi/u/mu"], view["cfi/u/logsd"], rng);
    const VarVec wy0 = draw_weights(view["cfi/y0/mu"], view["cfi/y0/logsd"], rng);
    const VarVec wy1 = draw_weights(view["cfi/y1/mu"], view["cfi/y1/logsd"], rng);
    for (const PseudoData* data : pseudo) {
      const int n_p = static_cast<int>(data->y.size());
      for (int t = 0; t < n_p; ++t) {
        // Completion model: visible entries in, masked entries scored.
        bool any_masked = false;
        for (int j = 0; j < meta.d; ++j) any_masked = any_masked || data->mask(t, j) == 0;
        if (any_masked) {
          std::vector<double> uin(u_shape.in);
          for (int j = 0; j < meta.d_x; ++j) uin[j] = data->x(t, j);
          for (int j = 0; j < meta.d; ++j) {
            const bool vis = data->mask(t, j) == 1;
            uin[meta.d_x + j] = vis ? data->u(t, j) : 0.0;
            uin[meta.d_x + meta.d + j] = vis ? 1.0 : 0.0;
          }
          const VarVec lambda = mlp_forward<Var>(u_shape, wu, uin);
          for (int j = 0; j < meta.d; ++j) {
            if (data->mask(t, j) == 1) continue;
            recon += family_loglik(meta.families[j], lambda, offsets[j], data->u(t, j));
          }
        }
        // Outcome model over the complete pseudo row.
        std::vector<double> yin(y_shape.in);
        for (int j = 0; j < meta.d_x; ++j) yin[j] = data->x(t, j);
        for (int j = 0; j < meta.d; ++j) yin[meta.d_x + j] = data->u(t, j);
        const VarVec head = mlp_forward<Var>(y_shape, data->w(t) == 1 ? wy1 : wy0, yin);
        const Var sd = ad::softplus(head[1]) + 1e-3;
        const Var z = (Var(data->y(t)) - head[0]) / sd;
        recon += Var(-0.5 * std::log(2.0 * M_PI)) - ad::log(sd) - 0.5 * z * z;
      }
    }
  }
  recon /= static_cast<double>(meta.mc_theta);

  const Var kl = mean_field_kl(view["cfi/u/mu"], view["cfi/u/logsd"], meta.prior_sd) +
                 mean_field_kl(view["cfi/y0/mu"], view["cfi/y0/logsd"], meta.prior_sd) +
                 mean_field_kl(view["cfi/y1/mu"], view["cfi/y1/logsd"], meta.prior_sd);
  const Var objective =
      recon - kl * (static_cast<double>(shards.size()) / static_cast<double>(meta.m));
  if (!std::isfinite(ad::value(objective)))
    throw NumericalError("causalfi surrogate: non-finite objective on source " +
                         std::to_string(shards.front()->source_id()));

  tape.backward(objective.idx);
  EvalResult out;
  out.objective = ad::value(objective);
  out.gradient = view.collect_gradient(tape);
  return out;
}

// ---------------------------------------------------------------------------
// Algorithms: posterior effect samples
// ---------------------------------------------------------------------------

SurrogateDraws draw_surrogate_params(const ParameterVector& surrogate_params, int k_draws,
                                     std::uint64_t seed) {
  SurrogateDraws out;
  const auto& umu = surrogate_params.segment("cfi/u/mu").values;
  const auto& uls = surrogate_params.segment("cfi/u/logsd").values;
  const auto& y0mu = surrogate_params.segment("cfi/y0/mu").values;
  const auto& y0ls = surrogate_params.segment("cfi/y0/logsd").values;
  const auto& y1mu = surrogate_params.segment("cfi/y1/mu").values;
  const auto& y1ls = surrogate_params.segment("cfi/y1/logsd").values;
  for (int k = 0; k < k_draws; ++k) {
    Rng rng(derive_seed(seed, {0xd4aa, static_cast<std::uint64_t>(k)}));
    out.theta_u.push_back(draw_weights_d(umu, uls, rng));
    out.theta_y0.push_back(draw_weights_d(y0mu, y0ls, rng));
    out.theta_y1.push_back(draw_weights_d(y1mu, y1ls, rng));
  }
  return out;
}

LocalEffectSamples algorithm3_local(const ParameterVector& surrogate_params,
                                    const SurrogateDraws& draws, const SourceDataset& eval_data,
                                    int n_completions, int m_outcome, std::uint64_t seed) {
  const FiMeta meta = read_meta(surrogate_params);
  const MlpShape u_shape = completion_shape(meta);
  const MlpShape y_shape = outcome_shape(meta);
  const auto offsets = lambda_offsets(meta.families);
  const int k_draws = static_cast<int>(draws.theta_u.size());
  const int n = static_cast<int>(eval_data.size());

  LocalEffectSamples out;
  out.cate.resize(n, k_draws);
  out.ate.resize(k_draws);
  for (int k = 0; k < k_draws; ++k) {
    double ate_acc = 0.0;
    for (int i = 0; i < n; ++i) {
      const Record& rec = eval_data.record(i);
      Rng rng(derive_seed(seed, {0xa13, static_cast<std::uint64_t>(k),
                                 static_cast<std::uint64_t>(i)}));
      std::vector<double> uin(u_shape.in);
      for (int j = 0; j < meta.d_x; ++j) uin[j] = rec.x[j];
      bool any_missing = false;
      for (int j = 0; j < meta.d; ++j) {
        const bool vis = rec.r[j] == 1;
        any_missing = any_missing || !vis;
        uin[meta.d_x + j] = vis ? rec.u_raw[j] : 0.0;
        uin[meta.d_x + meta.d + j] = vis ? 1.0 : 0.0;
      }
      Eigen::VectorXd lam;
      if (any_missing) {
        const std::vector<double> l = mlp_forward<double>(u_shape, draws.theta_u[k], uin);
        lam = Eigen::Map<const Eigen::VectorXd>(l.data(), l.size());
      }

      double cate_acc = 0.0;
      const int n_inner = any_missing ? n_completions : 1;  // nothing to complete otherwise
      for (int jdraw = 0; jdraw < n_inner; ++jdraw) {
        std::vector<double> yin(y_shape.in);
        for (int j = 0; j < meta.d_x; ++j) yin[j] = rec.x[j];
        for (int j = 0; j < meta.d; ++j) {
          double uj = rec.r[j] == 1 ? rec.u_raw[j] : family_sample(meta.families[j], lam,
                                                                  offsets[j], rng);
          yin[meta.d_x + j] = uj;
        }
        const std::vector<double> h0 = mlp_forward<double>(y_shape, draws.theta_y0[k], yin);
        const std::vector<double> h1 = mlp_forward<double>(y_shape, draws.theta_y1[k], yin);
        const double sd0 = ad::softplus(h0[1]) + 1e-3;
        const double sd1 = ad::softplus(h1[1]) + 1e-3;
        for (int l = 0; l < m_outcome; ++l) {
          const double eps = rng.normal();  // common random numbers across arms
          const double y1 = h1[0] + sd1 * eps;
          const double y0 = h0[0] + sd0 * eps;
          cate_acc += y1 - y0;
        }
      }
      const double cate = cate_acc / static_cast<double>(n_inner * m_outcome);
      out.cate(i, k) = cate;
      ate_acc += cate;
    }
    out.ate(k) = ate_acc / static_cast<double>(n);
  }
  return out;
}

EffectSummary summarize_samples(const Eigen::VectorXd& samples) {
  if (samples.size() < 1) throw SchemaError("summarize_samples: empty sample set");
  std::vector<double> vals(samples.data(), samples.data() + samples.size());
  const auto moments = four_moments(vals);
  EffectSummary out;
  out.mean = moments[0];
  out.sd = std::sqrt(moments[1]);
  out.skewness = moments[2];
  out.kurtosis = moments[3];
  std::sort(vals.begin(), vals.end());
  auto quantile = [&](double q) {
    const double pos = q * (vals.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, vals.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return vals[lo] * (1.0 - frac) + vals[hi] * frac;
  };
  out.q025 = quantile(0.025);
  out.q975 = quantile(0.975);
  return out;
}

EffectSamples algorithm2_global(const std::vector<std::pair<Eigen::VectorXd, int>>& local_ates) {
  if (local_ates.empty()) throw ConfigError("algorithm2_global: no sources");
  const Eigen::Index k = local_ates.front().first.size();
  for (const auto& [ate, n] : local_ates) {
    if (ate.size() != k) throw ProtocolError("algorithm2_global: mismatched sample counts K");
    if (n < 1) throw ConfigError("algorithm2_global: source size must be >= 1");
  }
  EffectSamples out;
  out.ate_samples = Eigen::VectorXd::Zero(k);
  double total = 0.0;
  for (const auto& [ate, n] : local_ates) {
    out.ate_samples += static_cast<double>(n) * ate;
    total += static_cast<double>(n);
  }
  out.ate_samples /= total;
  out.summary = summarize_samples(out.ate_samples);
  return out;
}

// ---------------------------------------------------------------------------
// Bias demonstration
// ---------------------------------------------------------------------------

namespace {

double apply_link(OutcomeLink link, double t) {
  switch (link) {
    case OutcomeLink::Linear: return t;
    case OutcomeLink::Softplus: return ad::softplus(t);
    case OutcomeLink::Exp: return std::exp(t);
  }
  return t;
}

}  // namespace

BiasDemoResult imputation_bias_demo(const BiasDemoConfig& cfg) {
  auto g = [&](double u) { return apply_link(cfg.link, cfg.intercept + cfg.slope * u); };

  // E[g(U)] with U ~ N(cond_mean, cond_sd^2) by composite Simpson over +-10
  // standard deviations; a second grid bounds the integration error.
  auto quadrature = [&](int n_grid) {
    const double lo = cfg.cond_mean - 10.0 * cfg.cond_sd;
    const double hi = cfg.cond_mean + 10.0 * cfg.cond_sd;
    const double h = (hi - lo) / (n_grid - 1);
    auto integrand = [&](double u) {
      const double z = (u - cfg.cond_mean) / cfg.cond_sd;
      return g(u) * std::exp(-0.5 * z * z) / (cfg.cond_sd * std::sqrt(2.0 * M_PI));
    };
    double total = integrand(lo) + integrand(hi);
    for (int i = 1; i < n_grid - 1; ++i)
      total += integrand(lo + i * h) * (i % 2 == 1 ? 4.0 : 2.0);
    return total * h / 3.0;
  };
  const double truth = quadrature(20001);

  // The distributional estimator IS the expectation over the conditional law,
  // so with the oracle distribution its bias reduces to integration error.
  // The Monte-Carlo oracle independently confirms the expectation and sets
  // the comparison scale for the bias gap.
  const double imputed = g(cfg.cond_mean);
  const double distributional = quadrature(40001);
  Rng rng(cfg.seed);
  double acc = 0.0, acc2 = 0.0;
  for (int i = 0; i < cfg.mc_draws; ++i) {
    const double v = g(cfg.cond_mean + cfg.cond_sd * rng.normal());
    acc += v;
    acc2 += v * v;
  }
  const double mc_mean = acc / cfg.mc_draws;
  const double mc_var = std::max(acc2 / cfg.mc_draws - mc_mean * mc_mean, 0.0);
  const double mc_stderr = std::sqrt(mc_var / cfg.mc_draws);
  if (std::abs(mc_mean - truth) > 6.0 * mc_stderr + 1e-9)
    throw NumericalError("imputation_bias_demo: quadrature and MC oracle disagree");

  BiasDemoResult out;
  out.bias_imputation = std::abs(truth - imputed);
  out.bias_distributional = std::abs(truth - distributional);
  out.mc_stderr = mc_stderr;
  return out;
}

// ---------------------------------------------------------------------------
// Missing-mechanism voting
// ---------------------------------------------------------------------------

namespace {

double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

struct GroupStats {
  double mean = 0.0, var = 0.0;
  int n = 0;
};

GroupStats stats_of(const std::vector<double>& v) {
  GroupStats g;
  g.n = static_cast<int>(v.size());
  if (g.n == 0) return g;
  for (double x : v) g.mean += x;
  g.mean /= g.n;
  for (double x : v) g.var += (x - g.mean) * (x - g.mean);
  g.var = g.n > 1 ? g.var / (g.n - 1) : 0.0;
  return g;
}

}  // namespace

std::optional<std::pair<MissingMechanism, double>> default_local_missing_test(
    const SourceDataset& source, double alpha) {
  const int d = static_cast<int>(source.dim_u());
  const int dx = static_cast<int>(source.dim_x());
  if (d == 0 || !source.has_missing()) return std::nullopt;

  std::vector<double> p_values;
  for (int j = 0; j < d; ++j) {
    std::vector<std::vector<double>> grp_obs(dx + 2), grp_mis(dx + 2);  // y, w, x...
    for (const Record& rec : source.records()) {
      auto& grp = rec.r[j] == 1 ? grp_obs : grp_mis;
      grp[0].push_back(rec.y);
      grp[1].push_back(rec.w);
      for (int c = 0; c < dx; ++c) grp[2 + c].push_back(rec.x[c]);
    }
    if (grp_obs[0].size() < 5 || grp_mis[0].size() < 5) continue;
    for (int c = 0; c < dx + 2; ++c) {
      const GroupStats a = stats_of(grp_obs[c]);
      const GroupStats b = stats_of(grp_mis[c]);
      const double se = std::sqrt(a.var / a.n + b.var / b.n);
      if (se > 0.0) p_values.push_back(normal_two_sided_p((a.mean - b.mean) / se));
      if (c != 1 && a.var > 0.0 && b.var > 0.0) {
        // Variance comparison via the asymptotic normality of log s^2.
        const double se_lv = std::sqrt(2.0 / (a.n - 1) + 2.0 / (b.n - 1));
        p_values.push_back(normal_two_sided_p((std::log(a.var) - std::log(b.var)) / se_lv));
      }
    }
  }
  if (p_values.empty()) return std::nullopt;
  double min_p = 1.0;
  for (double p : p_values) min_p = std::min(min_p, p);
  const double adjusted = std::min(1.0, min_p * static_cast<double>(p_values.size()));
  return std::make_pair(adjusted < alpha ? MissingMechanism::MAR : MissingMechanism::MCAR,
                        adjusted);
}

VoteResult missing_mechanism_vote(const FederatedDataset& sources,
                                  const LocalMissingTest& local_test, double alpha) {
  VoteResult out;
  int mar = 0, mcar = 0;
  for (const SourceDataset& src : sources) {
    SourceVote vote;
    vote.source_id = src.source_id();
    const auto result =
        local_test ? local_test(src) : default_local_missing_test(src, alpha);
    if (!result.has_value()) {
      vote.abstained = true;
    } else {
      vote.verdict = result->first;
      vote.min_adjusted_p = result->second;
      (vote.verdict == MissingMechanism::MAR ? mar : mcar) += 1;
    }
    out.locals.push_back(vote);
  }
  if (mar + mcar == 0) throw SchemaError("missing_mechanism_vote: no testable source");
  out.verdict = mcar > mar ? MissingMechanism::MCAR : MissingMechanism::MAR;  // ties -> MAR
  return out;
}

}  // namespace fedcausal
