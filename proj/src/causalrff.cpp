#include "fedcausal/causalrff.hpp"

#include <cmath>

#include "fedcausal/param_view.hpp"

namespace fedcausal {

namespace {

using ad::Var;
using ad::VarVec;

constexpr std::uint64_t kNoiseTag = 0xcaff;
constexpr std::uint64_t kCateTag = 0xca7e;

const char* family_segment(RffFamily f) {
  switch (f) {
    case RffFamily::Y0: return "crff/theta_y0/";
    case RffFamily::Y1: return "crff/theta_y1/";
    case RffFamily::W: return "crff/theta_w/";
    case RffFamily::X: return "crff/theta_x/";
    case RffFamily::Q0: return "crff/theta_q0/";
    case RffFamily::Q1: return "crff/theta_q1/";
  }
  return "";
}

struct RffMeta {
  int m, b, d_z, d_x, mc_samples;
  double ridge, sigma_z;
  bool adaptive;
  double y_center = 0.0, y_scale = 1.0;  // shared outcome standardization
  std::vector<int> source_ids;
  std::vector<int> x_binary;
};

RffMeta read_meta(const ParameterVector& theta) {
  const auto& mv = theta.segment("meta").values;
  RffMeta meta;
  meta.m = static_cast<int>(mv[0]);
  meta.b = static_cast<int>(mv[1]);
  meta.d_z = static_cast<int>(mv[2]);
  meta.d_x = static_cast<int>(mv[3]);
  meta.mc_samples = static_cast<int>(mv[4]);
  meta.ridge = mv[5];
  meta.sigma_z = mv[6];
  meta.adaptive = mv[7] != 0.0;
  if (theta.has("meta/y_scale")) {
    meta.y_center = theta.segment("meta/y_scale").values[0];
    meta.y_scale = theta.segment("meta/y_scale").values[1];
  }
  for (double v : theta.segment("meta/sources").values)
    meta.source_ids.push_back(static_cast<int>(v));
  if (theta.has("meta/x_binary"))
    for (double v : theta.segment("meta/x_binary").values)
      meta.x_binary.push_back(static_cast<int>(v));
  return meta;
}

int source_index(const RffMeta& meta, int source_id) {
  for (std::size_t i = 0; i < meta.source_ids.size(); ++i)
    if (meta.source_ids[i] == source_id) return static_cast<int>(i);
  throw ProtocolError("source id " + std::to_string(source_id) + " not registered in parameters");
}

RffMap read_map(const ParameterVector& theta, const std::string& name, int b, int dim) {
  const auto& vals = theta.segment(name).values;
  Eigen::MatrixXd freqs(b, dim);
  for (int r = 0; r < b; ++r)
    for (int c = 0; c < dim; ++c) freqs(r, c) = vals[r * dim + c];
  return RffMap(freqs);
}

// theta_c^s + sum_{v != s} lambda^{s,v} theta_c^v on the tape.
VarVec combine_weights(const VarView& view, const std::string& prefix, const RffMeta& meta,
                       int s_idx, const VarVec& lambda_raw) {
  const auto& own = view[prefix + std::to_string(meta.source_ids[s_idx])];
  VarVec comb(own.begin(), own.end());
  if (!meta.adaptive) return comb;
  for (int v = 0; v < meta.m; ++v) {
    if (v == s_idx) continue;
    const Var lam = ad::sigmoid(lambda_raw[s_idx * meta.m + v]);
    const auto& other = view[prefix + std::to_string(meta.source_ids[v])];
    for (std::size_t i = 0; i < comb.size(); ++i) comb[i] += lam * other[i];
  }
  return comb;
}

Eigen::VectorXd combine_weights_d(const ParameterVector& theta, const std::string& prefix,
                                  const RffMeta& meta, int s_idx, const TransferMatrix& lambda) {
  const auto& own = theta.segment(prefix + std::to_string(meta.source_ids[s_idx])).values;
  Eigen::VectorXd comb = Eigen::Map<const Eigen::VectorXd>(own.data(), own.size());
  for (int v = 0; v < meta.m; ++v) {
    if (v == s_idx) continue;
    const double lam = lambda(s_idx, v);
    if (lam == 0.0) continue;
    const auto& other = theta.segment(prefix + std::to_string(meta.source_ids[v])).values;
    comb += lam * Eigen::Map<const Eigen::VectorXd>(other.data(), other.size());
  }
  return comb;
}

Var dot_block(const VarVec& weights, int row, int cols, const VarVec& phi) {
  Var out(0.0);
  for (int j = 0; j < cols; ++j) out += weights[row * cols + j] * phi[j];
  return out;
}

Var dot_const(const VarVec& weights, int row, int cols, const Eigen::VectorXd& phi) {
  Var out(0.0);
  for (int j = 0; j < cols; ++j) out += weights[row * cols + j] * phi(j);
  return out;
}

double gauss_logpdf_1d(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - 0.5 * std::log(2.0 * M_PI);
}

std::vector<double> small_random(std::size_t n, Rng& rng, double scale = 0.01) {
  std::vector<double> out(n);
  for (auto& v : out) v = scale * rng.normal();
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

// Pooled outcome center/scale from the announced moment summaries (means at
// offsets 0 and 4, variances at 1 and 5 of the concatenated blocks).
std::pair<double, double> pooled_y_scale(const std::vector<SourceInfo>& sources) {
  double mean = 0.0, var = 0.0;
  for (const auto& s : sources) {
    mean += 0.5 * (s.moments.at(0) + s.moments.at(4));
    var += 0.5 * (s.moments.at(1) + s.moments.at(5));
  }
  mean /= static_cast<double>(sources.size());
  var /= static_cast<double>(sources.size());
  return {mean, std::sqrt(std::max(var, 1e-12))};
}

void add_train(ParameterVector& theta, const std::string& name, std::vector<double> vals,
               const std::string& partition = "global") {
  ParamSegment seg;
  seg.name = name;
  seg.shape = {static_cast<int>(vals.size())};
  seg.values = std::move(vals);
  seg.partition = partition;
  theta.add(std::move(seg));
}

}  // namespace

TransferMatrix read_transfer(const ParameterVector& theta, const std::string& segment,
                             bool adaptive) {
  const auto& vals = theta.segment(segment).values;
  const int m = static_cast<int>(std::lround(std::sqrt(static_cast<double>(vals.size()))));
  TransferMatrix out(m);
  if (!adaptive) return out;
  for (int s = 0; s < m; ++s)
    for (int v = 0; v < m; ++v)
      if (s != v) out.set(s, v, ad::sigmoid(vals[s * m + v]));
  return out;
}

ParameterVector CausalRffObjective::initial_params(const std::vector<SourceInfo>& sources,
                                                   std::uint64_t seed) const {
  if (sources.empty()) throw ConfigError("causalrff: no sources registered");
  const int m = static_cast<int>(sources.size());
  const int dx = sources.front().dim_x;
  const int b = cfg_.feature_count;
  const int dz = cfg_.d_z;
  if (!cfg_.x_binary.empty() && static_cast<int>(cfg_.x_binary.size()) != dx)
    throw ConfigError("causalrff: x_binary flags do not match covariate dimension");

  ParameterVector theta;
  add_fixed(theta, "meta",
            {static_cast<double>(m), static_cast<double>(b), static_cast<double>(dz),
             static_cast<double>(dx), static_cast<double>(cfg_.mc_samples), cfg_.ridge,
             cfg_.sigma_z, cfg_.adaptive ? 1.0 : 0.0});
  std::vector<double> ids;
  for (const auto& s : sources) ids.push_back(s.source_id);
  add_fixed(theta, "meta/sources", ids);
  std::vector<double> xb(dx, 0.0);
  for (int j = 0; j < dx && j < static_cast<int>(cfg_.x_binary.size()); ++j)
    xb[j] = cfg_.x_binary[j];
  add_fixed(theta, "meta/x_binary", xb);
  const auto [y_center, y_scale] = pooled_y_scale(sources);
  add_fixed(theta, "meta/y_scale", {y_center, y_scale});

  // One frequency table per input space, sampled once and broadcast: the
  // structural heads share phi_z over the latent, the encoders share phi_q
  // over (y, x).
  const RffMap phi_z = spectral_sample(cfg_.kernel, dz, b, derive_seed(seed, {0x2ff, 1}));
  const RffMap phi_q = spectral_sample(cfg_.kernel, 1 + dx, b, derive_seed(seed, {0x2ff, 2}));
  auto flat = [](const RffMap& map) {
    std::vector<double> out;
    out.reserve(map.feature_count() * map.input_dim());
    for (int r = 0; r < map.feature_count(); ++r)
      for (int c = 0; c < map.input_dim(); ++c) out.push_back(map.frequencies()(r, c));
    return out;
  };
  add_fixed(theta, "rff/z", flat(phi_z));
  add_fixed(theta, "rff/q", flat(phi_q));

  Rng rng(derive_seed(seed, {0x1417}));
  for (const auto& s : sources) {
    const std::string sid = std::to_string(s.source_id);
    const std::string part = "per-source:" + sid;
    add_train(theta, std::string("crff/theta_y0/") + sid, small_random(2 * b, rng), part);
    add_train(theta, std::string("crff/theta_y1/") + sid, small_random(2 * b, rng), part);
    add_train(theta, std::string("crff/theta_w/") + sid, small_random(2 * b, rng), part);
    add_train(theta, std::string("crff/theta_x/") + sid, small_random(dx * 2 * b, rng), part);
    add_train(theta, std::string("crff/theta_q0/") + sid, small_random(dz * 2 * b, rng), part);
    add_train(theta, std::string("crff/theta_q1/") + sid, small_random(dz * 2 * b, rng), part);
  }
  add_train(theta, "crff/lambda", std::vector<double>(static_cast<std::size_t>(m) * m, 0.0));
  add_train(theta, "crff/log_sigma",
            {std::log(cfg_.sigma_y_init), std::log(cfg_.sigma_x_init), std::log(cfg_.sigma_q_init)});
  add_train(theta, "crff/prior_mu", std::vector<double>(dz, 0.0));
  return theta;
}

EvalResult CausalRffObjective::eval(const ParameterVector& theta, const SourceDataset& shard,
                                    std::uint64_t round_seed) const {
  return eval_impl(theta, {&shard}, round_seed, true);
}

EvalResult CausalRffObjective::eval_pooled(const ParameterVector& theta,
                                           const std::vector<const SourceDataset*>& shards,
                                           std::uint64_t round_seed) const {
  return eval_impl(theta, shards, round_seed, true);
}

EvalResult CausalRffObjective::elbo_hat_source(const ParameterVector& theta,
                                               const SourceDataset& shard,
                                               std::uint64_t round_seed) const {
  EvalResult r = eval_impl(theta, {&shard}, round_seed, false);
  // eval_impl returns the loss (negative ELBO) orientation; flip.
  r.objective = -r.objective;
  for (auto& seg : r.gradient.segments())
    for (auto& v : seg.values) v = -v;
  return r;
}

EvalResult CausalRffObjective::eval_impl(const ParameterVector& theta,
                                         const std::vector<const SourceDataset*>& shards,
                                         std::uint64_t round_seed, bool with_ridge) const {
  if (shards.empty()) throw ConfigError("causalrff eval: no shards");
  ad::Tape tape;
  ad::ScopedTape guard(tape);
  VarView view(theta);

  const RffMeta meta = read_meta(theta);
  const int b2 = 2 * meta.b;
  const RffMap phi_z = read_map(theta, "rff/z", meta.b, meta.d_z);
  const RffMap phi_q = read_map(theta, "rff/q", meta.b, 1 + meta.d_x);

  const VarVec& lambda_raw = view["crff/lambda"];
  const Var sigma_y = ad::exp(view.scalar("crff/log_sigma", 0));
  const Var sigma_x = ad::exp(view.scalar("crff/log_sigma", 1));
  const Var sigma_q = ad::exp(view.scalar("crff/log_sigma", 2));
  const VarVec& prior_mu = view["crff/prior_mu"];
  const double sigma_z = meta.sigma_z;
  const double log_2pi = std::log(2.0 * M_PI);

  Var elbo(0.0);
  for (const SourceDataset* shard_ptr : shards) {
    const SourceDataset& shard = *shard_ptr;
    const int s_idx = source_index(meta, shard.source_id());
    const VarVec comb_y0 =
        combine_weights(view, family_segment(RffFamily::Y0), meta, s_idx, lambda_raw);
    const VarVec comb_y1 =
        combine_weights(view, family_segment(RffFamily::Y1), meta, s_idx, lambda_raw);
    const VarVec comb_w =
        combine_weights(view, family_segment(RffFamily::W), meta, s_idx, lambda_raw);
    const VarVec comb_x =
        combine_weights(view, family_segment(RffFamily::X), meta, s_idx, lambda_raw);
    const VarVec comb_q0 =
        combine_weights(view, family_segment(RffFamily::Q0), meta, s_idx, lambda_raw);
    const VarVec comb_q1 =
        combine_weights(view, family_segment(RffFamily::Q1), meta, s_idx, lambda_raw);

    const int n = static_cast<int>(shard.size());
    for (int i = 0; i < n; ++i) {
      const Record& rec = shard.record(i);
      const double y_std = (rec.y - meta.y_center) / meta.y_scale;
      Eigen::VectorXd qin(1 + meta.d_x);
      qin(0) = y_std;
      for (int j = 0; j < meta.d_x; ++j) qin(j + 1) = rec.x[j];
      const Eigen::VectorXd phi_enc = phi_q.features(qin);

      // Variational mean f_q = (1-w) f_q0 + w f_q1 over the (y, x) features.
      const VarVec& comb_q = rec.w == 0 ? comb_q0 : comb_q1;
      VarVec fq(meta.d_z);
      for (int d = 0; d < meta.d_z; ++d) fq[d] = dot_const(comb_q, d, b2, phi_enc);

      // Closed-form KL[q(z_i) || N(mu, sigma_z^2 I)].
      Var kl(0.0);
      const Var var_ratio = (sigma_q * sigma_q) / (sigma_z * sigma_z);
      const Var log_ratio = ad::log(sigma_q / sigma_z);
      for (int d = 0; d < meta.d_z; ++d) {
        const Var diff = fq[d] - prior_mu[d];
        kl += 0.5 * (var_ratio + (diff * diff) / (sigma_z * sigma_z) - Var(1.0)) - log_ratio;
      }

      Var recon(0.0);
      for (int l = 0; l < meta.mc_samples; ++l) {
        Rng rng(derive_seed(round_seed, {kNoiseTag, static_cast<std::uint64_t>(shard.source_id()),
                                         static_cast<std::uint64_t>(i),
                                         static_cast<std::uint64_t>(l)}));
        VarVec z(meta.d_z);
        for (int d = 0; d < meta.d_z; ++d) z[d] = fq[d] + sigma_q * rng.normal();
        const VarVec phi = rff_features_generic<Var>(phi_z, z);

        // y | z, w (standardized scale)
        const VarVec& comb_y = rec.w == 0 ? comb_y0 : comb_y1;
        Var fy(0.0);
        for (int j = 0; j < b2; ++j) fy += comb_y[j] * phi[j];
        const Var zy = (Var(y_std) - fy) / sigma_y;
        recon += Var(-0.5 * log_2pi) - ad::log(sigma_y) - 0.5 * zy * zy;

        // w | z
        Var fw(0.0);
        for (int j = 0; j < b2; ++j) fw += comb_w[j] * phi[j];
        recon -= ad::log1p_exp(fw) - Var(static_cast<double>(rec.w)) * fw;

        // x | z, per dimension
        for (int d = 0; d < meta.d_x; ++d) {
          const Var fx = dot_block(comb_x, d, b2, phi);
          if (!meta.x_binary.empty() && meta.x_binary[d]) {
            recon -= ad::log1p_exp(fx) - Var(rec.x[d]) * fx;
          } else {
            const Var zx = (Var(rec.x[d]) - fx) / sigma_x;
            recon += Var(-0.5 * log_2pi) - ad::log(sigma_x) - 0.5 * zx * zx;
          }
        }
      }
      elbo += recon / static_cast<double>(meta.mc_samples) - kl;
    }
  }

  Var loss = -elbo;
  if (with_ridge) {
    Var ridge(0.0);
    for (int v = 0; v < meta.m; ++v) {
      const std::string sid = std::to_string(meta.source_ids[v]);
      for (RffFamily f : {RffFamily::Y0, RffFamily::Y1, RffFamily::W, RffFamily::X, RffFamily::Q0,
                          RffFamily::Q1}) {
        const VarVec& seg = view[family_segment(f) + sid];
        for (const Var& t : seg) ridge += t * t;
      }
    }
    loss += ridge * (meta.ridge * static_cast<double>(shards.size()) /
                     static_cast<double>(meta.m));
  }

  tape.backward(loss.idx);
  EvalResult out;
  out.objective = ad::value(loss);
  out.gradient = view.collect_gradient(tape);
  return out;
}

ParameterVector CausalRffAuxObjective::initial_params(const std::vector<SourceInfo>& sources,
                                                      std::uint64_t seed) const {
  if (sources.empty()) throw ConfigError("causalrff_aux: no sources registered");
  const int m = static_cast<int>(sources.size());
  const int dx = sources.front().dim_x;
  const int b = cfg_.feature_count;

  ParameterVector theta;
  add_fixed(theta, "meta",
            {static_cast<double>(m), static_cast<double>(b), static_cast<double>(dx),
             cfg_.ridge_w, cfg_.ridge_y, cfg_.adaptive ? 1.0 : 0.0});
  std::vector<double> ids;
  for (const auto& s : sources) ids.push_back(s.source_id);
  add_fixed(theta, "meta/sources", ids);

  const RffMap phi_aux = spectral_sample(cfg_.kernel, dx, b, derive_seed(seed, {0x2ff, 3}));
  std::vector<double> flat;
  for (int r = 0; r < b; ++r)
    for (int c = 0; c < dx; ++c) flat.push_back(phi_aux.frequencies()(r, c));
  add_fixed(theta, "rff/aux", flat);
  const auto [y_center, y_scale] = pooled_y_scale(sources);
  add_fixed(theta, "meta/y_scale", {y_center, y_scale});

  Rng rng(derive_seed(seed, {0x1418}));
  for (const auto& s : sources) {
    const std::string sid = std::to_string(s.source_id);
    const std::string part = "per-source:" + sid;
    add_train(theta, std::string("aux/psi/") + sid, small_random(2 * b, rng), part);
    add_train(theta, std::string("aux/beta0/") + sid, small_random(2 * b, rng), part);
    add_train(theta, std::string("aux/beta1/") + sid, small_random(2 * b, rng), part);
  }
  add_train(theta, "aux/gamma", std::vector<double>(static_cast<std::size_t>(m) * m, 0.0));
  add_train(theta, "aux/eta", std::vector<double>(static_cast<std::size_t>(m) * m, 0.0));
  return theta;
}

EvalResult CausalRffAuxObjective::eval(const ParameterVector& theta, const SourceDataset& shard,
                                       std::uint64_t /*round_seed*/) const {
  return eval_impl(theta, {&shard}, true, true);
}

EvalResult CausalRffAuxObjective::eval_treatment(const ParameterVector& theta,
                                                 const SourceDataset& shard) const {
  return eval_impl(theta, {&shard}, true, false);
}

EvalResult CausalRffAuxObjective::eval_outcome(const ParameterVector& theta,
                                               const SourceDataset& shard) const {
  return eval_impl(theta, {&shard}, false, true);
}

EvalResult CausalRffAuxObjective::eval_pooled(const ParameterVector& theta,
                                              const std::vector<const SourceDataset*>& shards)
    const {
  return eval_impl(theta, shards, true, true);
}

EvalResult CausalRffAuxObjective::eval_impl(const ParameterVector& theta,
                                            const std::vector<const SourceDataset*>& shards,
                                            bool with_w, bool with_y) const {
  if (shards.empty()) throw ConfigError("causalrff aux eval: no shards");
  ad::Tape tape;
  ad::ScopedTape guard(tape);
  VarView view(theta);

  const auto& mv = theta.segment("meta").values;
  const int m = static_cast<int>(mv[0]);
  const int b = static_cast<int>(mv[1]);
  const int dx = static_cast<int>(mv[2]);
  const double ridge_w = mv[3], ridge_y = mv[4];
  const bool adaptive = mv[5] != 0.0;
  double y_center = 0.0, y_scale = 1.0;
  if (theta.has("meta/y_scale")) {
    y_center = theta.segment("meta/y_scale").values[0];
    y_scale = theta.segment("meta/y_scale").values[1];
  }
  std::vector<int> ids;
  for (double v : theta.segment("meta/sources").values) ids.push_back(static_cast<int>(v));

  const RffMap phi_aux = read_map(theta, "rff/aux", b, dx);
  const int b2 = 2 * b;

  Var loss(0.0);
  for (const SourceDataset* shard_ptr : shards) {
    const SourceDataset& shard = *shard_ptr;
    int s_idx = -1;
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] == shard.source_id()) s_idx = static_cast<int>(i);
    if (s_idx < 0) throw ProtocolError("aux: unregistered source id");

    auto combine = [&](const std::string& prefix, const std::string& transfer_seg) {
      const auto& own = view[prefix + std::to_string(ids[s_idx])];
      VarVec comb(own.begin(), own.end());
      if (!adaptive) return comb;
      const VarVec& raw = view[transfer_seg];
      for (int v = 0; v < m; ++v) {
        if (v == s_idx) continue;
        const Var t = ad::sigmoid(raw[s_idx * m + v]);
        const auto& other = view[prefix + std::to_string(ids[v])];
        for (std::size_t i = 0; i < comb.size(); ++i) comb[i] += t * other[i];
      }
      return comb;
    };

    const VarVec comb_psi = combine("aux/psi/", "aux/gamma");
    const VarVec comb_b0 = combine("aux/beta0/", "aux/eta");
    const VarVec comb_b1 = combine("aux/beta1/", "aux/eta");

    const int n = static_cast<int>(shard.size());
    for (int i = 0; i < n; ++i) {
      const Record& rec = shard.record(i);
      Eigen::VectorXd x(dx);
      for (int j = 0; j < dx; ++j) x(j) = rec.x[j];
      const Eigen::VectorXd phi = phi_aux.features(x);
      if (with_w) {
        Var logit(0.0);
        for (int j = 0; j < b2; ++j) logit += comb_psi[j] * phi(j);
        loss += ad::log1p_exp(logit) - Var(static_cast<double>(rec.w)) * logit;
      }
      if (with_y) {
        const VarVec& comb = rec.w == 0 ? comb_b0 : comb_b1;
        Var g(0.0);
        for (int j = 0; j < b2; ++j) g += comb[j] * phi(j);
        const Var r = Var((rec.y - y_center) / y_scale) - g;
        loss += 0.5 * r * r;
      }
    }
  }

  auto ridge_over = [&](const std::string& prefix) {
    Var acc(0.0);
    for (int v = 0; v < m; ++v) {
      const VarVec& seg = view[prefix + std::to_string(ids[v])];
      for (const Var& t : seg) acc += t * t;
    }
    return acc;
  };
  const double share = static_cast<double>(shards.size()) / static_cast<double>(m);
  if (with_w) loss += ridge_over("aux/psi/") * (ridge_w * share);
  if (with_y) loss += (ridge_over("aux/beta0/") + ridge_over("aux/beta1/")) * (ridge_y * share);

  tape.backward(loss.idx);
  EvalResult out;
  out.objective = ad::value(loss);
  out.gradient = view.collect_gradient(tape);
  return out;
}

// ---------------------------------------------------------------------------
// Trained-model sampling pipeline
// ---------------------------------------------------------------------------

RffCausalModel::RffCausalModel(const ParameterVector& theta, const ParameterVector& aux_theta,
                               int source_id, double aux_sd)
    : aux_sd_(aux_sd) {
  const RffMeta meta = read_meta(theta);
  const int s_idx = source_index(meta, source_id);
  d_z_ = meta.d_z;
  d_x_ = meta.d_x;
  b_ = meta.b;
  y_center_ = meta.y_center;
  y_scale_ = meta.y_scale;
  x_binary_ = meta.x_binary;
  sigma_z_ = meta.sigma_z;
  const auto& ls = theta.segment("crff/log_sigma").values;
  sigma_y_ = std::exp(ls[0]);
  sigma_x_ = std::exp(ls[1]);
  sigma_q_ = std::exp(ls[2]);
  phi_z_ = read_map(theta, "rff/z", meta.b, meta.d_z);
  phi_q_ = read_map(theta, "rff/q", meta.b, 1 + meta.d_x);

  lambda_ = read_transfer(theta, "crff/lambda", meta.adaptive);
  comb_y0_ = combine_weights_d(theta, family_segment(RffFamily::Y0), meta, s_idx, lambda_);
  comb_y1_ = combine_weights_d(theta, family_segment(RffFamily::Y1), meta, s_idx, lambda_);
  comb_w_ = combine_weights_d(theta, family_segment(RffFamily::W), meta, s_idx, lambda_);
  const int b2 = 2 * meta.b;
  auto reshape = [b2](const Eigen::VectorXd& flat, int rows) {
    Eigen::MatrixXd out(rows, b2);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < b2; ++c) out(r, c) = flat(r * b2 + c);
    return out;
  };
  comb_x_ = reshape(combine_weights_d(theta, family_segment(RffFamily::X), meta, s_idx, lambda_),
                    meta.d_x);
  comb_q0_ = reshape(combine_weights_d(theta, family_segment(RffFamily::Q0), meta, s_idx, lambda_),
                     meta.d_z);
  comb_q1_ = reshape(combine_weights_d(theta, family_segment(RffFamily::Q1), meta, s_idx, lambda_),
                     meta.d_z);

  // Auxiliary heads.
  const auto& amv = aux_theta.segment("meta").values;
  const int am = static_cast<int>(amv[0]);
  const int ab = static_cast<int>(amv[1]);
  const int adx = static_cast<int>(amv[2]);
  const bool a_adaptive = amv[5] != 0.0;
  if (adx != d_x_) throw SchemaError("aux parameters disagree on covariate dimension");
  phi_aux_ = read_map(aux_theta, "rff/aux", ab, adx);
  RffMeta ameta;
  ameta.m = am;
  ameta.adaptive = a_adaptive;
  for (double v : aux_theta.segment("meta/sources").values)
    ameta.source_ids.push_back(static_cast<int>(v));
  const int as_idx = source_index(ameta, source_id);
  const TransferMatrix gamma = read_transfer(aux_theta, "aux/gamma", a_adaptive);
  const TransferMatrix eta = read_transfer(aux_theta, "aux/eta", a_adaptive);
  comb_psi_ = combine_weights_d(aux_theta, "aux/psi/", ameta, as_idx, gamma);
  comb_beta0_ = combine_weights_d(aux_theta, "aux/beta0/", ameta, as_idx, eta);
  comb_beta1_ = combine_weights_d(aux_theta, "aux/beta1/", ameta, as_idx, eta);
}

double RffCausalModel::log_joint(const Eigen::VectorXd& z, double y, int w,
                                 const Eigen::VectorXd& x) const {
  const Eigen::VectorXd phi = phi_z_.features(z);
  const double y_std = (y - y_center_) / y_scale_;
  double ll = gauss_logpdf_1d(y_std, (w == 0 ? comb_y0_ : comb_y1_).dot(phi), sigma_y_);
  const double fw = comb_w_.dot(phi);
  ll -= ad::log1p_exp(fw) - w * fw;
  const Eigen::VectorXd fx = comb_x_ * phi;
  for (int d = 0; d < d_x_; ++d) {
    if (!x_binary_.empty() && x_binary_[d]) {
      ll -= ad::log1p_exp(fx(d)) - x(d) * fx(d);
    } else {
      ll += gauss_logpdf_1d(x(d), fx(d), sigma_x_);
    }
  }
  for (int d = 0; d < d_z_; ++d) ll += gauss_logpdf_1d(z(d), 0.0, sigma_z_);
  return ll;
}

double RffCausalModel::outcome_mean(int w, const Eigen::VectorXd& z) const {
  const Eigen::VectorXd phi = phi_z_.features(z);
  return y_center_ + y_scale_ * (w == 0 ? comb_y0_ : comb_y1_).dot(phi);
}

double RffCausalModel::treat_prob(const Eigen::VectorXd& x) const {
  return ad::sigmoid(comb_psi_.dot(phi_aux_.features(x)));
}

double RffCausalModel::sample_outcome(int w, const Eigen::VectorXd& x, Rng& rng) const {
  const Eigen::VectorXd phi = phi_aux_.features(x);
  return y_center_ + y_scale_ * (w == 0 ? comb_beta0_ : comb_beta1_).dot(phi) +
         aux_sd_ * rng.normal();
}

Eigen::VectorXd RffCausalModel::proposal_sample(double y, int w, const Eigen::VectorXd& x,
                                                Rng& rng) const {
  Eigen::VectorXd qin(1 + d_x_);
  qin(0) = (y - y_center_) / y_scale_;
  qin.tail(d_x_) = x;
  const Eigen::VectorXd phi = phi_q_.features(qin);
  Eigen::VectorXd z = (w == 0 ? comb_q0_ : comb_q1_) * phi;
  for (int d = 0; d < d_z_; ++d) z(d) += sigma_q_ * rng.normal();
  return z;
}

double RffCausalModel::proposal_logpdf(const Eigen::VectorXd& z, double y, int w,
                                       const Eigen::VectorXd& x) const {
  Eigen::VectorXd qin(1 + d_x_);
  qin(0) = (y - y_center_) / y_scale_;
  qin.tail(d_x_) = x;
  const Eigen::VectorXd mean = (w == 0 ? comb_q0_ : comb_q1_) * phi_q_.features(qin);
  double ll = 0.0;
  for (int d = 0; d < d_z_; ++d) ll += gauss_logpdf_1d(z(d), mean(d), sigma_q_);
  return ll;
}

Eigen::VectorXd RffCausalModel::predict_family(RffFamily family,
                                               const Eigen::VectorXd& input) const {
  switch (family) {
    case RffFamily::Y0: return Eigen::VectorXd::Constant(1, comb_y0_.dot(phi_z_.features(input)));
    case RffFamily::Y1: return Eigen::VectorXd::Constant(1, comb_y1_.dot(phi_z_.features(input)));
    case RffFamily::W: return Eigen::VectorXd::Constant(1, comb_w_.dot(phi_z_.features(input)));
    case RffFamily::X: return comb_x_ * phi_z_.features(input);
    case RffFamily::Q0: return comb_q0_ * phi_q_.features(input);
    case RffFamily::Q1: return comb_q1_ * phi_q_.features(input);
  }
  throw ConfigError("unknown family");
}

double aux_outcome_sd(const ParameterVector& aux_theta, const SourceDataset& shard) {
  const auto& amv = aux_theta.segment("meta").values;
  const int m = static_cast<int>(amv[0]);
  const int b = static_cast<int>(amv[1]);
  const int dx = static_cast<int>(amv[2]);
  const bool adaptive = amv[5] != 0.0;
  RffMeta meta;
  meta.m = m;
  meta.adaptive = adaptive;
  for (double v : aux_theta.segment("meta/sources").values)
    meta.source_ids.push_back(static_cast<int>(v));
  const int s_idx = source_index(meta, shard.source_id());
  const RffMap phi_aux = read_map(aux_theta, "rff/aux", b, dx);
  const TransferMatrix eta = read_transfer(aux_theta, "aux/eta", adaptive);
  const Eigen::VectorXd b0 = combine_weights_d(aux_theta, "aux/beta0/", meta, s_idx, eta);
  const Eigen::VectorXd b1 = combine_weights_d(aux_theta, "aux/beta1/", meta, s_idx, eta);
  double y_center = 0.0, y_scale = 1.0;
  if (aux_theta.has("meta/y_scale")) {
    y_center = aux_theta.segment("meta/y_scale").values[0];
    y_scale = aux_theta.segment("meta/y_scale").values[1];
  }
  double ss = 0.0;
  for (const Record& rec : shard.records()) {
    Eigen::VectorXd x(dx);
    for (int j = 0; j < dx; ++j) x(j) = rec.x[j];
    const Eigen::VectorXd phi = phi_aux.features(x);
    const double pred = y_center + y_scale * (rec.w == 0 ? b0 : b1).dot(phi);
    ss += (rec.y - pred) * (rec.y - pred);
  }
  return std::max(std::sqrt(ss / static_cast<double>(shard.size())), 1e-3);
}

MhResult mh_independent_sample(const GenerativeModel& model, double y, int w,
                               const Eigen::VectorXd& x, int n_samples, int burn_in,
                               std::uint64_t seed, bool use_mh) {
  if (!use_mh) {
    MhResult out;
    out.samples.resize(n_samples, model.z_dim());
    Rng rng(seed);
    for (int t = 0; t < n_samples; ++t) out.samples.row(t) = model.proposal_sample(y, w, x, rng);
    out.acceptance_rate = 1.0;
    return out;
  }
  return mh_independent(
      [&](const Eigen::VectorXd& z) { return model.log_joint(z, y, w, x); },
      [&](Rng& rng) { return model.proposal_sample(y, w, x, rng); },
      [&](const Eigen::VectorXd& z) { return model.proposal_logpdf(z, y, w, x); }, n_samples,
      burn_in, seed);
}

double estimate_cate(const GenerativeModel& model, const Eigen::VectorXd& x, int n_samples,
                     int chain_burn, std::uint64_t seed, bool use_mh) {
  double acc = 0.0;
  for (int l = 0; l < n_samples; ++l) {
    Rng rng(derive_seed(seed, {kCateTag, static_cast<std::uint64_t>(l)}));
    const int w = rng.bernoulli(model.treat_prob(x)) ? 1 : 0;
    const double y = model.sample_outcome(w, x, rng);
    const MhResult draw = mh_independent_sample(
        model, y, w, x, 1, chain_burn, derive_seed(seed, {kCateTag, static_cast<std::uint64_t>(l), 1}),
        use_mh);
    const Eigen::VectorXd z = draw.samples.row(0);
    acc += model.outcome_mean(1, z) - model.outcome_mean(0, z);
  }
  return acc / static_cast<double>(n_samples);
}

double estimate_local_ate(const GenerativeModel& model, const Eigen::MatrixXd& x_rows,
                          int n_samples, int chain_burn, std::uint64_t seed, bool use_mh) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < x_rows.rows(); ++i)
    acc += estimate_cate(model, x_rows.row(i), n_samples, chain_burn,
                         derive_seed(seed, {0xa7e, static_cast<std::uint64_t>(i)}), use_mh);
  return acc / static_cast<double>(x_rows.rows());
}

double estimate_global_ate(const std::vector<std::pair<double, int>>& local) {
  if (local.empty()) throw ConfigError("estimate_global_ate: empty input");
  double num = 0.0, den = 0.0;
  for (const auto& [ate, n] : local) {
    if (n < 1) throw ConfigError("estimate_global_ate: source size must be >= 1");
    num += static_cast<double>(n) * ate;
    den += static_cast<double>(n);
  }
  return num / den;
}

MinimaxBounds minimax_bounds(const std::vector<int>& n_per_source, int feature_count, int d_x,
                             const std::vector<double>& lambda_row_sums,
                             const std::vector<double>& gamma_row_sums,
                             const std::vector<double>& eta_row_sums, double sigma) {
  const std::size_t m = n_per_source.size();
  if (m == 0 || feature_count < 1) throw ConfigError("minimax_bounds: need m >= 1 and B >= 1");
  if (lambda_row_sums.size() != m || gamma_row_sums.size() != m || eta_row_sums.size() != m)
    throw ConfigError("minimax_bounds: row-sum lengths must match source count");
  const double md = static_cast<double>(m);
  const double log_term = std::log(2.0 * std::sqrt(md));
  double den_lambda = 0.0, den_gamma = 0.0, den_eta = 0.0;
  for (std::size_t s = 0; s < m; ++s) {
    if (n_per_source[s] < 1) throw ConfigError("minimax_bounds: n_s must be >= 1");
    const double n = n_per_source[s];
    den_lambda += n * (1.0 + lambda_row_sums[s]) * (1.0 + lambda_row_sums[s]);
    den_gamma += n * (1.0 + gamma_row_sums[s]);
    den_eta += n * (1.0 + eta_row_sums[s]) * (1.0 + eta_row_sums[s]);
  }
  MinimaxBounds out;
  out.latent = std::sqrt(md * (d_x + 3)) * log_term /
               (64.0 * std::sqrt(static_cast<double>(feature_count)) * den_lambda);
  out.psi = md * log_term / (256.0 * den_gamma);
  out.beta = sigma / std::pow(2.0, 4.5) *
             std::sqrt(md * log_term / (static_cast<double>(feature_count) * den_eta));
  return out;
}

}  // namespace fedcausal
