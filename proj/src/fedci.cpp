#include "fedcausal/fedci.hpp"

#include <cmath>

#include "fedcausal/ad_linalg.hpp"
#include "fedcausal/param_view.hpp"
#include "fedcausal/rng.hpp"

namespace fedcausal {

namespace {

using ad::Var;
using ad::VarVec;

constexpr std::uint64_t kFedciDrawTag = 0xfedc1;

// Wilson-Hilferty chi-squared transform, guarded to stay positive so the
// reparameterized Wishart draw is PSD for every noise realization.
template <typename T>
T chi2_wh(const T& df, double z) {
  using std::sqrt;
  const T ik = T(2.0 / 9.0) / df;
  const T base = T(1.0) - ik + sqrt(ik) * z;
  const T guarded = ad::log1p_exp(base * 30.0) / 30.0;
  return df * guarded * guarded * guarded;
}

inline double log1p_exp_d(double x) { return ad::log1p_exp(x); }

// Lower Cholesky factor of the drawn 2x2 Wishart scaled by L(Vq): entries
// (p11, p21, p22) of psi* with Psi = psi* psi*^T.
template <typename T>
struct ScaleDraw {
  T p11, p21, p22;
  T m11() const { return p11 * p11; }                 // Psi(0,0)
  T m21() const { return p11 * p21; }                 // Psi(1,0)
  T m22() const { return p21 * p21 + p22 * p22; }     // Psi(1,1)
};

template <typename T>
ScaleDraw<T> draw_scaled_wishart(const T& nu1, const T& nu2, const T& rho, const T& df,
                                 const double z[3]) {
  using std::sqrt;
  const T a11 = sqrt(chi2_wh(df, z[0]));
  const T a21 = T(z[1]);
  const T a22 = sqrt(chi2_wh(df - T(1.0), z[2]));
  const T l21 = rho * nu2;
  const T l22 = nu2 * sqrt(T(1.0) - rho * rho);
  ScaleDraw<T> out;
  out.p11 = nu1 * a11;
  out.p21 = l21 * a11 + l22 * a21;
  out.p22 = l22 * a22;
  return out;
}

struct WishartQ {
  Var nu1, nu2, rho, df;
};

WishartQ read_wishart(const VarView& view, const std::string& seg) {
  WishartQ q;
  q.nu1 = ad::exp(view.scalar(seg, 0));
  q.nu2 = ad::exp(view.scalar(seg, 1));
  q.rho = ad::sigmoid(view.scalar(seg, 2));
  q.df = Var(2.0) + ad::exp(view.scalar(seg, 3));
  return q;
}

struct WishartQd {
  double nu1, nu2, rho, df;
};

WishartQd read_wishart_d(const ParameterVector& theta, const std::string& seg) {
  const auto& v = theta.segment(seg).values;
  return {std::exp(v[0]), std::exp(v[1]), ad::sigmoid(v[2]), 2.0 + std::exp(v[3])};
}

// KL between 2x2 Wisharts W(Vq, dq) || W(V0, d0) with Vq given through its
// (nu1, nu2, rho) parameterization.
Var kl_wishart2(const WishartQ& q, const Eigen::Matrix2d& v0, double d0) {
  const Var v11 = q.nu1 * q.nu1;
  const Var v22 = q.nu2 * q.nu2;
  const Var v12 = q.rho * q.nu1 * q.nu2;
  const Var logdet_q = ad::log(v11) + ad::log(v22) + ad::log(Var(1.0) - q.rho * q.rho);
  const double det0 = v0.determinant();
  Eigen::Matrix2d v0inv = v0.inverse();
  const Var trace = v0inv(0, 0) * v11 + 2.0 * v0inv(0, 1) * v12 + v0inv(1, 1) * v22;
  auto lgamma2 = [](const Var& a) {
    return Var(0.5 * std::log(M_PI)) + ad::lgamma(a) + ad::lgamma(a - 0.5);
  };
  const double lgamma2_p = 0.5 * std::log(M_PI) + std::lgamma(d0 / 2.0) + std::lgamma(d0 / 2.0 - 0.5);
  const Var half_dq = q.df * 0.5;
  const Var mvdigamma = ad::digamma(half_dq) + ad::digamma(half_dq - 0.5);
  return Var(-d0 / 2.0) * (logdet_q - std::log(det0)) + half_dq * (trace - 2.0) +
         Var(lgamma2_p) - lgamma2(half_dq) + (q.df - d0) * 0.5 * mvdigamma;
}

// KL(N(h, U) || N(r, M)) with lu = chol(U) already available.
Var kl_gaussian(const VarVec& h, const VarVec& lu, const VarVec& r, const VarVec& lm, int m) {
  Var logdet_u(0.0), logdet_m(0.0);
  for (int i = 0; i < m; ++i) {
    logdet_u += 2.0 * ad::log(lu[i * m + i]);
    logdet_m += 2.0 * ad::log(lm[i * m + i]);
  }
  // tr(M^{-1} U) = || Lm^{-1} Lu ||_F^2
  Var trace(0.0);
  for (int col = 0; col < m; ++col) {
    VarVec b(m);
    for (int i = 0; i < m; ++i) b[i] = lu[i * m + col];
    const VarVec t = ad::solve_lower(lm, m, b);
    for (int i = 0; i < m; ++i) trace += t[i] * t[i];
  }
  VarVec diff(m);
  for (int i = 0; i < m; ++i) diff[i] = r[i] - h[i];
  const VarVec t = ad::solve_lower(lm, m, diff);
  Var quad(0.0);
  for (int i = 0; i < m; ++i) quad += t[i] * t[i];
  return (trace + quad - Var(static_cast<double>(m)) + logdet_m - logdet_u) * 0.5;
}

template <typename T>
T affine(const std::vector<T>& weights_then_bias, const std::vector<double>& input) {
  T out = weights_then_bias.back();
  for (std::size_t i = 0; i < input.size(); ++i) out += weights_then_bias[i] * input[i];
  return out;
}

double affine_d(const std::vector<double>& wb, const std::vector<double>& input) {
  double out = wb.back();
  for (std::size_t i = 0; i < input.size(); ++i) out += wb[i] * input[i];
  return out;
}

Eigen::MatrixXd sq_dist(const Eigen::MatrixXd& x) {
  const Eigen::Index n = x.rows();
  Eigen::MatrixXd d(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d(i, i) = 0.0;
    for (Eigen::Index j = 0; j < i; ++j) {
      d(i, j) = (x.row(i) - x.row(j)).squaredNorm();
      d(j, i) = d(i, j);
    }
  }
  return d;
}

Eigen::Matrix2d prior_v0(const FedCiPrior& p, double psi_scale_eff) {
  Eigen::Matrix2d v0;
  const double v = psi_scale_eff / p.d0;
  v0 << v, p.psi_corr * v, p.psi_corr * v, v;
  return v0;
}

Eigen::Matrix2d prior_s0(const FedCiPrior& p, double sigma_scale_eff) {
  Eigen::Matrix2d s0;
  const double v = sigma_scale_eff / p.n0;
  s0 << v, p.sigma_corr * v, p.sigma_corr * v, v;
  return s0;
}

struct Meta {
  int m;
  bool use_inter;
  int mc_samples;
  int dim_x;
  double psi_scale, sigma_scale;
  std::vector<int> source_ids;
};

Meta read_meta(const ParameterVector& theta) {
  const auto& mv = theta.segment("meta").values;
  Meta meta;
  meta.m = static_cast<int>(mv[0]);
  meta.use_inter = mv[1] != 0.0;
  meta.mc_samples = static_cast<int>(mv[2]);
  meta.dim_x = static_cast<int>(mv[3]);
  meta.psi_scale = mv[4];
  meta.sigma_scale = mv[5];
  for (double v : theta.segment("meta/sources").values)
    meta.source_ids.push_back(static_cast<int>(v));
  return meta;
}

int source_index(const Meta& meta, int source_id) {
  for (std::size_t i = 0; i < meta.source_ids.size(); ++i)
    if (meta.source_ids[i] == source_id) return static_cast<int>(i);
  throw ProtocolError("source id " + std::to_string(source_id) + " not registered in parameters");
}

}  // namespace

Eigen::MatrixXd joint_covariance(const Eigen::MatrixXd& k, const Eigen::Matrix2d& psi,
                                 const Eigen::Matrix2d& sigma) {
  auto psd_check = [](const Eigen::Matrix2d& a, const char* what) {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(a);
    if (es.eigenvalues().minCoeff() < -1e-12)
      throw NumericalError(std::string(what) + " must be positive semi-definite");
  };
  psd_check(psi, "Psi");
  psd_check(sigma, "Sigma");
  const Eigen::Index n = k.rows();
  return kronecker(psi, k) + kronecker(sigma, Eigen::MatrixXd::Identity(n, n));
}

Eigen::VectorXd joint_mean(const Eigen::VectorXd& mu0, const Eigen::VectorXd& mu1, double g0,
                           double g1, const Eigen::Matrix2d& psi) {
  const Eigen::MatrixXd root = cholesky(psi);
  const Eigen::Index n = mu0.size();
  Eigen::VectorXd out(2 * n);
  out.head(n) = root(0, 0) * (mu0.array() + g0);
  out.tail(n) = root(1, 0) * (mu0.array() + g0) + root(1, 1) * (mu1.array() + g1);
  return out;
}

ObsMisBlocks obs_mis_blocks(const Eigen::MatrixXd& k, const Eigen::VectorXd& w,
                            const Eigen::Matrix2d& psi, const Eigen::Matrix2d& sigma,
                            const Eigen::VectorXd& mu0, const Eigen::VectorXd& mu1, double g0,
                            double g1) {
  const Eigen::Index n = k.rows();
  const Eigen::MatrixXd root = cholesky(psi);
  const Eigen::VectorXd m0 = root(0, 0) * (mu0.array() + g0);
  const Eigen::VectorXd m1 =
      root(1, 0) * (mu0.array() + g0) + root(1, 1) * (mu1.array() + g1);

  ObsMisBlocks out;
  out.mu_obs.resize(n);
  out.mu_mis.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.mu_obs(i) = w(i) == 0.0 ? m0(i) : m1(i);
    out.mu_mis(i) = w(i) == 0.0 ? m1(i) : m0(i);
  }
  const double p11 = psi(0, 0), p12 = psi(0, 1), p21 = psi(1, 0), p22 = psi(1, 1);
  const double s11 = sigma(0, 0), s12 = sigma(0, 1), s21 = sigma(1, 0), s22 = sigma(1, 1);
  out.k_obs.resize(n, n);
  out.k_mis.resize(n, n);
  out.k_om.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      const double wi = w(i), wj = w(j);
      const double kij = k(i, j);
      const double eq = i == j ? 1.0 : 0.0;
      out.k_obs(i, j) = ((1 - wi) * (1 - wj) * p11 + wi * wj * p22 + (1 - wi) * wj * p12 +
                         wi * (1 - wj) * p21) * kij +
                        ((1 - wi) * s11 + wi * s22) * eq;
      out.k_mis(i, j) = (wi * wj * p11 + (1 - wi) * (1 - wj) * p22 + (1 - wi) * wj * p21 +
                         wi * (1 - wj) * p12) * kij +
                        (wi * s11 + (1 - wi) * s22) * eq;
      // The (obs, mis) block: Cov(y_i(w_i), y_j(1 - w_j)). The same pattern
      // with i and j exchanged gives the (mis, obs) reading.
      out.k_om(i, j) = ((1 - wi) * (1 - wj) * p12 + wi * wj * p21 + (1 - wi) * wj * p11 +
                        wi * (1 - wj) * p22) * kij +
                       ((1 - wi) * s12 + wi * s21) * eq;
    }
  return out;
}

double wishart_kl2(double nu1, double nu2, double rho, double dq, const Eigen::Matrix2d& v0,
                   double d0) {
  ad::Tape tape;
  ad::ScopedTape guard(tape);
  WishartQ q{Var(nu1), Var(nu2), Var(rho), Var(dq)};
  return ad::value(kl_wishart2(q, v0, d0));
}

Eigen::Matrix2d wishart_reparam_draw(double nu1, double nu2, double rho, double df,
                                     const double z[3]) {
  const ScaleDraw<double> draw = draw_scaled_wishart(nu1, nu2, rho, df, z);
  Eigen::Matrix2d out;
  out << draw.m11(), draw.m21(), draw.m21(), draw.m22();
  return out;
}

EffectEstimate estimate_effects(const OutcomePosterior& post, const SourceDataset& shard) {
  const Eigen::Index n = static_cast<Eigen::Index>(shard.size());
  if (post.mean.size() != n) throw SchemaError("estimate_effects: size mismatch");
  const Eigen::VectorXd w = shard.w_vector();
  const Eigen::VectorXd y = shard.y_vector();
  const Eigen::VectorXd sign = 2.0 * w.array() - 1.0;
  EffectEstimate out;
  out.ite_mean = sign.array() * (y - post.mean).array();
  out.ite_var = post.cov.diagonal();
  out.ate_mean = sign.dot(y - post.mean) / static_cast<double>(n);
  out.ate_var = sign.dot(post.cov * sign) / static_cast<double>(n * n);
  return out;
}

ParameterVector FedCiObjective::initial_params(const std::vector<SourceInfo>& sources,
                                               std::uint64_t /*seed*/) const {
  if (sources.empty()) throw ConfigError("fedci: no sources registered");
  const int m = static_cast<int>(sources.size());
  const int dx = sources.front().dim_x;
  for (const auto& s : sources)
    if (s.dim_x != dx) throw SchemaError("fedci: sources disagree on covariate dimension");
  const int moment_dim = 4 * dx + 12;

  // Data-informed scale: pooled outcome mean/variance from the announced
  // moment summaries (means live at offsets 0 and 4, variances at 1 and 5).
  double mean_y = 0.0, var_y = 0.0;
  for (const auto& s : sources) {
    if (static_cast<int>(s.moments.size()) != moment_dim)
      throw SchemaError("fedci: moment vector has unexpected length");
    mean_y += 0.5 * (s.moments[0] + s.moments[4]);
    var_y += 0.5 * (s.moments[1] + s.moments[5]);
  }
  mean_y /= m;
  var_y = std::max(var_y / m, 1e-6);

  const double psi_scale = cfg_.prior.psi_scale > 0.0 ? cfg_.prior.psi_scale : var_y;
  const double sigma_scale = cfg_.prior.sigma_scale > 0.0 ? cfg_.prior.sigma_scale : 0.1 * var_y;

  ParameterVector theta;
  auto fixed = [&theta](const std::string& name, std::vector<double> vals) {
    ParamSegment seg;
    seg.name = name;
    seg.shape = {static_cast<int>(vals.size())};
    seg.values = std::move(vals);
    seg.trainable = false;
    theta.add(std::move(seg));
  };
  auto trainable = [&theta](const std::string& name, std::vector<double> vals) {
    ParamSegment seg;
    seg.name = name;
    seg.shape = {static_cast<int>(vals.size())};
    seg.values = std::move(vals);
    theta.add(std::move(seg));
  };

  fixed("meta", {static_cast<double>(m), cfg_.use_inter_dependency ? 1.0 : 0.0,
                 static_cast<double>(cfg_.mc_samples), static_cast<double>(dx), psi_scale,
                 sigma_scale});
  std::vector<double> ids, ns;
  for (const auto& s : sources) {
    ids.push_back(s.source_id);
    ns.push_back(s.n_records);
  }
  fixed("meta/sources", ids);
  fixed("meta/n", ns);
  fixed("fedci/prior", {cfg_.prior.psi_corr, cfg_.prior.d0, cfg_.prior.sigma_corr, cfg_.prior.n0});
  for (const auto& s : sources) fixed("moments/" + std::to_string(s.source_id), s.moments);

  std::vector<double> mu_init(dx + 1, 0.0);
  mu_init.back() = mean_y;
  trainable("fedci/mu0", mu_init);
  trainable("fedci/mu1", mu_init);
  trainable("fedci/r0", std::vector<double>(4 * dx + 1, 0.0));
  trainable("fedci/r1", std::vector<double>(4 * dx + 1, 0.0));
  trainable("fedci/h0", std::vector<double>(moment_dim + 1, 0.0));
  trainable("fedci/h1", std::vector<double>(moment_dim + 1, 0.0));

  const double ell_k = cfg_.ell_k > 0.0 ? cfg_.ell_k : std::sqrt(static_cast<double>(dx));
  const double ell_m = cfg_.ell_m > 0.0 ? cfg_.ell_m : std::sqrt(static_cast<double>(4 * dx));
  const double ell_u = cfg_.ell_u > 0.0 ? cfg_.ell_u : std::sqrt(static_cast<double>(moment_dim));
  trainable("fedci/log_ell", {std::log(ell_k), std::log(ell_m), std::log(ell_u)});

  auto raw_corr = [](double c) {
    const double clamped = std::min(std::max(c, 1e-6), 1.0 - 1e-6);
    return std::log(clamped / (1.0 - clamped));
  };
  // Variational q initialized at the prior.
  trainable("fedci/wishart_v",
            {0.5 * std::log(psi_scale / cfg_.prior.d0), 0.5 * std::log(psi_scale / cfg_.prior.d0),
             raw_corr(cfg_.prior.psi_corr), std::log(cfg_.prior.d0 - 2.0)});
  trainable("fedci/wishart_s", {0.5 * std::log(sigma_scale / cfg_.prior.n0),
                                0.5 * std::log(sigma_scale / cfg_.prior.n0),
                                raw_corr(cfg_.prior.sigma_corr), std::log(cfg_.prior.n0 - 2.0)});
  return theta;
}

EvalResult FedCiObjective::eval(const ParameterVector& theta, const SourceDataset& shard,
                                std::uint64_t round_seed) const {
  return eval_pooled(theta, {&shard}, round_seed);
}

EvalResult FedCiObjective::eval_pooled(const ParameterVector& theta,
                                       const std::vector<const SourceDataset*>& shards,
                                       std::uint64_t round_seed) const {
  if (shards.empty()) throw ConfigError("fedci eval: no shards");
  ad::Tape tape;
  ad::ScopedTape guard(tape);
  VarView view(theta);

  const Meta meta = read_meta(theta);
  const int m = meta.m;
  const auto& prior = theta.segment("fedci/prior").values;
  const FedCiPrior pr{meta.psi_scale, prior[0], prior[1], meta.sigma_scale, prior[2], prior[3]};
  const Eigen::Matrix2d v0 = prior_v0(pr, meta.psi_scale);
  const Eigen::Matrix2d s0 = prior_s0(pr, meta.sigma_scale);

  std::vector<std::vector<double>> moments(m);
  for (int v = 0; v < m; ++v)
    moments[v] = theta.segment("moments/" + std::to_string(meta.source_ids[v])).values;

  const Var ell_k = ad::exp(view.scalar("fedci/log_ell", 0));
  const Var ell_m = ad::exp(view.scalar("fedci/log_ell", 1));
  const Var ell_u = ad::exp(view.scalar("fedci/log_ell", 2));
  const WishartQ qv = read_wishart(view, "fedci/wishart_v");
  const WishartQ qs = read_wishart(view, "fedci/wishart_s");

  // Per-shard data and the pieces shared across MC draws.
  struct ShardCtx {
    int n = 0, s_idx = 0;
    Eigen::VectorXd w, y;
    VarVec mu0, mu1, kmat;
  };
  std::vector<ShardCtx> ctx(shards.size());
  const Var inv2ell2 = Var(0.5) / (ell_k * ell_k);
  for (std::size_t s = 0; s < shards.size(); ++s) {
    const SourceDataset& shard = *shards[s];
    ShardCtx& c = ctx[s];
    c.n = static_cast<int>(shard.size());
    c.s_idx = source_index(meta, shard.source_id());
    c.w = shard.w_vector();
    c.y = shard.y_vector();
    const Eigen::MatrixXd x = shard.x_matrix();
    const Eigen::MatrixXd d2 = sq_dist(x);
    c.mu0.resize(c.n);
    c.mu1.resize(c.n);
    for (int i = 0; i < c.n; ++i) {
      std::vector<double> xi(x.row(i).begin(), x.row(i).end());
      c.mu0[i] = affine(view["fedci/mu0"], xi);
      c.mu1[i] = affine(view["fedci/mu1"], xi);
    }
    c.kmat.resize(static_cast<std::size_t>(c.n) * c.n);
    for (int i = 0; i < c.n; ++i) {
      c.kmat[i * c.n + i] = Var(1.0);
      for (int j = 0; j < i; ++j) {
        const Var kij = ad::exp(-(inv2ell2 * d2(i, j)));
        c.kmat[i * c.n + j] = kij;
        c.kmat[j * c.n + i] = kij;
      }
    }
  }

  // Inter-dependency pathway: q(g_j) = N(h_j, U) against prior N(r_j, M).
  VarVec h0(m, Var(0.0)), h1(m, Var(0.0)), lu;
  Var kl_g(0.0);
  if (meta.use_inter) {
    VarVec r0(m), r1(m);
    for (int v = 0; v < m; ++v) {
      h0[v] = affine(view["fedci/h0"], moments[v]);
      h1[v] = affine(view["fedci/h1"], moments[v]);
      std::vector<double> xt(moments[v].begin() + 8, moments[v].begin() + 8 + 4 * meta.dim_x);
      r0[v] = affine(view["fedci/r0"], xt);
      r1[v] = affine(view["fedci/r1"], xt);
    }
    auto moment_kernel = [&](const Var& ell, bool on_xt) {
      VarVec mat(static_cast<std::size_t>(m) * m);
      const Var inv = Var(0.5) / (ell * ell);
      for (int a = 0; a < m; ++a)
        for (int b = 0; b <= a; ++b) {
          double dd = 0.0;
          const std::size_t lo = on_xt ? 8 : 0;
          const std::size_t hi = on_xt ? 8 + 4 * meta.dim_x : moments[a].size();
          for (std::size_t t = lo; t < hi; ++t) {
            const double diff = moments[a][t] - moments[b][t];
            dd += diff * diff;
          }
          const Var kab = ad::exp(-(inv * dd));
          mat[a * m + b] = kab;
          mat[b * m + a] = kab;
        }
      return mat;
    };
    VarVec u_mat = moment_kernel(ell_u, false);
    VarVec m_mat = moment_kernel(ell_m, true);
    lu = u_mat;
    ad::cholesky_inplace(lu, m, 1e-6);
    VarVec lm = m_mat;
    ad::cholesky_inplace(lm, m, 1e-6);
    kl_g = kl_gaussian(h0, lu, r0, lm, m) + kl_gaussian(h1, lu, r1, lm, m);
  }

  const Var kl_psi = kl_wishart2(qv, v0, pr.d0);
  const Var kl_sigma = kl_wishart2(qs, s0, pr.n0);

  // Monte Carlo over the shared q draws; the stream depends only on the
  // round seed so every source (and a pooled evaluation) sees identical noise.
  const int n_samples = meta.mc_samples;
  Var loglik(0.0);
  for (int l = 0; l < n_samples; ++l) {
    Rng rng(derive_seed(round_seed, {kFedciDrawTag, static_cast<std::uint64_t>(l)}));
    double z_psi[3] = {rng.normal(), rng.normal(), rng.normal()};
    double z_sigma[3] = {rng.normal(), rng.normal(), rng.normal()};
    std::vector<double> xi0(m), xi1(m);
    for (int v = 0; v < m; ++v) xi0[v] = rng.normal();
    for (int v = 0; v < m; ++v) xi1[v] = rng.normal();

    const ScaleDraw<Var> psi = draw_scaled_wishart(qv.nu1, qv.nu2, qv.rho, qv.df, z_psi);
    const ScaleDraw<Var> sig = draw_scaled_wishart(qs.nu1, qs.nu2, qs.rho, qs.df, z_sigma);
    const Var psi11 = psi.m11(), psi21 = psi.m21(), psi22 = psi.m22();
    const Var sig11 = sig.m11(), sig22 = sig.m22();

    for (ShardCtx& c : ctx) {
      Var g0(0.0), g1(0.0);
      if (meta.use_inter) {
        // g_j = h_j + chol(U) xi_j, component of this source.
        g0 = h0[c.s_idx];
        g1 = h1[c.s_idx];
        for (int t = 0; t <= c.s_idx; ++t) {
          g0 += lu[c.s_idx * m + t] * xi0[t];
          g1 += lu[c.s_idx * m + t] * xi1[t];
        }
      }

      // Observed-outcome mean and covariance per the obs/mis block pattern.
      const int n = c.n;
      VarVec mu_obs(n);
      for (int i = 0; i < n; ++i) {
        const Var t0 = c.mu0[i] + g0;
        const Var t1 = c.mu1[i] + g1;
        const Var m0 = psi.p11 * t0;
        const Var m1 = psi.p21 * t0 + psi.p22 * t1;
        mu_obs[i] = c.w(i) == 0.0 ? m0 : m1;
      }
      std::vector<Var> k_lower(static_cast<std::size_t>(n) * (n + 1) / 2);
      std::size_t p = 0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) {
          const double wi = c.w(i), wj = c.w(j);
          Var coef;
          if (wi == 0.0 && wj == 0.0) coef = psi11;
          else if (wi == 1.0 && wj == 1.0) coef = psi22;
          else coef = psi21;
          Var entry = coef * c.kmat[i * n + j];
          if (i == j) entry += (wi == 0.0 ? sig11 : sig22) + 1e-8;
          k_lower[p++] = entry;
        }
      loglik += ad::gaussian_logpdf_custom(k_lower, mu_obs, c.y);
    }
  }

  Var objective = loglik / static_cast<double>(n_samples) -
                  (kl_g + kl_psi + kl_sigma) *
                      (static_cast<double>(shards.size()) / static_cast<double>(m));

  tape.backward(objective.idx);
  EvalResult out;
  out.objective = ad::value(objective);
  out.gradient = view.collect_gradient(tape);
  return out;
}

OutcomePosterior FedCiObjective::predict_missing(const ParameterVector& theta,
                                                 const SourceDataset& target, int mc_samples,
                                                 std::uint64_t seed) const {
  const Meta meta = read_meta(theta);
  const int m = meta.m;
  const int s_idx = source_index(meta, target.source_id());
  const auto& prior = theta.segment("fedci/prior").values;
  const FedCiPrior pr{meta.psi_scale, prior[0], prior[1], meta.sigma_scale, prior[2], prior[3]};

  const auto& log_ell = theta.segment("fedci/log_ell").values;
  const double ell_k = std::exp(log_ell[0]);
  const double ell_u = std::exp(log_ell[2]);
  const WishartQd qv = read_wishart_d(theta, "fedci/wishart_v");
  const WishartQd qs = read_wishart_d(theta, "fedci/wishart_s");

  std::vector<std::vector<double>> moments(m);
  for (int v = 0; v < m; ++v)
    moments[v] = theta.segment("moments/" + std::to_string(meta.source_ids[v])).values;

  const int n = static_cast<int>(target.size());
  const Eigen::MatrixXd x = target.x_matrix();
  const Eigen::VectorXd w = target.w_vector();
  const Eigen::VectorXd y = target.y_vector();
  const Eigen::MatrixXd d2 = sq_dist(x);
  Eigen::MatrixXd kmat(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) kmat(i, j) = std::exp(-d2(i, j) / (2.0 * ell_k * ell_k));

  Eigen::VectorXd mu0(n), mu1(n);
  const auto& mu0_wb = theta.segment("fedci/mu0").values;
  const auto& mu1_wb = theta.segment("fedci/mu1").values;
  for (int i = 0; i < n; ++i) {
    std::vector<double> xi(x.row(i).begin(), x.row(i).end());
    mu0(i) = affine_d(mu0_wb, xi);
    mu1(i) = affine_d(mu1_wb, xi);
  }

  Eigen::VectorXd h0 = Eigen::VectorXd::Zero(m), h1 = Eigen::VectorXd::Zero(m);
  Eigen::MatrixXd lu = Eigen::MatrixXd::Zero(m, m);
  if (meta.use_inter) {
    const auto& h0_wb = theta.segment("fedci/h0").values;
    const auto& h1_wb = theta.segment("fedci/h1").values;
    Eigen::MatrixXd u_mat(m, m);
    for (int a = 0; a < m; ++a) {
      h0(a) = affine_d(h0_wb, moments[a]);
      h1(a) = affine_d(h1_wb, moments[a]);
      for (int b = 0; b <= a; ++b) {
        double dd = 0.0;
        for (std::size_t t = 0; t < moments[a].size(); ++t) {
          const double diff = moments[a][t] - moments[b][t];
          dd += diff * diff;
        }
        u_mat(a, b) = u_mat(b, a) = std::exp(-dd / (2.0 * ell_u * ell_u));
      }
      u_mat(a, a) += 1e-6;
    }
    lu = Eigen::LLT<Eigen::MatrixXd>(u_mat).matrixL();
  }

  // The noise cross-correlation is never informed by the likelihood, so the
  // predictive blocks pin it at its prior value.
  const double sig12_fixed = pr.sigma_corr * meta.sigma_scale;

  Eigen::VectorXd mean_acc = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd second_acc = Eigen::MatrixXd::Zero(n, n);
  for (int l = 0; l < mc_samples; ++l) {
    Rng rng(derive_seed(seed, {kFedciDrawTag, 0x9ced, static_cast<std::uint64_t>(l)}));
    double z_psi[3] = {rng.normal(), rng.normal(), rng.normal()};
    double z_sigma[3] = {rng.normal(), rng.normal(), rng.normal()};
    Eigen::VectorXd xi0(m), xi1(m);
    for (int v = 0; v < m; ++v) xi0(v) = rng.normal();
    for (int v = 0; v < m; ++v) xi1(v) = rng.normal();

    const ScaleDraw<double> psi = draw_scaled_wishart(qv.nu1, qv.nu2, qv.rho, qv.df, z_psi);
    const ScaleDraw<double> sig = draw_scaled_wishart(qs.nu1, qs.nu2, qs.rho, qs.df, z_sigma);
    Eigen::Matrix2d psi_m, sig_m;
    psi_m << psi.m11(), psi.m21(), psi.m21(), psi.m22();
    sig_m << sig.m11(), sig12_fixed, sig12_fixed, sig.m22();

    double g0 = 0.0, g1 = 0.0;
    if (meta.use_inter) {
      g0 = h0(s_idx) + lu.row(s_idx).head(s_idx + 1).dot(xi0.head(s_idx + 1));
      g1 = h1(s_idx) + lu.row(s_idx).head(s_idx + 1).dot(xi1.head(s_idx + 1));
    }

    ObsMisBlocks blocks = obs_mis_blocks(kmat, w, psi_m, sig_m, mu0, mu1, g0, g1);
    blocks.k_obs.diagonal().array() += 1e-8;
    const Eigen::MatrixXd l_obs = cholesky(blocks.k_obs);
    const Eigen::VectorXd resid = y - blocks.mu_obs;
    const Eigen::VectorXd alpha =
        l_obs.transpose().triangularView<Eigen::Upper>().solve(
            l_obs.triangularView<Eigen::Lower>().solve(resid));
    const Eigen::VectorXd cond_mean = blocks.mu_mis + blocks.k_om.transpose() * alpha;
    const Eigen::MatrixXd v = l_obs.triangularView<Eigen::Lower>().solve(blocks.k_om);
    const Eigen::MatrixXd cond_cov = blocks.k_mis - v.transpose() * v;

    mean_acc += cond_mean;
    second_acc += cond_cov + cond_mean * cond_mean.transpose();
  }
  OutcomePosterior post;
  post.mean = mean_acc / mc_samples;
  post.cov = second_acc / mc_samples - post.mean * post.mean.transpose();
  // Mixture-moment covariance: symmetrize away rounding skew.
  post.cov = 0.5 * (post.cov + post.cov.transpose()).eval();
  return post;
}

}  // namespace fedcausal
