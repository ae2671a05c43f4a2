#include "fedcausal/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "fedcausal/autodiff.hpp"
#include "fedcausal/rng.hpp"

namespace fedcausal {

namespace {

double sigmoid(double x) { return ad::sigmoid(x); }
double softplus(double x) { return ad::softplus(x); }

std::vector<double> draw_vec(Rng& rng, int n, double mean, double sd) {
  std::vector<double> out(n);
  for (auto& v : out) v = rng.normal(mean, sd);
  return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

void finalize_truth(GroundTruth& truth) {
  double acc = 0.0;
  long n = 0;
  for (const auto& ite : truth.ite) {
    acc += ite.sum();
    n += ite.size();
  }
  truth.tau = acc / static_cast<double>(n);
}

}  // namespace

void DgpConfig::validate() const {
  if (n_per_source < 1 || sources < 1) throw ConfigError("dgp: n and m must be >= 1");
  if (d_x < 1) throw ConfigError("dgp: d_x must be >= 1");
  if (family == "causalrff") {
    double total = 0.0;
    for (double p : rho) {
      if (p < 0.0) throw ConfigError("dgp: rho entries must be non-negative");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("dgp: rho must sum to 1");
    if (!delta.empty() && static_cast<int>(delta.size()) != sources)
      throw ConfigError("dgp: delta must have one entry per source");
  }
  if (family == "causalfi" && d_u < 1) throw ConfigError("dgp: causalfi needs d_u >= 1");
  if (outcome_link != "softplus" && outcome_link != "linear")
    throw ConfigError("dgp: unknown outcome link " + outcome_link);
}

GeneratedData gen_fedci(const DgpConfig& cfg) {
  cfg.validate();
  const bool binary = cfg.family == "fedci_binary";
  const bool count = cfg.family == "fedci_count";
  Rng coef_rng(derive_seed(cfg.seed, {0xfed, 1}));

  double a0 = 0.6, b0 = 0.9, c0 = 2.0;
  std::vector<double> a1 = draw_vec(coef_rng, cfg.d_x, 0.0, std::sqrt(2.0));
  std::vector<double> b1, c1;
  if (cfg.scale_set == "data2") {
    b0 = 6.0;
    c0 = 30.0;
    b1 = draw_vec(coef_rng, cfg.d_x, 10.0, std::sqrt(2.0));
    c1 = draw_vec(coef_rng, cfg.d_x, 15.0, std::sqrt(2.0));
  } else {
    b1 = draw_vec(coef_rng, cfg.d_x, 0.0, std::sqrt(2.0));
    c1 = draw_vec(coef_rng, cfg.d_x, 1.0, std::sqrt(2.0));
  }

  GeneratedData out;
  for (int s = 0; s < cfg.sources; ++s) {
    Rng rng(derive_seed(cfg.seed, {0xfed, 2, static_cast<std::uint64_t>(s)}));
    std::vector<Record> records;
    Eigen::VectorXd y0v(cfg.n_per_source), y1v(cfg.n_per_source);
    for (int i = 0; i < cfg.n_per_source; ++i) {
      Record rec;
      rec.x.resize(cfg.d_x);
      for (int j = 0; j < cfg.d_x; ++j) rec.x[j] = rng.uniform(-1.0, 1.0);
      rec.w = rng.bernoulli(sigmoid(a0 + dot(rec.x, a1))) ? 1 : 0;
      const double m0 = b0 + dot(rec.x, b1);
      const double m1 = c0 + dot(rec.x, c1);
      double y0, y1;
      if (binary) {
        y0 = rng.bernoulli(sigmoid(m0)) ? 1.0 : 0.0;
        y1 = rng.bernoulli(sigmoid(m1)) ? 1.0 : 0.0;
      } else if (count) {
        y0 = static_cast<double>(rng.poisson(std::exp(std::min(m0, 12.0))));
        y1 = static_cast<double>(rng.poisson(std::exp(std::min(m1, 12.0))));
      } else {
        y0 = rng.normal(softplus(m0), cfg.sigma0);
        y1 = rng.normal(softplus(m1), cfg.sigma1);
      }
      rec.y = rec.w == 1 ? y1 : y0;
      y0v(i) = y0;
      y1v(i) = y1;
      records.push_back(std::move(rec));
    }
    out.data.emplace_back(s + 1, std::move(records));
    out.truth.y0.push_back(y0v);
    out.truth.y1.push_back(y1v);
    out.truth.ite.push_back(y1v - y0v);
  }
  finalize_truth(out.truth);
  out.manifest = {{"family", cfg.family}, {"seed", cfg.seed},       {"scale_set", cfg.scale_set},
                  {"a0", a0},             {"b0", b0},               {"c0", c0},
                  {"a1", a1},             {"b1", b1},               {"c1", c1},
                  {"sigma0", cfg.sigma0}, {"sigma1", cfg.sigma1},   {"d_x", cfg.d_x},
                  {"sources", cfg.sources}, {"n_per_source", cfg.n_per_source}};
  return out;
}

GeneratedData gen_causalrff(const DgpConfig& cfg) {
  cfg.validate();
  const int levels = static_cast<int>(cfg.rho.size());
  Rng coef_rng(derive_seed(cfg.seed, {0x2ff, 1}));

  const double c0 = 0.9, d0 = 7.9;
  double b0 = 0.0;
  std::vector<double> b1 = draw_vec(coef_rng, levels, 0.0, std::sqrt(2.0));
  std::vector<double> c1 = draw_vec(coef_rng, levels, 0.0, std::sqrt(2.0));
  std::vector<double> d1 = draw_vec(coef_rng, levels, 0.0, std::sqrt(2.0));
  std::vector<double> aj0(cfg.d_x);
  std::vector<std::vector<double>> aj1(cfg.d_x);
  for (int j = 0; j < cfg.d_x; ++j) {
    aj0[j] = coef_rng.normal(0.0, std::sqrt(2.0));
    aj1[j] = draw_vec(coef_rng, levels, 0.0, std::sqrt(2.0));
  }

  std::vector<double> delta = cfg.delta;
  if (delta.empty()) delta.assign(cfg.sources, 0.0);

  GeneratedData out;
  for (int s = 0; s < cfg.sources; ++s) {
    Rng rng(derive_seed(cfg.seed, {0x2ff, 2, static_cast<std::uint64_t>(s)}));
    std::vector<Record> records;
    Eigen::VectorXd y0v(cfg.n_per_source), y1v(cfg.n_per_source);
    Eigen::MatrixXd latent(cfg.n_per_source, 1);
    for (int i = 0; i < cfg.n_per_source; ++i) {
      const int z = static_cast<int>(rng.categorical(cfg.rho));
      latent(i, 0) = z;
      Record rec;
      rec.x.resize(cfg.d_x);
      for (int j = 0; j < cfg.d_x; ++j)
        rec.x[j] = rng.bernoulli(sigmoid(aj0[j] + aj1[j][z])) ? 1.0 : 0.0;
      rec.w = rng.bernoulli(sigmoid(b0 + b1[z] + delta[s])) ? 1 : 0;
      const double y0 = rng.normal(softplus(c0 + c1[z] + delta[s]), cfg.sigma0);
      const double y1 = rng.normal(softplus(d0 + d1[z] + delta[s]), cfg.sigma1);
      rec.y = rec.w == 1 ? y1 : y0;
      y0v(i) = y0;
      y1v(i) = y1;
      records.push_back(std::move(rec));
    }
    out.data.emplace_back(s + 1, std::move(records));
    out.truth.y0.push_back(y0v);
    out.truth.y1.push_back(y1v);
    out.truth.ite.push_back(y1v - y0v);
    out.truth.latent.push_back(latent);
  }
  finalize_truth(out.truth);
  out.manifest = {{"family", "causalrff"}, {"seed", cfg.seed}, {"rho", cfg.rho},
                  {"b0", b0},              {"b1", b1},         {"c0", c0},
                  {"c1", c1},              {"d0", d0},         {"d1", d1},
                  {"a_j0", aj0},           {"a_j1", aj1},      {"delta", delta},
                  {"sigma0", cfg.sigma0},  {"sigma1", cfg.sigma1}, {"d_x", cfg.d_x},
                  {"sources", cfg.sources}, {"n_per_source", cfg.n_per_source}};
  return out;
}

GeneratedData gen_causalfi(const DgpConfig& cfg) {
  cfg.validate();
  const int d_total = cfg.d_x + cfg.d_u;
  Rng coef_rng(derive_seed(cfg.seed, {0xcf1, 1}));

  const double a0 = coef_rng.normal(0.0, 1.0);
  const double c0 = coef_rng.normal(0.0, 1.0);
  const double d0 = c0 + 2.0 + coef_rng.uniform(0.0, 2.0);
  std::vector<double> b1 = draw_vec(coef_rng, cfg.d_u, 0.0, 1.0);
  std::vector<double> c1 = draw_vec(coef_rng, cfg.d_u, 0.0, 1.0);
  std::vector<double> d1 = draw_vec(coef_rng, cfg.d_u, 0.0, 1.0);

  // Missing-indicator coefficients, one row per incomplete dimension.
  std::vector<double> e1(cfg.d_u), e2(cfg.d_u);
  std::vector<std::vector<double>> e3(cfg.d_u);
  {
    const int rank = std::min(cfg.d_x, 5);
    std::vector<std::vector<double>> l_rows(cfg.d_x, std::vector<double>(rank));
    for (auto& row : l_rows)
      for (auto& v : row) v = coef_rng.uniform(0.0, 0.5);
    for (int j = 0; j < cfg.d_u; ++j) {
      e1[j] = coef_rng.uniform(cfg.missing_e12_lo, cfg.missing_e12_hi);
      e2[j] = coef_rng.uniform(cfg.missing_e12_lo, cfg.missing_e12_hi);
      // e3_j ~ N(0, L L^T): draw g ~ N(0, I_rank), map through L.
      std::vector<double> g(rank);
      for (auto& v : g) v = coef_rng.normal();
      e3[j].resize(cfg.d_x);
      for (int c = 0; c < cfg.d_x; ++c) e3[j][c] = dot(l_rows[c], g);
    }
  }

  const bool linear = cfg.outcome_link == "linear";
  auto link = [&](double t) { return linear ? t : softplus(t); };

  GeneratedData out;
  for (int s = 0; s < cfg.sources; ++s) {
    Rng rng(derive_seed(cfg.seed, {0xcf1, 2, static_cast<std::uint64_t>(s)}));
    std::vector<Record> records;
    Eigen::VectorXd y0v(cfg.n_per_source), y1v(cfg.n_per_source);
    Eigen::MatrixXd latent(cfg.n_per_source, cfg.d_u);
    for (int i = 0; i < cfg.n_per_source; ++i) {
      // Joint confounder draw with AR(1) correlation, split into (x, u).
      std::vector<double> z(d_total);
      double prev = rng.normal();
      z[0] = prev;
      for (int j = 1; j < d_total; ++j) {
        prev = 0.5 * prev + std::sqrt(1.0 - 0.25) * rng.normal();
        z[j] = prev;
      }
      Record rec;
      rec.x.assign(z.begin(), z.begin() + cfg.d_x);
      std::vector<double> u(z.begin() + cfg.d_x, z.end());

      rec.w = rng.bernoulli(sigmoid(a0 + dot(u, b1))) ? 1 : 0;
      const double y0 = rng.normal(link(c0 + dot(u, c1)), cfg.sigma0);
      const double y1 = rng.normal(link(d0 + dot(u, d1)), cfg.sigma1);
      rec.y = rec.w == 1 ? y1 : y0;

      rec.u_raw = u;
      for (int j = 0; j < cfg.d_u; ++j) latent(i, j) = u[j];
      rec.r.resize(cfg.d_u);
      for (int j = 0; j < cfg.d_u; ++j) {
        const double logit = cfg.missing_e0 + e1[j] * rec.w + e2[j] * rec.y + dot(rec.x, e3[j]);
        rec.r[j] = rng.bernoulli(sigmoid(logit)) ? 1 : 0;
        if (rec.r[j] == 0) rec.u_raw[j] = 0.0;  // value is undefined once masked
      }
      y0v(i) = y0;
      y1v(i) = y1;
      records.push_back(std::move(rec));
    }
    out.data.emplace_back(s + 1, std::move(records));
    out.truth.y0.push_back(y0v);
    out.truth.y1.push_back(y1v);
    out.truth.ite.push_back(y1v - y0v);
    out.truth.latent.push_back(latent);
  }
  finalize_truth(out.truth);
  out.manifest = {{"family", "causalfi"}, {"seed", cfg.seed},   {"a0", a0},
                  {"b1", b1},             {"c0", c0},           {"c1", c1},
                  {"d0", d0},             {"d1", d1},           {"e0", cfg.missing_e0},
                  {"e1", e1},             {"e2", e2},           {"e3", e3},
                  {"outcome_link", cfg.outcome_link},           {"d_x", cfg.d_x},
                  {"d_u", cfg.d_u},       {"sigma0", cfg.sigma0}, {"sigma1", cfg.sigma1},
                  {"sources", cfg.sources}, {"n_per_source", cfg.n_per_source}};
  return out;
}

GeneratedData ihdp_load(const std::string& path, int sources) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open file: " + path);
  std::string header;
  if (!std::getline(in, header)) throw ParseError(path + ": empty file");
  if (!header.empty() && header.back() == '\r') header.pop_back();
  std::vector<std::string> cols;
  {
    std::stringstream ss(header);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
  }
  int w_col = -1, y_col = -1, y0_col = -1, y1_col = -1;
  std::vector<int> x_cols;
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] == "w") w_col = static_cast<int>(i);
    else if (cols[i] == "y") y_col = static_cast<int>(i);
    else if (cols[i] == "y0") y0_col = static_cast<int>(i);
    else if (cols[i] == "y1") y1_col = static_cast<int>(i);
    else if (cols[i].rfind("x", 0) == 0) x_cols.push_back(static_cast<int>(i));
  }
  if (y0_col < 0 || y1_col < 0)
    throw SchemaError(path + ": potential-outcome columns y0/y1 are required");
  if (w_col < 0) throw SchemaError(path + ": treatment column w is required");

  std::vector<Record> all;
  std::vector<double> y0s, y1s;
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line.back() == '\r') line.pop_back();
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (cells.size() != cols.size())
      throw ParseError(path + ": line " + std::to_string(line_no) + ": cell count mismatch");
    Record rec;
    rec.w = static_cast<int>(std::stod(cells[w_col]));
    const double y0 = std::stod(cells[y0_col]);
    const double y1 = std::stod(cells[y1_col]);
    rec.y = y_col >= 0 ? std::stod(cells[y_col]) : (rec.w == 1 ? y1 : y0);
    for (int xc : x_cols) rec.x.push_back(std::stod(cells[xc]));
    all.push_back(std::move(rec));
    y0s.push_back(y0);
    y1s.push_back(y1);
  }
  if (sources < 1 || all.empty()) throw ConfigError("ihdp_load: need sources >= 1 and data");
  const std::size_t per = all.size() / static_cast<std::size_t>(sources);
  if (per == 0) throw ConfigError("ihdp_load: more sources than rows");

  GeneratedData out;
  for (int s = 0; s < sources; ++s) {
    const std::size_t lo = static_cast<std::size_t>(s) * per;
    const std::size_t hi = s == sources - 1 ? static_cast<std::size_t>(sources) * per : lo + per;
    std::vector<Record> part(all.begin() + lo, all.begin() + hi);
    Eigen::VectorXd y0v(hi - lo), y1v(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) {
      y0v(i - lo) = y0s[i];
      y1v(i - lo) = y1s[i];
    }
    out.data.emplace_back(s + 1, std::move(part));
    out.truth.y0.push_back(y0v);
    out.truth.y1.push_back(y1v);
    out.truth.ite.push_back(y1v - y0v);
  }
  finalize_truth(out.truth);
  out.manifest = {{"family", "ihdp"}, {"path", path}, {"sources", sources},
                  {"rows_used", sources * static_cast<int>(per)}};
  return out;
}

GeneratedData generate(const DgpConfig& cfg) {
  if (cfg.family == "fedci_real" || cfg.family == "fedci_binary" || cfg.family == "fedci_count")
    return gen_fedci(cfg);
  if (cfg.family == "causalrff") return gen_causalrff(cfg);
  if (cfg.family == "causalfi") return gen_causalfi(cfg);
  throw ConfigError("unknown dgp family: " + cfg.family);
}

void write_generated(const GeneratedData& gen, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (std::size_t s = 0; s < gen.data.size(); ++s) {
    const SourceDataset& ds = gen.data[s];
    write_csv(ds, dir + "/source_" + std::to_string(ds.source_id()) + ".csv");
    std::ofstream truth(dir + "/source_" + std::to_string(ds.source_id()) + "_truth.csv");
    const bool has_latent = s < gen.truth.latent.size() && gen.truth.latent[s].cols() > 0;
    truth << "y0,y1,ite";
    if (has_latent)
      for (Eigen::Index j = 0; j < gen.truth.latent[s].cols(); ++j) truth << ",latent" << j;
    truth << '\n';
    char buf[96];
    for (Eigen::Index i = 0; i < gen.truth.y0[s].size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g", gen.truth.y0[s](i),
                    gen.truth.y1[s](i), gen.truth.ite[s](i));
      truth << buf;
      if (has_latent)
        for (Eigen::Index j = 0; j < gen.truth.latent[s].cols(); ++j) {
          std::snprintf(buf, sizeof(buf), ",%.17g", gen.truth.latent[s](i, j));
          truth << buf;
        }
      truth << '\n';
    }
  }
  std::ofstream manifest(dir + "/manifest.json");
  manifest << gen.manifest.dump(2) << "\n";
}

GeneratedData read_generated(const std::string& dir) {
  namespace fs = std::filesystem;
  GeneratedData out;
  {
    std::ifstream manifest(dir + "/manifest.json");
    if (manifest) manifest >> out.manifest;
  }
  std::vector<int> ids;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("source_", 0) == 0 && name.find("_truth") == std::string::npos &&
        entry.path().extension() == ".csv") {
      const std::string digits = name.substr(7, name.size() - 7 - 4);
      ids.push_back(std::stoi(digits));
    }
  }
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw ParseError("no source CSVs under " + dir);
  for (int id : ids) {
    out.data.push_back(load_csv(dir + "/source_" + std::to_string(id) + ".csv", CsvSchema(), id));
    const std::string tpath = dir + "/source_" + std::to_string(id) + "_truth.csv";
    std::ifstream truth(tpath);
    if (truth) {
      std::string line;
      std::getline(truth, line);  // header
      int latent_cols = 0;
      for (std::size_t pos = line.find("latent"); pos != std::string::npos;
           pos = line.find("latent", pos + 1))
        ++latent_cols;
      std::vector<double> y0s, y1s, ites;
      std::vector<double> latents;
      while (std::getline(truth, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        y0s.push_back(std::stod(cell));
        std::getline(ss, cell, ',');
        y1s.push_back(std::stod(cell));
        std::getline(ss, cell, ',');
        ites.push_back(std::stod(cell));
        for (int j = 0; j < latent_cols; ++j) {
          std::getline(ss, cell, ',');
          latents.push_back(std::stod(cell));
        }
      }
      out.truth.y0.push_back(Eigen::Map<Eigen::VectorXd>(y0s.data(), y0s.size()));
      out.truth.y1.push_back(Eigen::Map<Eigen::VectorXd>(y1s.data(), y1s.size()));
      out.truth.ite.push_back(Eigen::Map<Eigen::VectorXd>(ites.data(), ites.size()));
      if (latent_cols > 0) {
        Eigen::MatrixXd lat(y0s.size(), latent_cols);
        for (std::size_t i = 0; i < y0s.size(); ++i)
          for (int j = 0; j < latent_cols; ++j) lat(i, j) = latents[i * latent_cols + j];
        out.truth.latent.push_back(lat);
      }
    }
  }
  if (!out.truth.ite.empty()) finalize_truth(out.truth);
  return out;
}

}  // namespace fedcausal
