#include "fedcausal/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace fedcausal {

PeheResult pehe(const std::vector<double>& true_ite, const std::vector<double>& est_ite) {
  if (true_ite.size() != est_ite.size()) throw SchemaError("pehe: length mismatch");
  if (true_ite.empty()) throw SchemaError("pehe: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < true_ite.size(); ++i) {
    const double d = true_ite[i] - est_ite[i];
    acc += d * d;
  }
  PeheResult out;
  out.pehe = acc / static_cast<double>(true_ite.size());
  out.root_pehe = std::sqrt(out.pehe);
  return out;
}

double ate_error(double true_tau, double est_tau) { return std::abs(true_tau - est_tau); }

PosteriorReport posterior_report(const Eigen::VectorXd& samples, double true_tau, int bins) {
  if (samples.size() < 2) throw SchemaError("posterior_report: need at least 2 samples");
  PosteriorReport out;
  out.mean = samples.mean();
  out.sd = std::sqrt((samples.array() - out.mean).square().sum() /
                     static_cast<double>(samples.size()));
  std::vector<double> sorted(samples.data(), samples.data() + samples.size());
  std::sort(sorted.begin(), sorted.end());
  auto quantile = [&](double q) {
    const double pos = q * (sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
  };
  out.lo95 = quantile(0.025);
  out.hi95 = quantile(0.975);
  out.covered = true_tau >= out.lo95 && true_tau <= out.hi95;

  const double lo = sorted.front(), hi = sorted.back();
  const double width = hi > lo ? (hi - lo) / bins : 1.0;
  std::vector<long> counts(bins, 0);
  for (double v : sorted) {
    int b = width > 0.0 ? static_cast<int>((v - lo) / width) : 0;
    b = std::min(std::max(b, 0), bins - 1);
    ++counts[b];
  }
  for (int b = 0; b < bins; ++b)
    out.histogram.emplace_back(lo + (b + 0.5) * width, counts[b]);
  return out;
}

PosteriorReport posterior_report_moments(double mean, double variance, double true_tau) {
  PosteriorReport out;
  out.mean = mean;
  out.sd = std::sqrt(std::max(variance, 0.0));
  out.lo95 = mean - 1.959963984540054 * out.sd;
  out.hi95 = mean + 1.959963984540054 * out.sd;
  out.covered = true_tau >= out.lo95 && true_tau <= out.hi95;
  return out;
}

std::string MetricReport::to_csv() const {
  std::string out = "cell,source_id,pehe,root_pehe,ate_error\n";
  char buf[256];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%.12g,%.12g,%.12g\n", row.cell.c_str(), row.source_id,
                  row.pehe, row.root_pehe, row.ate_error);
    out += buf;
  }
  return out;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& row : rows)
    rows_json.push_back({{"cell", row.cell},
                         {"source_id", row.source_id},
                         {"pehe", row.pehe},
                         {"root_pehe", row.root_pehe},
                         {"ate_error", row.ate_error}});
  nlohmann::json out = {{"rows", rows_json}};
  if (!posterior.is_null()) out["posterior"] = posterior;
  return out;
}

void write_histogram_csv(const PosteriorReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open " + path);
  out << "bin_center,count\n";
  char buf[96];
  for (const auto& [center, count] : report.histogram) {
    std::snprintf(buf, sizeof(buf), "%.12g,%ld\n", center, count);
    out << buf;
  }
}

}  // namespace fedcausal
