#pragma once

// Evaluation metrics and posterior summaries.

#include <Eigen/Dense>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedcausal/errors.hpp"

namespace fedcausal {

struct PeheResult {
  double pehe = 0.0;
  double root_pehe = 0.0;
};

// Mean squared ITE error over all records (denominator = total count).
PeheResult pehe(const std::vector<double>& true_ite, const std::vector<double>& est_ite);

double ate_error(double true_tau, double est_tau);

struct PosteriorReport {
  double mean = 0.0;
  double sd = 0.0;
  double lo95 = 0.0, hi95 = 0.0;
  bool covered = false;  // true tau inside the central 95% interval
  std::vector<std::pair<double, long>> histogram;  // (bin center, count)
};

PosteriorReport posterior_report(const Eigen::VectorXd& samples, double true_tau, int bins = 30);
// Gaussian summary from a (mean, variance) pair.
PosteriorReport posterior_report_moments(double mean, double variance, double true_tau);

struct MetricRow {
  std::string cell;  // experiment-cell label
  int source_id = -1;  // -1: pooled
  double pehe = 0.0, root_pehe = 0.0, ate_error = 0.0;
};

struct MetricReport {
  std::vector<MetricRow> rows;
  nlohmann::json posterior;  // optional posterior-ATE summary

  std::string to_csv() const;
  nlohmann::json to_json() const;
};

void write_histogram_csv(const PosteriorReport& report, const std::string& path);

}  // namespace fedcausal
