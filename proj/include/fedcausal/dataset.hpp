#pragma once

// Data model for federated observational data with optional missingness.
// One record is a (w, y, x, u, r) tuple; u entries with r = 0 are undefined
// and are reachable only through the masked accessor.

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "fedcausal/errors.hpp"

namespace fedcausal {

struct Record {
  int w = 0;                  // binary treatment
  double y = 0.0;             // observed outcome
  std::vector<double> x;      // always-observed covariates
  std::vector<double> u_raw;  // partially observed confounders (undefined where r=0)
  std::vector<int> r;         // missingness mask, 1 = observed
  std::string pk;             // optional primary key

  // Masked accessor: the only sanctioned way to read u.
  std::optional<double> u(std::size_t j) const {
    if (j >= r.size()) throw SchemaError("u index out of range");
    if (r[j] == 0) return std::nullopt;
    return u_raw[j];
  }
};

class SourceDataset {
 public:
  SourceDataset() = default;
  SourceDataset(int source_id, std::vector<Record> records);

  int source_id() const { return source_id_; }
  std::size_t size() const { return records_.size(); }
  const Record& record(std::size_t i) const { return records_[i]; }
  const std::vector<Record>& records() const { return records_; }

  std::size_t dim_x() const { return dim_x_; }
  std::size_t dim_u() const { return dim_u_; }
  bool has_missing() const;

  Eigen::MatrixXd x_matrix() const;             // n x d_x
  Eigen::VectorXd y_vector() const;             // n
  Eigen::VectorXd w_vector() const;             // n, entries in {0,1}
  SourceDataset subset(const std::vector<std::size_t>& idx) const;

 private:
  int source_id_ = 0;
  std::size_t dim_x_ = 0;
  std::size_t dim_u_ = 0;
  std::vector<Record> records_;
};

using FederatedDataset = std::vector<SourceDataset>;

// First four moments (mean, variance, skewness, kurtosis), stored as
// consecutive [m, v, s, k] blocks per dimension. Computed from locally
// observed values only.
struct SourceMoments {
  std::vector<double> x_tilde;    // 4 * d_x
  std::vector<double> y0_tilde;   // 4, outcomes observed under w=0
  std::vector<double> y1_tilde;   // 4, outcomes observed under w=1
  std::vector<double> w_tilde;    // 4

  std::vector<double> concatenated() const;  // [y0, y1, x, w] order
};

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  std::vector<std::size_t> validation;
};

struct CsvSchema {
  std::string w = "w";
  std::string y = "y";
  std::string x_prefix = "x";
  std::string u_prefix = "u";
  std::string r_prefix = "r";
  std::string pk = "pk";
};

SourceDataset load_csv(const std::string& path, const CsvSchema& schema = CsvSchema(),
                       int source_id = 0);
void write_csv(const SourceDataset& ds, const std::string& path,
               const CsvSchema& schema = CsvSchema());

SourceMoments compute_moments(const SourceDataset& ds);

// Four standardized sample moments of a plain vector (variance uses the n
// denominator; skewness and kurtosis are 0 by convention when variance is 0).
std::array<double, 4> four_moments(const std::vector<double>& values);

DatasetSplit split(const SourceDataset& ds, double train_frac, double test_frac,
                   double val_frac, std::uint64_t seed, bool shuffled = true);

}  // namespace fedcausal
