#pragma once

// Ground-truth synthetic data-generating processes at configurable scale,
// with true potential outcomes recorded for evaluation. All generators are
// bit-reproducible per seed; drawn coefficients land in the manifest.

#include <json.hpp>

#include "fedcausal/dataset.hpp"

namespace fedcausal {

struct DgpConfig {
  std::string family = "fedci_real";  // fedci_real|fedci_binary|fedci_count|causalrff|causalfi
  int n_per_source = 1000;
  int sources = 5;
  int d_x = 20;
  int d_u = 10;  // causalfi: partially observed confounder dimensions
  std::uint64_t seed = 1;

  std::string scale_set = "data1";  // fedci: data1 | data2
  double sigma0 = 1.0, sigma1 = 1.0;

  std::vector<double> delta;                              // causalrff per-source shift
  std::vector<double> rho = {.11, .17, .34, .26, .12};    // latent category weights

  // causalfi missing-indicator coefficients: e0 fixed, e1/e2 ~ U[range].
  double missing_e0 = 5.0;
  double missing_e12_lo = -2.0, missing_e12_hi = 0.0;
  std::string outcome_link = "softplus";  // softplus | linear

  void validate() const;
};

struct GroundTruth {
  // Parallel to the federated dataset: one vector per source.
  std::vector<Eigen::VectorXd> y0, y1, ite;
  // Latent state per record: the category index for the latent-confounder
  // process, the pre-masking confounder vector for the incomplete-data one.
  std::vector<Eigen::MatrixXd> latent;
  double tau = 0.0;  // population ATE over the generated sample
};

struct GeneratedData {
  FederatedDataset data;
  GroundTruth truth;
  nlohmann::json manifest;
};

GeneratedData gen_fedci(const DgpConfig& cfg);
GeneratedData gen_causalrff(const DgpConfig& cfg);
GeneratedData gen_causalfi(const DgpConfig& cfg);

// Loads a pre-simulated replicate CSV carrying y0/y1 columns and splits it
// into equal sources.
GeneratedData ihdp_load(const std::string& path, int sources);

GeneratedData generate(const DgpConfig& cfg);

// File layout helpers shared by the CLI and tests.
void write_generated(const GeneratedData& gen, const std::string& dir);
GeneratedData read_generated(const std::string& dir);

}  // namespace fedcausal
