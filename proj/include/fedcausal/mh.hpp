#pragma once

// Metropolis-Hastings with an independent proposal: the proposal does not
// depend on the current state, acceptance uses the exact unnormalized target.

#include <Eigen/Dense>
#include <functional>

#include "fedcausal/rng.hpp"

namespace fedcausal {

struct MhResult {
  Eigen::MatrixXd samples;  // n_samples x dim, post burn-in
  double acceptance_rate = 0.0;
};

MhResult mh_independent(const std::function<double(const Eigen::VectorXd&)>& target_logpdf,
                        const std::function<Eigen::VectorXd(Rng&)>& proposal_sample,
                        const std::function<double(const Eigen::VectorXd&)>& proposal_logpdf,
                        int n_samples, int burn_in, std::uint64_t seed,
                        int max_init_retries = 100);

}  // namespace fedcausal
