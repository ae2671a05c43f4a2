#include "fedcausal/mh.hpp"

#include <cmath>

#include "fedcausal/errors.hpp"

namespace fedcausal {

MhResult mh_independent(const std::function<double(const Eigen::VectorXd&)>& target_logpdf,
                        const std::function<Eigen::VectorXd(Rng&)>& proposal_sample,
                        const std::function<double(const Eigen::VectorXd&)>& proposal_logpdf,
                        int n_samples, int burn_in, std::uint64_t seed, int max_init_retries) {
  if (n_samples < 1) throw ConfigError("mh_independent: need at least one sample");
  Rng rng(seed);

  Eigen::VectorXd state;
  double state_target = -std::numeric_limits<double>::infinity();
  double state_prop = 0.0;
  int tries = 0;
  while (!std::isfinite(state_target)) {
    if (++tries > max_init_retries)
      throw NumericalError("mh_independent: no finite-density initial proposal after " +
                           std::to_string(max_init_retries) + " tries");
    state = proposal_sample(rng);
    state_target = target_logpdf(state);
    state_prop = proposal_logpdf(state);
  }

  MhResult out;
  out.samples.resize(n_samples, state.size());
  long accepted = 0, proposed = 0;
  const int total = burn_in + n_samples;
  for (int t = 0; t < total; ++t) {
    const Eigen::VectorXd cand = proposal_sample(rng);
    const double cand_target = target_logpdf(cand);
    const double cand_prop = proposal_logpdf(cand);
    // alpha = min(1, [pi(z') q(z)] / [pi(z) q(z')])
    const double log_alpha = (cand_target - state_target) + (state_prop - cand_prop);
    ++proposed;
    if (log_alpha >= 0.0 || std::log(rng.uniform()) < log_alpha) {
      state = cand;
      state_target = cand_target;
      state_prop = cand_prop;
      ++accepted;
    }
    if (t >= burn_in) out.samples.row(t - burn_in) = state;
  }
  out.acceptance_rate = static_cast<double>(accepted) / static_cast<double>(proposed);
  return out;
}

}  // namespace fedcausal
