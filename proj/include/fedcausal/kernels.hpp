#pragma once

// Kernel evaluation, spectral sampling for Random Fourier Features, adaptive
// (transfer) kernels, and the dense linear-algebra helpers shared by the
// estimators.

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "fedcausal/errors.hpp"

namespace fedcausal {

enum class KernelFamily { Gaussian, Laplacian, Matern };

KernelFamily kernel_family_from_string(const std::string& name);
std::string to_string(KernelFamily family);

struct KernelSpec {
  KernelFamily family = KernelFamily::Gaussian;
  double lengthscale = 1.0;
  double matern_nu = 1.5;  // used by Matern only

  void validate() const {
    if (lengthscale <= 0.0) throw ConfigError("kernel lengthscale must be positive");
    if (family == KernelFamily::Matern && matern_nu <= 0.0)
      throw ConfigError("matern smoothness must be positive");
  }
};

double kernel_eval(const KernelSpec& spec, const Eigen::VectorXd& a, const Eigen::VectorXd& b);

// Frozen random-frequency feature map. Frequencies are sampled once by the
// coordinator and shared verbatim by every source for the whole run.
class RffMap {
 public:
  RffMap() = default;
  explicit RffMap(Eigen::MatrixXd frequencies) : freqs_(std::move(frequencies)) {}

  Eigen::Index feature_count() const { return freqs_.rows(); }     // B
  Eigen::Index input_dim() const { return freqs_.cols(); }
  const Eigen::MatrixXd& frequencies() const { return freqs_; }

  // phi(u) = B^{-1/2} [cos(w_b.u)..., sin(w_b.u)...], length 2B.
  Eigen::VectorXd features(const Eigen::VectorXd& u) const;

  // Binary frame: dim (u32 LE), B (u32 LE), then row-major little-endian f64.
  std::vector<std::uint8_t> serialize() const;
  static RffMap deserialize(const std::vector<std::uint8_t>& bytes);

 private:
  Eigen::MatrixXd freqs_;  // B x dim
};

RffMap spectral_sample(const KernelSpec& spec, int dim, int feature_count, std::uint64_t seed);

// m x m matrix of transfer coefficients in [0,1] with unit diagonal.
class TransferMatrix {
 public:
  explicit TransferMatrix(int m) : coef_(Eigen::MatrixXd::Identity(m, m)) {}
  explicit TransferMatrix(Eigen::MatrixXd coef);

  int sources() const { return static_cast<int>(coef_.rows()); }
  double operator()(int s, int v) const { return coef_(s, v); }
  void set(int s, int v, double value);
  const Eigen::MatrixXd& matrix() const { return coef_; }

 private:
  Eigen::MatrixXd coef_;
};

double adaptive_kernel(const KernelSpec& base, const TransferMatrix& transfer, int s, int v,
                       const Eigen::VectorXd& a, const Eigen::VectorXd& b);

// Lower Cholesky factor with an escalating jitter policy: first attempt the
// matrix as-is, then add 1e-6 * mean(diag) to the diagonal, escalating by
// factors of 10 up to 1e-2 * mean(diag) before failing.
Eigen::MatrixXd cholesky(const Eigen::MatrixXd& a);

Eigen::MatrixXd kronecker(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

// Generic feature computation usable with autodiff scalars. `u` must have
// map.input_dim() entries; output has 2B entries (cos block then sin block).
template <typename Scalar, typename Input>
std::vector<Scalar> rff_features_generic(const RffMap& map, const Input& u) {
  const Eigen::Index b_count = map.feature_count();
  const Eigen::Index dim = map.input_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(b_count));
  std::vector<Scalar> out(2 * b_count);
  const Eigen::MatrixXd& freqs = map.frequencies();
  for (Eigen::Index b = 0; b < b_count; ++b) {
    Scalar dot = u[0] * freqs(b, 0);
    for (Eigen::Index j = 1; j < dim; ++j) dot += u[j] * freqs(b, j);
    using std::cos;
    using std::sin;
    out[b] = cos(dot) * scale;
    out[b + b_count] = sin(dot) * scale;
  }
  return out;
}

}  // namespace fedcausal
