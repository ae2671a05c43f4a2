#include "fedcausal/kernels.hpp"

#include <cmath>
#include <cstring>

#include "fedcausal/rng.hpp"

namespace fedcausal {

KernelFamily kernel_family_from_string(const std::string& name) {
  if (name == "gaussian") return KernelFamily::Gaussian;
  if (name == "laplacian") return KernelFamily::Laplacian;
  if (name == "matern") return KernelFamily::Matern;
  throw ConfigError("unsupported kernel family: " + name);
}

std::string to_string(KernelFamily family) {
  switch (family) {
    case KernelFamily::Gaussian: return "gaussian";
    case KernelFamily::Laplacian: return "laplacian";
    case KernelFamily::Matern: return "matern";
  }
  return "?";
}

double kernel_eval(const KernelSpec& spec, const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  spec.validate();
  if (a.size() != b.size()) throw SchemaError("kernel_eval: dimension mismatch");
  const double ell = spec.lengthscale;
  switch (spec.family) {
    case KernelFamily::Gaussian: {
      const double d2 = (a - b).squaredNorm();
      return std::exp(-d2 / (2.0 * ell * ell));
    }
    case KernelFamily::Laplacian: {
      const double d1 = (a - b).lpNorm<1>();
      return std::exp(-d1 / ell);
    }
    case KernelFamily::Matern: {
      const double d = (a - b).norm();
      if (d == 0.0) return 1.0;
      const double nu = spec.matern_nu;
      const double t = std::sqrt(2.0 * nu) * d / ell;
      return std::pow(2.0, 1.0 - nu) / std::tgamma(nu) * std::pow(t, nu) * std::cyl_bessel_k(nu, t);
    }
  }
  throw ConfigError("unsupported kernel family");
}

Eigen::VectorXd RffMap::features(const Eigen::VectorXd& u) const {
  if (u.size() != freqs_.cols()) throw SchemaError("rff_features: dimension mismatch");
  const Eigen::Index b_count = freqs_.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(b_count));
  const Eigen::VectorXd proj = freqs_ * u;
  Eigen::VectorXd out(2 * b_count);
  out.head(b_count) = proj.array().cos() * scale;
  out.tail(b_count) = proj.array().sin() * scale;
  return out;
}

std::vector<std::uint8_t> RffMap::serialize() const {
  const std::uint32_t dim = static_cast<std::uint32_t>(freqs_.cols());
  const std::uint32_t b_count = static_cast<std::uint32_t>(freqs_.rows());
  std::vector<std::uint8_t> out(8 + sizeof(double) * dim * b_count);
  auto put_u32 = [&](std::size_t at, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out[at + i] = static_cast<std::uint8_t>((v >> (8 * i)) & 0xff);
  };
  put_u32(0, dim);
  put_u32(4, b_count);
  std::size_t pos = 8;
  for (std::uint32_t r = 0; r < b_count; ++r)
    for (std::uint32_t c = 0; c < dim; ++c) {
      const double v = freqs_(r, c);
      std::memcpy(out.data() + pos, &v, sizeof(double));
      pos += sizeof(double);
    }
  return out;
}

RffMap RffMap::deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) throw ProtocolError("rff frame too short");
  auto get_u32 = [&](std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[at + i]) << (8 * i);
    return v;
  };
  const std::uint32_t dim = get_u32(0);
  const std::uint32_t b_count = get_u32(4);
  if (bytes.size() != 8 + sizeof(double) * dim * b_count)
    throw ProtocolError("rff frame size mismatch");
  Eigen::MatrixXd freqs(b_count, dim);
  std::size_t pos = 8;
  for (std::uint32_t r = 0; r < b_count; ++r)
    for (std::uint32_t c = 0; c < dim; ++c) {
      double v;
      std::memcpy(&v, bytes.data() + pos, sizeof(double));
      freqs(r, c) = v;
      pos += sizeof(double);
    }
  return RffMap(freqs);
}

RffMap spectral_sample(const KernelSpec& spec, int dim, int feature_count, std::uint64_t seed) {
  spec.validate();
  if (feature_count < 1) throw ConfigError("spectral_sample: feature count must be >= 1");
  if (dim < 1) throw ConfigError("spectral_sample: dimension must be >= 1");
  Rng rng(seed);
  Eigen::MatrixXd freqs(feature_count, dim);
  const double ell = spec.lengthscale;
  switch (spec.family) {
    case KernelFamily::Gaussian:
      for (int b = 0; b < feature_count; ++b)
        for (int j = 0; j < dim; ++j) freqs(b, j) = rng.normal(0.0, 1.0 / ell);
      break;
    case KernelFamily::Laplacian:
      for (int b = 0; b < feature_count; ++b)
        for (int j = 0; j < dim; ++j) freqs(b, j) = rng.cauchy(1.0 / ell);
      break;
    case KernelFamily::Matern: {
      // omega = z / (ell * sqrt(g)) with g ~ Gamma(nu, rate nu) gives a
      // multivariate-t spectral draw with 2*nu degrees of freedom, the
      // Fourier pair of the Matern kernel above.
      const double nu = spec.matern_nu;
      for (int b = 0; b < feature_count; ++b) {
        const double g = rng.gamma(nu, nu);
        const double s = 1.0 / (ell * std::sqrt(g));
        for (int j = 0; j < dim; ++j) freqs(b, j) = s * rng.normal();
      }
      break;
    }
  }
  return RffMap(freqs);
}

TransferMatrix::TransferMatrix(Eigen::MatrixXd coef) : coef_(std::move(coef)) {
  if (coef_.rows() != coef_.cols()) throw ConfigError("transfer matrix must be square");
  for (int i = 0; i < coef_.rows(); ++i) {
    if (coef_(i, i) != 1.0) throw ConfigError("transfer matrix diagonal must be 1");
    for (int j = 0; j < coef_.cols(); ++j)
      if (coef_(i, j) < 0.0 || coef_(i, j) > 1.0)
        throw ConfigError("transfer coefficients must lie in [0,1]");
  }
}

void TransferMatrix::set(int s, int v, double value) {
  if (s == v) throw ConfigError("transfer diagonal is fixed at 1");
  if (value < 0.0 || value > 1.0) throw ConfigError("transfer coefficient out of [0,1]");
  coef_(s, v) = value;
}

double adaptive_kernel(const KernelSpec& base, const TransferMatrix& transfer, int s, int v,
                       const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  if (s < 0 || v < 0 || s >= transfer.sources() || v >= transfer.sources())
    throw ConfigError("adaptive_kernel: source id out of range");
  const double k = kernel_eval(base, a, b);
  return s == v ? k : transfer(s, v) * k;
}

Eigen::MatrixXd cholesky(const Eigen::MatrixXd& a) {
  if (a.rows() != a.cols()) throw SchemaError("cholesky: matrix must be square");
  const double mean_diag = a.diagonal().mean();
  const double base = mean_diag > 0.0 ? mean_diag : 1.0;
  for (double jitter : {0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2}) {
    Eigen::MatrixXd shifted = a;
    shifted.diagonal().array() += jitter * base;
    Eigen::LLT<Eigen::MatrixXd> llt(shifted);
    if (llt.info() == Eigen::Success) return llt.matrixL();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a, Eigen::EigenvaluesOnly);
  throw NumericalError("cholesky failed beyond jitter budget; smallest eigenvalue estimate " +
                       std::to_string(es.eigenvalues().minCoeff()));
}

Eigen::MatrixXd kronecker(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

}  // namespace fedcausal
