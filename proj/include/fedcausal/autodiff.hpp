#pragma once

// Reverse-mode automatic differentiation on a linearized tape (Wengert list).
// Each node stores at most two parents with local derivative weights frozen at
// forward time; matrix-heavy computations (e.g. Gaussian log-densities with a
// Cholesky solve inside) register a single custom node carrying its own
// backward closure, which keeps tapes small for the GP objectives.

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

namespace fedcausal::ad {

struct Node {
  std::int32_t pa;
  std::int32_t pb;  // -1: unary, -2: leaf, -3: custom (pa = custom index)
  double wa;
  double wb;
};

class Tape {
 public:
  struct CustomOp {
    std::vector<std::int32_t> parents;
    std::function<void(double, double*)> backward;  // (upstream grad, per-parent grads out)
    mutable std::vector<double> scratch;
  };

  void clear() {
    nodes_.clear();
    vals_.clear();
    grads_.clear();
    customs_.clear();
  }

  std::size_t size() const { return nodes_.size(); }
  void reserve(std::size_t n) {
    nodes_.reserve(n);
    vals_.reserve(n);
  }

  std::int32_t leaf(double v) {
    nodes_.push_back({-1, -2, 0.0, 0.0});
    vals_.push_back(v);
    return static_cast<std::int32_t>(nodes_.size() - 1);
  }

  std::int32_t unary(std::int32_t a, double w, double v) {
    nodes_.push_back({a, -1, w, 0.0});
    vals_.push_back(v);
    return static_cast<std::int32_t>(nodes_.size() - 1);
  }

  std::int32_t binary(std::int32_t a, std::int32_t b, double wa, double wb, double v) {
    nodes_.push_back({a, b, wa, wb});
    vals_.push_back(v);
    return static_cast<std::int32_t>(nodes_.size() - 1);
  }

  std::int32_t custom(std::vector<std::int32_t> parents, double v,
                      std::function<void(double, double*)> backward) {
    customs_.push_back(CustomOp{std::move(parents), std::move(backward), {}});
    nodes_.push_back({static_cast<std::int32_t>(customs_.size() - 1), -3, 0.0, 0.0});
    vals_.push_back(v);
    return static_cast<std::int32_t>(nodes_.size() - 1);
  }

  double value(std::int32_t idx) const { return vals_[idx]; }

  void backward(std::int32_t root) {
    grads_.assign(nodes_.size(), 0.0);
    grads_[root] = 1.0;
    for (std::int32_t i = static_cast<std::int32_t>(nodes_.size()) - 1; i >= 0; --i) {
      const double g = grads_[i];
      if (g == 0.0) continue;
      const Node& n = nodes_[i];
      if (n.pb == -2) continue;  // leaf
      if (n.pb == -3) {
        const CustomOp& op = customs_[n.pa];
        op.scratch.assign(op.parents.size(), 0.0);
        op.backward(g, op.scratch.data());
        for (std::size_t k = 0; k < op.parents.size(); ++k) grads_[op.parents[k]] += op.scratch[k];
        continue;
      }
      grads_[n.pa] += n.wa * g;
      if (n.pb >= 0) grads_[n.pb] += n.wb * g;
    }
  }

  double grad(std::int32_t idx) const { return grads_[idx]; }

 private:
  std::vector<Node> nodes_;
  std::vector<double> vals_;
  std::vector<double> grads_;
  std::vector<CustomOp> customs_;
};

Tape*& current_tape();

struct ScopedTape {
  explicit ScopedTape(Tape& t) : prev(current_tape()) { current_tape() = &t; }
  ~ScopedTape() { current_tape() = prev; }
  Tape* prev;
};

// A value that may or may not be tracked on the current tape (idx < 0 means a
// plain constant). Arithmetic mirrors double semantics.
struct Var {
  double v = 0.0;
  std::int32_t idx = -1;

  Var() = default;
  Var(double value) : v(value), idx(-1) {}  // NOLINT: implicit by design
  Var(double value, std::int32_t i) : v(value), idx(i) {}

  static Var leaf(double value) { return Var(value, current_tape()->leaf(value)); }
  bool tracked() const { return idx >= 0; }
};

inline double value(const Var& x) { return x.v; }
inline double value(double x) { return x; }

inline Var operator+(const Var& a, const Var& b) {
  const double v = a.v + b.v;
  if (a.tracked() && b.tracked()) return Var(v, current_tape()->binary(a.idx, b.idx, 1.0, 1.0, v));
  if (a.tracked()) return Var(v, current_tape()->unary(a.idx, 1.0, v));
  if (b.tracked()) return Var(v, current_tape()->unary(b.idx, 1.0, v));
  return Var(v);
}

inline Var operator-(const Var& a, const Var& b) {
  const double v = a.v - b.v;
  if (a.tracked() && b.tracked()) return Var(v, current_tape()->binary(a.idx, b.idx, 1.0, -1.0, v));
  if (a.tracked()) return Var(v, current_tape()->unary(a.idx, 1.0, v));
  if (b.tracked()) return Var(v, current_tape()->unary(b.idx, -1.0, v));
  return Var(v);
}

inline Var operator*(const Var& a, const Var& b) {
  const double v = a.v * b.v;
  if (a.tracked() && b.tracked()) return Var(v, current_tape()->binary(a.idx, b.idx, b.v, a.v, v));
  if (a.tracked()) return Var(v, current_tape()->unary(a.idx, b.v, v));
  if (b.tracked()) return Var(v, current_tape()->unary(b.idx, a.v, v));
  return Var(v);
}

inline Var operator/(const Var& a, const Var& b) {
  const double v = a.v / b.v;
  if (a.tracked() && b.tracked())
    return Var(v, current_tape()->binary(a.idx, b.idx, 1.0 / b.v, -v / b.v, v));
  if (a.tracked()) return Var(v, current_tape()->unary(a.idx, 1.0 / b.v, v));
  if (b.tracked()) return Var(v, current_tape()->unary(b.idx, -v / b.v, v));
  return Var(v);
}

inline Var operator-(const Var& a) {
  if (!a.tracked()) return Var(-a.v);
  return Var(-a.v, current_tape()->unary(a.idx, -1.0, -a.v));
}

inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }
inline Var& operator/=(Var& a, const Var& b) { return a = a / b; }

inline bool operator<(const Var& a, const Var& b) { return a.v < b.v; }
inline bool operator>(const Var& a, const Var& b) { return a.v > b.v; }

inline Var unary_fn(const Var& a, double v, double dv) {
  if (!a.tracked()) return Var(v);
  return Var(v, current_tape()->unary(a.idx, dv, v));
}

inline Var exp(const Var& a) {
  const double v = std::exp(a.v);
  return unary_fn(a, v, v);
}
inline Var log(const Var& a) { return unary_fn(a, std::log(a.v), 1.0 / a.v); }
inline Var sqrt(const Var& a) {
  const double v = std::sqrt(a.v);
  return unary_fn(a, v, 0.5 / v);
}
inline Var cos(const Var& a) { return unary_fn(a, std::cos(a.v), -std::sin(a.v)); }
inline Var sin(const Var& a) { return unary_fn(a, std::sin(a.v), std::cos(a.v)); }
inline Var tanh(const Var& a) {
  const double t = std::tanh(a.v);
  return unary_fn(a, t, 1.0 - t * t);
}
inline Var pow(const Var& a, double p) {
  const double v = std::pow(a.v, p);
  return unary_fn(a, v, p * std::pow(a.v, p - 1.0));
}

inline double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }
inline Var sigmoid(const Var& a) {
  const double s = sigmoid(a.v);
  return unary_fn(a, s, s * (1.0 - s));
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline Var softplus(const Var& a) {
  const double v = a.v > 30.0 ? a.v : std::log1p(std::exp(a.v));
  return unary_fn(a, v, sigmoid(a.v));
}

// log(1 + e^x) evaluated stably; used by Bernoulli log-likelihoods.
inline double log1p_exp(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline Var log1p_exp(const Var& a) {
  const double v = log1p_exp(a.v);
  return unary_fn(a, v, sigmoid(a.v));
}

inline double elu(double x) { return x >= 0.0 ? x : std::expm1(x); }
inline Var elu(const Var& a) {
  if (a.v >= 0.0) return unary_fn(a, a.v, 1.0);
  const double e = std::expm1(a.v);
  return unary_fn(a, e, e + 1.0);
}

double digamma(double x);
double trigamma(double x);

inline Var lgamma(const Var& a) { return unary_fn(a, std::lgamma(a.v), digamma(a.v)); }
inline Var digamma(const Var& a) { return unary_fn(a, digamma(a.v), trigamma(a.v)); }

inline Var square(const Var& a) { return a * a; }
inline double square(double a) { return a * a; }

using VarVec = std::vector<Var>;

}  // namespace fedcausal::ad
