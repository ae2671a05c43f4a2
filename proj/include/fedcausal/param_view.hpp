#pragma once

// Bridges a ParameterVector onto the active autodiff tape: trainable segments
// become leaf Vars, fixed segments stay constants, and gradients collect back
// into an aligned ParameterVector.

#include <map>

#include "fedcausal/autodiff.hpp"
#include "fedcausal/params.hpp"

namespace fedcausal {

class VarView {
 public:
  explicit VarView(const ParameterVector& theta) : theta_(&theta) {
    for (const auto& seg : theta.segments()) {
      std::vector<ad::Var> vars;
      vars.reserve(seg.values.size());
      for (double v : seg.values)
        vars.push_back(seg.trainable ? ad::Var::leaf(v) : ad::Var(v));
      vars_.emplace(seg.name, std::move(vars));
    }
  }

  const std::vector<ad::Var>& operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw SchemaError("VarView: unknown segment " + name);
    return it->second;
  }

  ad::Var scalar(const std::string& name, std::size_t i = 0) const { return (*this)[name].at(i); }

  ParameterVector collect_gradient(const ad::Tape& tape) const {
    ParameterVector grad = theta_->zeros_like();
    for (auto& seg : grad.segments()) {
      if (!seg.trainable) continue;
      const auto& vars = vars_.at(seg.name);
      for (std::size_t i = 0; i < vars.size(); ++i) seg.values[i] = tape.grad(vars[i].idx);
    }
    return grad;
  }

 private:
  const ParameterVector* theta_;
  std::map<std::string, std::vector<ad::Var>> vars_;
};

}  // namespace fedcausal
