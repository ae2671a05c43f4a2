#pragma once

// Named, segmented model parameters shared by the coordinator and workers.
// Fixed (non-trainable) segments carry run context that must be identical on
// every machine: RFF frequency tables, per-source moment summaries, counts.

#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "fedcausal/errors.hpp"

namespace fedcausal {

struct ParamSegment {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;
  std::string partition = "global";  // "global" or "per-source:<s>"
  bool trainable = true;

  std::size_t size() const { return values.size(); }
};

class ParameterVector {
 public:
  void add(ParamSegment seg) {
    if (index_.count(seg.name)) throw SchemaError("duplicate segment name: " + seg.name);
    std::size_t expect = 1;
    for (int d : seg.shape) expect *= static_cast<std::size_t>(d);
    if (expect != seg.values.size())
      throw SchemaError("segment " + seg.name + ": shape does not match value count");
    index_[seg.name] = segments_.size();
    segments_.push_back(std::move(seg));
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  const ParamSegment& segment(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw SchemaError("unknown segment: " + name);
    return segments_[it->second];
  }

  ParamSegment& segment(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw SchemaError("unknown segment: " + name);
    return segments_[it->second];
  }

  const std::vector<ParamSegment>& segments() const { return segments_; }
  std::vector<ParamSegment>& segments() { return segments_; }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& s : segments_) n += s.size();
    return n;
  }

  std::size_t trainable_size() const {
    std::size_t n = 0;
    for (const auto& s : segments_)
      if (s.trainable) n += s.size();
    return n;
  }

  // A gradient vector aligned with this parameter vector: same segments and
  // shapes, zero values, fixed segments marked non-trainable.
  ParameterVector zeros_like() const {
    ParameterVector out;
    for (const auto& s : segments_) {
      ParamSegment g = s;
      g.values.assign(g.values.size(), 0.0);
      out.add(std::move(g));
    }
    return out;
  }

  bool same_layout(const ParameterVector& other) const {
    if (segments_.size() != other.segments_.size()) return false;
    for (std::size_t i = 0; i < segments_.size(); ++i) {
      if (segments_[i].name != other.segments_[i].name) return false;
      if (segments_[i].shape != other.segments_[i].shape) return false;
    }
    return true;
  }

  void accumulate(const ParameterVector& other) {
    if (!same_layout(other)) throw ProtocolError("parameter layout mismatch in accumulate");
    for (std::size_t i = 0; i < segments_.size(); ++i)
      for (std::size_t k = 0; k < segments_[i].values.size(); ++k)
        segments_[i].values[k] += other.segments_[i].values[k];
  }

  std::vector<double> flatten_trainable() const {
    std::vector<double> out;
    out.reserve(trainable_size());
    for (const auto& s : segments_)
      if (s.trainable) out.insert(out.end(), s.values.begin(), s.values.end());
    return out;
  }

  void assign_trainable(const std::vector<double>& flat) {
    std::size_t p = 0;
    for (auto& s : segments_) {
      if (!s.trainable) continue;
      for (auto& v : s.values) v = flat.at(p++);
    }
    if (p != flat.size()) throw SchemaError("assign_trainable: size mismatch");
  }

 private:
  std::vector<ParamSegment> segments_;
  std::map<std::string, std::size_t> index_;
};

// Per-round, per-source payload: gradients aligned to the broadcast
// parameters plus the local objective value. Never carries record-level data.
struct GradientMessage {
  int round = 0;
  int source_id = 0;
  ParameterVector gradient;
  double objective = 0.0;
};

struct EvalResult {
  double objective = 0.0;
  ParameterVector gradient;
};

// Summary a worker announces at registration time: counts and moment
// statistics only, never records.
struct SourceInfo {
  int source_id = 0;
  int n_records = 0;
  int dim_x = 0;
  int dim_u = 0;
  std::vector<double> moments;  // concatenated [y0,y1,x,w] four-moment blocks
};

class SourceDataset;

// One federated estimator: a coordinator-side parameter initializer plus a
// pure per-source (value, gradient) evaluation run by workers.
class FederatedObjective {
 public:
  virtual ~FederatedObjective() = default;
  virtual std::string name() const = 0;
  // +1: objective is maximized (gradient ascent), -1: minimized.
  virtual int direction() const = 0;
  virtual ParameterVector initial_params(const std::vector<SourceInfo>& sources,
                                         std::uint64_t seed) const = 0;
  virtual EvalResult eval(const ParameterVector& theta, const SourceDataset& shard,
                          std::uint64_t round_seed) const = 0;
};

}  // namespace fedcausal
