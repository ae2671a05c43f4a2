#pragma once

// Coordinator/worker runtime: synchronous full-participation rounds of
// broadcast -> local gradient -> sum -> update, plus the hash-based dedup
// preprocessing protocol.

#include <memory>
#include <optional>

#include "fedcausal/dataset.hpp"
#include "fedcausal/messages.hpp"
#include "fedcausal/params.hpp"
#include "fedcausal/transport.hpp"

namespace fedcausal {

struct TrainConfig {
  int max_rounds = 200;
  double learning_rate = 0.05;
  double tolerance = 1e-6;   // stop when |delta sum J| stays below this
  int tolerance_window = 5;  // ... over this many consecutive rounds
  enum class Optimizer { Sgd, Adam } optimizer = Optimizer::Adam;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  std::uint64_t master_seed = 1;
  int worker_timeout_ms = 600000;
  // Dedup preprocessing before training (requires pk columns).
  bool dedup = false;
  int dedup_keep_limit = 1;
  std::string dedup_salt = "fedcausal";

  void validate() const {
    if (max_rounds < 1) throw ConfigError("max_rounds must be >= 1");
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
    if (tolerance_window < 1) throw ConfigError("tolerance_window must be >= 1");
  }
};

struct RoundLogEntry {
  int round = 0;
  double objective_sum = 0.0;
};

struct TrainResult {
  ParameterVector params;
  std::vector<RoundLogEntry> log;
  int rounds_run = 0;
};

// Exact per-segment sum; order-invariant; rejects duplicate sources and
// mismatched rounds or layouts.
ParameterVector aggregate(const std::vector<GradientMessage>& messages);

// Coordinator side of one full training run over already-connected worker
// channels (one per source, HELLO not yet consumed).
TrainResult coordinate_training(const TrainConfig& cfg, const FederatedObjective& objective,
                                std::vector<Channel*> workers);

// Worker side: announce the shard, serve dedup and gradient requests until STOP.
void run_worker(const TrainConfig& cfg, Channel& channel, const FederatedObjective& objective,
                SourceDataset shard);

// In-process convenience: spawns one worker thread per shard and coordinates
// over in-memory channels carrying the same encoded frames as the sockets.
TrainResult run_training(const TrainConfig& cfg, const FederatedObjective& objective,
                         const FederatedDataset& shards);

// --- dedup preprocessing -----------------------------------------------

// 32-byte one-way digest of (salt || key), hex-encoded.
std::string key_digest(const std::string& salt, const std::string& key);

std::vector<std::string> shard_digests(const SourceDataset& shard, const std::string& salt);

// For each digest appearing in more than keep_limit sources, picks keep_limit
// holders uniformly at random (seeded) and returns per-source record-index
// drop lists for the rest.
std::map<int, std::vector<int>> dedup_decide(
    const std::map<int, std::vector<std::string>>& per_source_digests, int keep_limit,
    std::uint64_t seed);

}  // namespace fedcausal
