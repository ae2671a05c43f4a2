#include "fedcausal/federation.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "fedcausal/rng.hpp"

namespace fedcausal {

namespace {

constexpr std::uint64_t kRoundSeedTag = 0x5eed;

std::uint64_t round_seed_for(std::uint64_t master_seed, int round) {
  return derive_seed(master_seed, {kRoundSeedTag, static_cast<std::uint64_t>(round)});
}

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, int direction, std::size_t n)
      : cfg_(cfg), direction_(direction), m_(n, 0.0), v_(n, 0.0) {}

  // theta <- theta + learning_rate * direction * grad (plain step), or the
  // adaptive-moment variant of the same ascent/descent direction.
  void step(std::vector<double>& theta, const std::vector<double>& grad) {
    ++t_;
    if (cfg_.optimizer == TrainConfig::Optimizer::Sgd) {
      for (std::size_t i = 0; i < theta.size(); ++i)
        theta[i] += cfg_.learning_rate * direction_ * grad[i];
      return;
    }
    const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, t_);
    const double bc2 = 1.0 - std::pow(b2, t_);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = direction_ * grad[i];
      m_[i] = b1 * m_[i] + (1.0 - b1) * g;
      v_[i] = b2 * v_[i] + (1.0 - b2) * g * g;
      theta[i] += cfg_.learning_rate * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + cfg_.adam_eps);
    }
  }

 private:
  const TrainConfig& cfg_;
  int direction_;
  int t_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace

ParameterVector aggregate(const std::vector<GradientMessage>& messages) {
  if (messages.empty()) throw ProtocolError("aggregate: no gradient messages");
  std::vector<const GradientMessage*> ordered;
  for (const auto& m : messages) ordered.push_back(&m);
  std::sort(ordered.begin(), ordered.end(),
            [](const GradientMessage* a, const GradientMessage* b) {
              return a->source_id < b->source_id;
            });
  for (std::size_t i = 1; i < ordered.size(); ++i) {
    if (ordered[i]->source_id == ordered[i - 1]->source_id)
      throw ProtocolError("aggregate: duplicate source id " +
                          std::to_string(ordered[i]->source_id) + " in one round");
    if (ordered[i]->round != ordered[0]->round)
      throw ProtocolError("aggregate: mixed round indices");
  }
  ParameterVector total = ordered[0]->gradient.zeros_like();
  for (const GradientMessage* m : ordered) {
    if (!total.same_layout(m->gradient)) throw ProtocolError("aggregate: segment shape mismatch");
    total.accumulate(m->gradient);
  }
  return total;
}

TrainResult coordinate_training(const TrainConfig& cfg, const FederatedObjective& objective,
                                std::vector<Channel*> workers) {
  cfg.validate();
  const int m = static_cast<int>(workers.size());
  if (m < 1) throw ConfigError("coordinate_training: no workers");
  for (Channel* c : workers) c->set_timeout_ms(cfg.worker_timeout_ms);

  // Registration. Sources are ordered by id so initialization does not depend
  // on connection order.
  std::vector<SourceInfo> infos;
  std::map<int, Channel*> by_id;
  for (Channel* c : workers) {
    const nlohmann::json msg = c->recv();
    if (kind_of(msg) != "HELLO") throw ProtocolError("expected HELLO, got " + kind_of(msg));
    const HelloMsg hello = hello_from_json(msg);
    if (hello.version != kProtocolVersion) {
      c->send(stop_message());
      throw ProtocolError("protocol version mismatch from source " +
                          std::to_string(hello.source_id));
    }
    if (by_id.count(hello.source_id)) {
      c->send(stop_message());
      throw ProtocolError("duplicate HELLO for source id " + std::to_string(hello.source_id));
    }
    by_id[hello.source_id] = c;
    infos.push_back(hello.info);
  }
  std::sort(infos.begin(), infos.end(),
            [](const SourceInfo& a, const SourceInfo& b) { return a.source_id < b.source_id; });

  // Optional dedup pass: digests in, drop lists out; only hashes travel.
  if (cfg.dedup) {
    std::map<int, std::vector<std::string>> digests;
    for (auto& [sid, chan] : by_id) {
      const nlohmann::json msg = chan->recv();
      if (kind_of(msg) != "DEDUP_DIGESTS") throw ProtocolError("expected DEDUP_DIGESTS");
      const DedupDigestsMsg d = dedup_digests_from_json(msg);
      for (const auto& hex : d.digests)
        if (hex.size() != 64) throw ProtocolError("digest-length mismatch");
      digests[d.source_id] = d.digests;
    }
    const auto drops = dedup_decide(digests, cfg.dedup_keep_limit,
                                    derive_seed(cfg.master_seed, {0xdedu}));
    for (auto& [sid, chan] : by_id) {
      DedupDropsMsg msg;
      auto it = drops.find(sid);
      if (it != drops.end()) msg.drop_indices = it->second;
      chan->send(to_json(msg));
    }
  }

  TrainResult result;
  result.params = objective.initial_params(infos, cfg.master_seed);
  std::vector<double> flat = result.params.flatten_trainable();
  Optimizer opt(cfg, objective.direction(), flat.size());

  for (int round = 1; round <= cfg.max_rounds; ++round) {
    ParamsMsg broadcast;
    broadcast.round = round;
    broadcast.round_seed = round_seed_for(cfg.master_seed, round);
    broadcast.params = result.params;
    const nlohmann::json encoded = to_json(broadcast);
    for (auto& [sid, chan] : by_id) chan->send(encoded);

    std::vector<GradientMessage> grads;
    for (auto& [sid, chan] : by_id) {
      nlohmann::json msg;
      try {
        msg = chan->recv();
      } catch (const ProtocolError& e) {
        throw ProtocolError("round " + std::to_string(round) + " aborted: source " +
                            std::to_string(sid) + ": " + e.what());
      }
      if (kind_of(msg) != "GRAD") throw ProtocolError("expected GRAD, got " + kind_of(msg));
      const GradMsg g = grad_from_json(msg);
      if (g.round != round) throw ProtocolError("gradient for wrong round");
      GradientMessage gm;
      gm.round = g.round;
      gm.source_id = g.source_id;
      gm.gradient = g.segments;
      gm.objective = g.objective;
      grads.push_back(std::move(gm));
    }

    const ParameterVector total = aggregate(grads);
    if (!total.same_layout(result.params)) throw ProtocolError("gradient layout mismatch");
    const std::vector<double> grad_flat = total.flatten_trainable();
    opt.step(flat, grad_flat);
    result.params.assign_trainable(flat);

    double obj_sum = 0.0;
    for (const auto& g : grads) obj_sum += g.objective;
    result.log.push_back({round, obj_sum});
    result.rounds_run = round;

    if (static_cast<int>(result.log.size()) > cfg.tolerance_window) {
      bool flat_window = true;
      const std::size_t last = result.log.size() - 1;
      for (int k = 0; k < cfg.tolerance_window; ++k) {
        const double delta =
            std::abs(result.log[last - k].objective_sum - result.log[last - k - 1].objective_sum);
        if (delta >= cfg.tolerance) {
          flat_window = false;
          break;
        }
      }
      if (flat_window) break;
    }
  }

  for (auto& [sid, chan] : by_id) chan->send(stop_message());
  return result;
}

void run_worker(const TrainConfig& cfg, Channel& channel, const FederatedObjective& objective,
                SourceDataset shard) {
  channel.set_timeout_ms(cfg.worker_timeout_ms);
  HelloMsg hello;
  hello.source_id = shard.source_id();
  hello.info.source_id = shard.source_id();
  hello.info.n_records = static_cast<int>(shard.size());
  hello.info.dim_x = static_cast<int>(shard.dim_x());
  hello.info.dim_u = static_cast<int>(shard.dim_u());
  hello.info.moments = compute_moments(shard).concatenated();
  channel.send(to_json(hello));

  if (cfg.dedup) {
    DedupDigestsMsg digests;
    digests.source_id = shard.source_id();
    digests.digests = shard_digests(shard, cfg.dedup_salt);
    channel.send(to_json(digests));
    const nlohmann::json reply = channel.recv();
    if (kind_of(reply) == "STOP") return;
    if (kind_of(reply) != "DEDUP_DROPS") throw ProtocolError("expected DEDUP_DROPS");
    const DedupDropsMsg drops = dedup_drops_from_json(reply);
    if (!drops.drop_indices.empty()) {
      std::vector<bool> dropped(shard.size(), false);
      for (int idx : drops.drop_indices) dropped.at(static_cast<std::size_t>(idx)) = true;
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < shard.size(); ++i)
        if (!dropped[i]) keep.push_back(i);
      shard = shard.subset(keep);
    }
  }

  for (;;) {
    const nlohmann::json msg = channel.recv();
    const std::string kind = kind_of(msg);
    if (kind == "STOP") return;
    if (kind != "PARAMS") throw ProtocolError("worker expected PARAMS, got " + kind);
    const ParamsMsg params = params_msg_from_json(msg);
    const EvalResult eval = objective.eval(params.params, shard, params.round_seed);
    GradMsg grad;
    grad.round = params.round;
    grad.source_id = shard.source_id();
    grad.segments = eval.gradient;
    grad.objective = eval.objective;
    channel.send(to_json(grad));
  }
}

TrainResult run_training(const TrainConfig& cfg, const FederatedObjective& objective,
                         const FederatedDataset& shards) {
  if (shards.empty()) throw ConfigError("run_training: no shards");
  std::vector<std::unique_ptr<Channel>> coordinator_side, worker_side;
  for (std::size_t i = 0; i < shards.size(); ++i) {
    auto [a, b] = make_inproc_pair();
    coordinator_side.push_back(std::move(a));
    worker_side.push_back(std::move(b));
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> worker_errors(shards.size());
  for (std::size_t i = 0; i < shards.size(); ++i) {
    threads.emplace_back([&, i] {
      try {
        run_worker(cfg, *worker_side[i], objective, shards[i]);
      } catch (...) {
        worker_errors[i] = std::current_exception();
      }
    });
  }
  TrainResult result;
  std::exception_ptr coordinator_error;
  try {
    std::vector<Channel*> raw;
    for (auto& c : coordinator_side) raw.push_back(c.get());
    result = coordinate_training(cfg, objective, raw);
  } catch (...) {
    coordinator_error = std::current_exception();
    for (auto& c : coordinator_side) c->close();
  }
  for (auto& t : threads) t.join();
  if (coordinator_error) std::rethrow_exception(coordinator_error);
  for (auto& err : worker_errors)
    if (err) std::rethrow_exception(err);
  return result;
}

}  // namespace fedcausal
