// Command-line front end: data generation, federated training over either
// transport, effect estimation, metric evaluation, and the coordinator /
// worker process entry points.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "fedcausal/runner.hpp"

namespace fs = std::filesystem;
using namespace fedcausal;

namespace {

nlohmann::json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config JSON: ") + e.what());
  }
  return j;
}

std::string default_run_dir(const nlohmann::json& cfg_json) {
  return "runs/" + config_hash(cfg_json);
}

void write_run_manifest(const AppConfig& cfg, const nlohmann::json& cfg_json,
                        const std::string& dir, const nlohmann::json& extra) {
  nlohmann::json manifest;
  manifest["config"] = cfg_json;
  manifest["config_hash"] = config_hash(cfg_json);
  manifest["master_seed"] = cfg.train.master_seed;
  manifest["extra"] = extra;
  fs::create_directories(dir);
  std::ofstream out(dir + "/run_manifest.json");
  out << manifest.dump(2) << "\n";
}

int cmd_gen(const std::string& config_path, std::string out_dir) {
  const nlohmann::json cfg_json = load_json(config_path);
  const AppConfig cfg = config_from_json(cfg_json);
  if (out_dir.empty()) out_dir = default_run_dir(cfg_json) + "/data";
  const GeneratedData gen = generate(cfg.dgp);
  write_generated(gen, out_dir);
  write_run_manifest(cfg, cfg_json, out_dir, {{"stage", "gen"}});
  std::cout << "wrote " << gen.data.size() << " source files under " << out_dir << "\n";
  return 0;
}

std::vector<std::vector<std::size_t>> eval_index_map(const AppConfig& cfg,
                                                     const FederatedDataset& data) {
  std::vector<std::vector<std::size_t>> idx;
  for (const SourceDataset& src : data) {
    const DatasetSplit sp =
        split(src, cfg.split_train, cfg.split_test, cfg.split_val,
              derive_seed(cfg.split_seed, {static_cast<std::uint64_t>(src.source_id())}));
    idx.push_back(sp.test);
  }
  return idx;
}

int cmd_train(const std::string& config_path, const std::string& data_dir, std::string out_dir,
              const std::string& transport, int listen_port, int workers) {
  const nlohmann::json cfg_json = load_json(config_path);
  const AppConfig cfg = config_from_json(cfg_json);
  if (out_dir.empty()) out_dir = default_run_dir(cfg_json) + "/model";

  TrainedModel model;
  if (transport == "inproc") {
    const GeneratedData gen = read_generated(data_dir);
    const SplitShards splits = split_shards(cfg, gen.data);
    model = train_all_stages(cfg, splits.train);
  } else if (transport == "socket") {
    SocketServer server(listen_port);
    std::cout << "coordinator listening on port " << server.port() << "\n";
    std::vector<std::unique_ptr<Channel>> conns;
    for (int i = 0; i < workers; ++i) conns.push_back(server.accept_connection());
    std::vector<Channel*> raw;
    for (auto& c : conns) raw.push_back(c.get());
    model = coordinate_all_stages(cfg, raw);
  } else {
    throw ConfigError("transport must be 'inproc' or 'socket'");
  }
  write_model(model, out_dir);
  write_run_manifest(cfg, cfg_json, out_dir, {{"stage", "train"}, {"transport", transport}});
  std::cout << "trained " << model.estimator << ", params under " << out_dir << "\n";
  return 0;
}

int cmd_estimate(const std::string& config_path, const std::string& model_dir,
                 const std::string& data_dir, std::string out_dir, bool run_metrics) {
  const nlohmann::json cfg_json = load_json(config_path);
  const AppConfig cfg = config_from_json(cfg_json);
  if (out_dir.empty()) out_dir = default_run_dir(cfg_json) + "/estimates";
  fs::create_directories(out_dir);

  const GeneratedData gen = read_generated(data_dir);
  const SplitShards splits = split_shards(cfg, gen.data);
  const TrainedModel model = read_model(model_dir);
  const EstimateOutput est =
      estimate_all(cfg, model, splits.train, splits.test, cfg.train.master_seed);

  char buf[128];
  for (std::size_t s = 0; s < est.ite_mean.size(); ++s) {
    std::ofstream out(out_dir + "/estimates_" + std::to_string(est.source_ids[s]) + ".csv");
    out << "record_id,ite_mean,ite_var\n";
    for (Eigen::Index i = 0; i < est.ite_mean[s].size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%ld,%.12g,%.12g\n", static_cast<long>(i),
                    est.ite_mean[s](i), est.ite_var[s](i));
      out << buf;
    }
  }
  nlohmann::json effects = {{"global_ate", est.global_ate},
                            {"local_ate", est.local_ate},
                            {"source_ids", est.source_ids}};
  if (!est.posterior.is_null()) effects["posterior"] = est.posterior;
  {
    std::ofstream out(out_dir + "/effects.json");
    out << effects.dump(2) << "\n";
  }

  if (run_metrics) {
    if (gen.truth.ite.empty()) {
      std::cerr << "warning: no truth files found under " << data_dir
                << "; metrics skipped, estimates still written\n";
    } else {
      const auto idx = eval_index_map(cfg, gen.data);
      const MetricReport report = metrics_for(est, gen.truth, idx, cfg.estimator);
      std::ofstream csv(out_dir + "/metrics.csv");
      csv << report.to_csv();
      std::ofstream js(out_dir + "/metrics.json");
      js << report.to_json().dump(2) << "\n";
      std::cout << report.to_csv();
    }
  }
  write_run_manifest(cfg, cfg_json, out_dir, {{"stage", "estimate"}});
  return 0;
}

int cmd_worker(const std::string& config_path, const std::string& connect,
               const std::string& shard_csv, int source_id) {
  const nlohmann::json cfg_json = load_json(config_path);
  const AppConfig cfg = config_from_json(cfg_json);
  const auto colon = connect.rfind(':');
  if (colon == std::string::npos) throw ConfigError("--connect must be host:port");
  const std::string host = connect.substr(0, colon);
  const int port = std::stoi(connect.substr(colon + 1));

  SourceDataset full = load_csv(shard_csv, CsvSchema(), source_id);
  const DatasetSplit sp =
      split(full, cfg.split_train, cfg.split_test, cfg.split_val,
            derive_seed(cfg.split_seed, {static_cast<std::uint64_t>(source_id)}));
  SourceDataset train = full.subset(sp.train);

  auto channel = socket_connect(host, port);
  serve_worker_stages(cfg, *channel, train);
  std::cout << "worker " << source_id << " finished\n";
  return 0;
}

int cmd_coordinate(const std::string& config_path, std::string out_dir, int listen_port,
                   int workers) {
  return cmd_train(config_path, "", out_dir, "socket", listen_port, workers);
}

int cmd_selftest() {
  // Quadratic toy: summed gradients drive theta to the mean of the centers.
  AppConfig cfg;
  cfg.estimator = "selftest";
  cfg.train.max_rounds = 500;
  cfg.train.learning_rate = 0.1;
  cfg.train.optimizer = TrainConfig::Optimizer::Sgd;
  cfg.train.tolerance = 1e-14;
  FederatedDataset shards;
  for (int s = 1; s <= 3; ++s) {
    std::vector<Record> recs(1);
    recs[0].x = {0.0};
    shards.emplace_back(s, recs);
  }
  const TrainedModel model = train_all_stages(cfg, shards);
  const auto& t = model.stage_params[0].segment("toy/theta").values;
  const double want0 = 2.0, want1 = -1.0;  // means of centers {1,2,3} and {-0.5,-1,-1.5}
  const double err = std::max(std::abs(t[0] - want0), std::abs(t[1] - want1));
  std::cout << "selftest: theta = (" << t[0] << ", " << t[1] << "), error " << err << "\n";
  if (err > 1e-4) {
    std::cerr << "selftest FAILED\n";
    return 4;
  }
  std::cout << "selftest OK\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated causal-inference toolkit"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, model_dir, transport = "inproc";
  std::string connect, shard_csv;
  int listen_port = 0, workers = 1, source_id = 1;

  auto* gen = app.add_subcommand("gen", "generate synthetic federated data");
  gen->add_option("--config", config_path)->required();
  gen->add_option("--out", out_dir);

  auto* train = app.add_subcommand("train", "federated training");
  train->add_option("--config", config_path)->required();
  train->add_option("--data", data_dir);
  train->add_option("--out", out_dir);
  train->add_option("--transport", transport)->check(CLI::IsMember({"inproc", "socket"}));
  train->add_option("--listen", listen_port);
  train->add_option("--workers", workers);

  auto* estimate = app.add_subcommand("estimate", "estimate effects (metrics when truth present)");
  estimate->add_option("--config", config_path)->required();
  estimate->add_option("--model", model_dir)->required();
  estimate->add_option("--data", data_dir)->required();
  estimate->add_option("--out", out_dir);

  auto* evalc = app.add_subcommand("eval", "compute metrics for existing estimates");
  evalc->add_option("--config", config_path)->required();
  evalc->add_option("--model", model_dir)->required();
  evalc->add_option("--data", data_dir)->required();
  evalc->add_option("--out", out_dir);

  auto* worker = app.add_subcommand("worker", "serve one source shard to a coordinator");
  worker->add_option("--config", config_path)->required();
  worker->add_option("--connect", connect)->required();
  worker->add_option("--data", shard_csv)->required();
  worker->add_option("--source-id", source_id)->required();

  auto* coordinate = app.add_subcommand("coordinate", "run the coordinator for socket workers");
  coordinate->add_option("--config", config_path)->required();
  coordinate->add_option("--out", out_dir);
  coordinate->add_option("--listen", listen_port);
  coordinate->add_option("--workers", workers)->required();

  app.add_subcommand("selftest", "built-in smoke test");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen(config_path, out_dir);
    if (train->parsed()) return cmd_train(config_path, data_dir, out_dir, transport, listen_port,
                                          workers);
    if (estimate->parsed()) return cmd_estimate(config_path, model_dir, data_dir, out_dir, true);
    if (evalc->parsed()) return cmd_estimate(config_path, model_dir, data_dir, out_dir, true);
    if (worker->parsed()) return cmd_worker(config_path, connect, shard_csv, source_id);
    if (coordinate->parsed()) return cmd_coordinate(config_path, out_dir, listen_port, workers);
    return cmd_selftest();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const SchemaError& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 2;
  } catch (const ProtocolError& e) {
    std::cerr << "protocol error: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
