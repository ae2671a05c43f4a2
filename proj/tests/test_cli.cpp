#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedcausal/runner.hpp"

using namespace fedcausal;
namespace fs = std::filesystem;

namespace {

const char* cli = FEDCAUSAL_CLI_PATH;

int run_cmd(const std::string& args, const std::string& log = "/tmp/fedcausal_cli_test.log") {
  const std::string cmd = std::string(cli) + " " + args + " >" + log + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  out << content;
}

const char* kRffConfig = R"({
  "dgp": {"family": "causalrff", "n_per_source": 40, "sources": 3, "d_x": 4, "seed": 7},
  "kernel": {"family": "gaussian", "lengthscale": 1.0},
  "estimator": {"name": "causalrff",
                "causalrff": {"feature_count": 8, "d_z": 3, "mc_samples": 1,
                               "x_binary": [1, 1, 1, 1], "use_mh": false}},
  "train": {"max_rounds": 8, "learning_rate": 0.05, "optimizer": "adam",
            "master_seed": 5, "splits": [0.5, 0.5, 0.0]},
  "eval": {"cate_samples": 10}
})";

}  // namespace

TEST_CASE("cli gen: outputs and manifest-determinism") {
  write_file("/tmp/fedcausal_cli_cfg.json", kRffConfig);
  fs::remove_all("/tmp/fedcausal_cli_data");
  fs::remove_all("/tmp/fedcausal_cli_data2");
  REQUIRE(run_cmd("gen --config /tmp/fedcausal_cli_cfg.json --out /tmp/fedcausal_cli_data") == 0);
  CHECK(fs::exists("/tmp/fedcausal_cli_data/source_1.csv"));
  CHECK(fs::exists("/tmp/fedcausal_cli_data/source_3_truth.csv"));
  CHECK(fs::exists("/tmp/fedcausal_cli_data/manifest.json"));

  // Re-running the same config reproduces the files byte for byte.
  REQUIRE(run_cmd("gen --config /tmp/fedcausal_cli_cfg.json --out /tmp/fedcausal_cli_data2") == 0);
  for (const char* name : {"source_1.csv", "source_2.csv", "source_3_truth.csv"})
    CHECK(slurp(std::string("/tmp/fedcausal_cli_data/") + name) ==
          slurp(std::string("/tmp/fedcausal_cli_data2/") + name));
}

TEST_CASE("cli train + estimate produce metrics when truth is present") {
  fs::remove_all("/tmp/fedcausal_cli_model");
  fs::remove_all("/tmp/fedcausal_cli_est");
  REQUIRE(run_cmd("train --config /tmp/fedcausal_cli_cfg.json --data /tmp/fedcausal_cli_data "
                  "--out /tmp/fedcausal_cli_model") == 0);
  CHECK(fs::exists("/tmp/fedcausal_cli_model/params.json"));
  CHECK(fs::exists("/tmp/fedcausal_cli_model/rounds.csv"));

  REQUIRE(run_cmd("estimate --config /tmp/fedcausal_cli_cfg.json "
                  "--model /tmp/fedcausal_cli_model --data /tmp/fedcausal_cli_data "
                  "--out /tmp/fedcausal_cli_est") == 0);
  CHECK(fs::exists("/tmp/fedcausal_cli_est/estimates_1.csv"));
  CHECK(fs::exists("/tmp/fedcausal_cli_est/effects.json"));
  const std::string metrics = slurp("/tmp/fedcausal_cli_est/metrics.csv");
  CHECK(metrics.find("pehe") != std::string::npos);
  CHECK(metrics.find("causalrff") != std::string::npos);
}

TEST_CASE("cli estimate: missing truth skips metrics but writes estimates") {
  // Copy the data directory without the truth files.
  fs::remove_all("/tmp/fedcausal_cli_notruth");
  fs::create_directories("/tmp/fedcausal_cli_notruth");
  for (const auto& entry : fs::directory_iterator("/tmp/fedcausal_cli_data")) {
    const std::string name = entry.path().filename().string();
    if (name.find("_truth") == std::string::npos)
      fs::copy_file(entry.path(), "/tmp/fedcausal_cli_notruth/" + name);
  }
  fs::remove_all("/tmp/fedcausal_cli_est2");
  REQUIRE(run_cmd("estimate --config /tmp/fedcausal_cli_cfg.json "
                  "--model /tmp/fedcausal_cli_model --data /tmp/fedcausal_cli_notruth "
                  "--out /tmp/fedcausal_cli_est2",
                  "/tmp/fedcausal_cli_notruth.log") == 0);
  CHECK(fs::exists("/tmp/fedcausal_cli_est2/estimates_1.csv"));
  CHECK(!fs::exists("/tmp/fedcausal_cli_est2/metrics.csv"));
  const std::string log = slurp("/tmp/fedcausal_cli_notruth.log");
  CHECK(log.find("metrics skipped") != std::string::npos);
}

TEST_CASE("cli train: invalid round count exits with the config code") {
  std::string bad = kRffConfig;
  const auto pos = bad.find("\"max_rounds\": 8");
  REQUIRE(pos != std::string::npos);
  bad.replace(pos, 15, "\"max_rounds\": 0");
  write_file("/tmp/fedcausal_cli_bad.json", bad);
  CHECK(run_cmd("train --config /tmp/fedcausal_cli_bad.json --data /tmp/fedcausal_cli_data "
                "--out /tmp/fedcausal_cli_badmodel") == 2);
}

TEST_CASE("cli: socket training reproduces the in-process parameter file") {
  // Multi-process run: one coordinator, three workers over TCP.
  const int port = 46137;
  fs::remove_all("/tmp/fedcausal_cli_sock_model");
  std::stringstream cmd;
  cmd << "bash -c '" << cli << " train --config /tmp/fedcausal_cli_cfg.json"
      << " --transport socket --listen " << port << " --workers 3"
      << " --out /tmp/fedcausal_cli_sock_model > /tmp/fedcausal_coord.log 2>&1 & cpid=$!;"
      << " sleep 0.7;";
  for (int s = 1; s <= 3; ++s)
    cmd << cli << " worker --config /tmp/fedcausal_cli_cfg.json --connect 127.0.0.1:" << port
        << " --data /tmp/fedcausal_cli_data/source_" << s << ".csv --source-id " << s
        << " > /tmp/fedcausal_w" << s << ".log 2>&1 &";
  cmd << " wait'";
  const int status = WEXITSTATUS(std::system(cmd.str().c_str()));
  REQUIRE(status == 0);
  REQUIRE(fs::exists("/tmp/fedcausal_cli_sock_model/params.json"));
  CHECK(slurp("/tmp/fedcausal_cli_sock_model/params.json") ==
        slurp("/tmp/fedcausal_cli_model/params.json"));
}

TEST_CASE("cli selftest runs clean") { CHECK(run_cmd("selftest") == 0); }

TEST_CASE("fedci ablation flag produces a distinct trained model") {
  const char* base = R"({
    "dgp": {"family": "fedci_real", "n_per_source": 30, "sources": 2, "d_x": 2, "seed": 3},
    "estimator": {"name": "fedci", "fedci": {"mc_samples": 2, "use_inter_dependency": true}},
    "train": {"max_rounds": 6, "learning_rate": 0.05, "master_seed": 4,
              "splits": [0.6, 0.4, 0.0]},
    "eval": {"mc_samples": 10}
  })";
  write_file("/tmp/fedcausal_cli_fedci.json", base);
  std::string ablated = base;
  const auto pos = ablated.find("\"use_inter_dependency\": true");
  ablated.replace(pos, std::string("\"use_inter_dependency\": true").size(),
                  "\"use_inter_dependency\": false");
  write_file("/tmp/fedcausal_cli_fedci_ablate.json", ablated);

  fs::remove_all("/tmp/fedcausal_cli_fdata");
  REQUIRE(run_cmd("gen --config /tmp/fedcausal_cli_fedci.json --out /tmp/fedcausal_cli_fdata") ==
          0);
  fs::remove_all("/tmp/fedcausal_cli_fmodel_a");
  fs::remove_all("/tmp/fedcausal_cli_fmodel_b");
  REQUIRE(run_cmd("train --config /tmp/fedcausal_cli_fedci.json --data /tmp/fedcausal_cli_fdata "
                  "--out /tmp/fedcausal_cli_fmodel_a") == 0);
  REQUIRE(run_cmd("train --config /tmp/fedcausal_cli_fedci_ablate.json "
                  "--data /tmp/fedcausal_cli_fdata --out /tmp/fedcausal_cli_fmodel_b") == 0);
  CHECK(slurp("/tmp/fedcausal_cli_fmodel_a/params.json") !=
        slurp("/tmp/fedcausal_cli_fmodel_b/params.json"));

  // Both models evaluate to distinct metric rows.
  fs::remove_all("/tmp/fedcausal_cli_fest_a");
  fs::remove_all("/tmp/fedcausal_cli_fest_b");
  REQUIRE(run_cmd("estimate --config /tmp/fedcausal_cli_fedci.json "
                  "--model /tmp/fedcausal_cli_fmodel_a --data /tmp/fedcausal_cli_fdata "
                  "--out /tmp/fedcausal_cli_fest_a") == 0);
  REQUIRE(run_cmd("estimate --config /tmp/fedcausal_cli_fedci_ablate.json "
                  "--model /tmp/fedcausal_cli_fmodel_b --data /tmp/fedcausal_cli_fdata "
                  "--out /tmp/fedcausal_cli_fest_b") == 0);
  CHECK(slurp("/tmp/fedcausal_cli_fest_a/metrics.csv") !=
        slurp("/tmp/fedcausal_cli_fest_b/metrics.csv"));
}

TEST_CASE("config hash is stable and drives the run layout") {
  const nlohmann::json j = nlohmann::json::parse(kRffConfig);
  const std::string h1 = config_hash(j);
  const std::string h2 = config_hash(j);
  CHECK(h1 == h2);
  CHECK(h1.size() == 16);
  nlohmann::json other = j;
  other["train"]["master_seed"] = 6;
  CHECK(config_hash(other) != h1);
}
