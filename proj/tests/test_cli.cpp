#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "circuitscope/cli.hpp"
#include "circuitscope/extraction.hpp"
#include "circuitscope/run_config.hpp"

using namespace circuitscope;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

// Scratch directory holding a tiny micro-model config.
struct Workspace {
  fs::path root;
  std::string config;

  explicit Workspace(const std::string& name) {
    root = fs::temp_directory_path() / ("circuitscope_cli_" + name);
    fs::remove_all(root);
    fs::create_directories(root);
    config = (root / "micro.json").string();
    std::ofstream(config) << R"({
  "task": "gt",
  "seed": 7,
  "model": {"n_layers": 1, "n_heads": 2, "d_model": 8, "d_mlp": 16, "max_seq_len": 32},
  "data": {"base": 64, "train": 16, "validation": 8, "test": 8},
  "base": {"epochs": 2, "lr": 0.01},
  "discover": {"epochs": 3, "batch_size": 8, "eval_every": 1}
})";
  }
  ~Workspace() { fs::remove_all(root); }
  std::string path(const std::string& name) const { return (root / name).string(); }
};

}  // namespace

TEST_CASE("git blob hashes") {
  CHECK(git_blob_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  CHECK(git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("run config defaults depend on the task") {
  const auto gt = run_config_from_json({{"task", "gt"}});
  CHECK(gt.train.mask_epochs == 200);
  CHECK(gt.data.sizes.train == 150);
  const auto ioi = run_config_from_json({{"task", "ioi"}});
  CHECK(ioi.train.mask_epochs == 500);
  CHECK(ioi.data.sizes.train == 200);
  const auto set = run_config_from_json(
      {{"task", "ioi"}, {"seed", 4}, {"data", {{"gt_margin", 3}}}, {"discover", {{"epochs", 7}, {"select_metric_epsilon", 0.2}}}});
  CHECK(set.train.mask_epochs == 7);
  CHECK(set.train.seed == 4);
  CHECK(set.train.gt_margin == 3);
  CHECK(set.train.select_metric_epsilon == 0.2);
  CHECK(run_config_from_json(run_config_to_json(set)).train.mask_epochs == 7);
  CHECK_THROWS_AS(run_config_from_json({{"discover", {{"select_metric_epsilon", -1}}}}), ConfigError);
}

TEST_CASE("usage and config errors exit 1") {
  const Workspace ws("errors");
  CHECK(cli({}).code == kExitConfigError);
  CHECK(cli({"frobnicate"}).code == kExitConfigError);
  CHECK(cli({"train-base", "--config", ws.config}).code == kExitConfigError);  // no --out
  CHECK(cli({"train-base", "--config", ws.path("missing.json"), "--out", ws.path("o")}).code == kExitConfigError);
  CHECK(cli({"train-base", "--config", ws.config, "--task", "sst", "--out", ws.path("o")}).code == kExitConfigError);

  const std::string bad = ws.path("bad.json");
  std::ofstream(bad) << R"({"task": "gt", "discover": {"epoch": 3}})";
  const auto r = cli({"discover", "--config", bad, "--out", ws.path("bad_out")});
  CHECK(r.code == kExitConfigError);
  CHECK(r.err.find("epoch") != std::string::npos);
  CHECK_FALSE(fs::exists(ws.path("bad_out") + "/masks.ckpt"));

  const std::string not_json = ws.path("not.json");
  std::ofstream(not_json) << "{task: gt";
  CHECK(cli({"train-base", "--config", not_json, "--out", ws.path("o")}).code == kExitConfigError);
  CHECK(cli({"evaluate", "--config", ws.config, "--model", ws.path("nope.ckpt"), "--out", ws.path("o")}).code ==
        kExitConfigError);
}

TEST_CASE("divergence exits 2") {
  const Workspace ws("diverge");
  const std::string cfg = ws.path("hot.json");
  std::ofstream(cfg) << R"({
  "task": "gt",
  "model": {"n_layers": 1, "n_heads": 2, "d_model": 8, "d_mlp": 16, "max_seq_len": 32},
  "data": {"base": 64, "train": 16, "validation": 8, "test": 8},
  "base": {"epochs": 3, "lr": 1e30}
})";
  const auto r = cli({"train-base", "--config", cfg, "--out", ws.path("o")});
  CHECK(r.code == kExitRuntimeError);
}

TEST_CASE("pipeline: determinism, identity evaluation, manifests, reports") {
  const Workspace ws("pipeline");
  const auto run1 = ws.path("run1"), run2 = ws.path("run2");
  REQUIRE(cli({"train-base", "--config", ws.config, "--out", ws.path("base")}).code == kExitOk);
  const std::string model = ws.path("base") + "/model.ckpt";
  const std::string model_bytes = slurp(model);

  REQUIRE(cli({"discover", "--config", ws.config, "--seed", "3", "--model", model, "--out", run1}).code == kExitOk);
  REQUIRE(cli({"discover", "--config", ws.config, "--seed", "3", "--model", model, "--out", run2}).code == kExitOk);
  CHECK(slurp(run1 + "/masks.ckpt") == slurp(run2 + "/masks.ckpt"));
  CHECK(slurp(run1 + "/train_log.jsonl") == slurp(run2 + "/train_log.jsonl"));
  CHECK(slurp(model) == model_bytes);

  const auto manifest = nlohmann::json::parse(slurp(run1 + "/manifest.json"));
  CHECK(manifest.at("command") == "discover");
  CHECK(manifest.at("seed") == 3);
  CHECK(manifest.at("inputs").at("model").at("sha1") == git_blob_hash(model_bytes));
  CHECK(manifest.at("outputs").at("masks.ckpt") == git_blob_hash(slurp(run1 + "/masks.ckpt")));

  const auto full = cli({"evaluate", "--config", ws.config, "--model", model, "--out", ws.path("eval")});
  REQUIRE(full.code == kExitOk);
  const auto metrics = nlohmann::json::parse(slurp(ws.path("eval") + "/metrics.json"));
  CHECK(std::abs(metrics.at("circuit").at("kl_divergence").get<double>()) < 1e-9);
  CHECK(metrics.at("circuit").at("gt_score") == metrics.at("base").at("gt_score"));

  const auto ext = ws.path("ext");
  REQUIRE(cli({"extract", "--config", ws.config, "--model", model, "--masks", run1 + "/masks.ckpt", "--out", ext})
              .code == kExitOk);
  for (const char* f : {"circuit.json", "circuit.md", "circuit.csv", "manifest.json"}) CHECK(fs::exists(ext + "/" + f));
  const auto report = cli({"report", "--circuit", ext + "/circuit.json", "--format", "md"});
  REQUIRE(report.code == kExitOk);
  CHECK(report.out == slurp(ext + "/circuit.md"));

  REQUIRE(cli({"evaluate", "--config", ws.config, "--model", model, "--circuit", ext + "/circuit.json", "--out",
               ws.path("eval2")})
              .code == kExitOk);
  const auto circuit_metrics = nlohmann::json::parse(slurp(ws.path("eval2") + "/metrics.json"));
  const auto extracted = nlohmann::json::parse(slurp(ext + "/circuit.json"));
  CHECK(circuit_metrics.at("circuit").at("kl_divergence") == extracted.at("circuit").at("kl_divergence"));

  REQUIRE(cli({"oracle", "--config", ws.config, "--model", model, "--out", ws.path("oracle")}).code == kExitOk);
  const auto oracle = nlohmann::json::parse(slurp(ws.path("oracle") + "/oracle.json"));
  CHECK(oracle.at("exhaustive").at("examined") == 16);
  CHECK(oracle.contains("greedy"));

  // A model that does not match the config is rejected before any work.
  const std::string other = ws.path("other.json");
  std::ofstream(other) << R"({"task": "gt", "model": {"n_layers": 2, "n_heads": 2, "d_model": 8, "d_mlp": 16}})";
  CHECK(cli({"evaluate", "--config", other, "--model", model, "--out", ws.path("o")}).code == kExitConfigError);
}

TEST_CASE("report on the pruning-summary fixture matches the golden file") {
  const Workspace ws("report");
  const std::string dir = CIRCUITSCOPE_TEST_DIR "/golden/";
  const auto r = cli({"report", "--circuit", dir + "pruning_summary.json", "--format", "markdown"});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out == slurp(dir + "pruning_summary.md"));
  REQUIRE(cli({"report", "--circuit", dir + "pruning_summary.json", "--format", "csv", "--out", ws.path("r")}).code ==
          kExitOk);
  CHECK(fs::exists(ws.path("r") + "/report.csv"));
  CHECK(fs::exists(ws.path("r") + "/manifest.json"));
  CHECK(cli({"report", "--circuit", dir + "pruning_summary.json", "--format", "pdf"}).code == kExitConfigError);
}
