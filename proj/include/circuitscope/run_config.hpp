#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "circuitscope/model.hpp"
#include "circuitscope/oracle.hpp"
#include "circuitscope/tasks.hpp"
#include "circuitscope/training.hpp"

namespace circuitscope {

struct DataConfig {
  SplitSizes sizes;
  IoiCorruption ioi_corruption = IoiCorruption::Abc;
  int gt_margin = 0;
};

struct OracleConfig {
  double epsilon = kDefaultOracleEpsilon;
  bool greedy = true;
};

// Sections: task, seed, model, data, base, discover, oracle. Unknown keys
// anywhere are rejected.
struct RunConfig {
  TaskKind task = TaskKind::GreaterThan;
  std::uint64_t seed = 0;
  ModelConfig model;
  DataConfig data;
  TrainConfig train;
  OracleConfig oracle;
};

// Missing sections take defaults; the model vocabulary is the standard one.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& c);
RunConfig load_run_config(const std::string& path);

}  // namespace circuitscope
