#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "circuitscope/extraction.hpp"
#include "circuitscope/model.hpp"
#include "circuitscope/tasks.hpp"

namespace circuitscope {

inline constexpr std::size_t kMaxOracleNodes = 20;
inline constexpr double kDefaultOracleEpsilon = 0.1;

class OracleError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Attention blocks, heads and MLP blocks, in layout order.
std::vector<NodeId> coarse_nodes(const ModelConfig& config);

// Full circuit with the listed coarse nodes switched off, hierarchy enforced.
BinaryMask circuit_without(const ModelConfig& config, const std::vector<NodeId>& removed);

// Coarse nodes of `bits` that are on, in layout order.
std::vector<NodeId> active_coarse_nodes(const BinaryMask& bits, const ModelConfig& config);

struct OracleResult {
  std::vector<NodeId> nodes;  // searched set, layout order
  double epsilon = kDefaultOracleEpsilon;
  double full_loss = 0.0;     // loss of the full circuit
  bool feasible = false;
  std::size_t minimal_size = 0;
  // Minimum-cardinality subsets meeting the tolerance, each in layout order;
  // the list is sorted. Holds the full node set when infeasible.
  std::vector<std::vector<NodeId>> minimal_subsets;
  std::vector<double> minimal_losses;
  std::size_t examined = 0;
};

// Loss of every kept subset is the mean answer-position KL(base || circuit);
// a subset is feasible when its loss is at most full_loss + epsilon.
OracleResult exhaustive_search(const Model& model, const std::vector<TaskExample>& examples,
                               const std::vector<NodeId>& nodes, double epsilon = kDefaultOracleEpsilon);

struct GreedyStep {
  NodeId removed;
  double loss = 0.0;   // loss after removal
  double delta = 0.0;  // change from the previous circuit
};

struct GreedyResult {
  std::vector<NodeId> nodes;
  double epsilon = kDefaultOracleEpsilon;
  double full_loss = 0.0;
  std::vector<GreedyStep> trace;
  std::vector<NodeId> remaining;
};

// Repeatedly removes the node whose removal raises the loss least (lower
// layout index on ties) while the loss stays within tolerance.
GreedyResult greedy_ablation(const Model& model, const std::vector<TaskExample>& examples,
                             const std::vector<NodeId>& nodes, double epsilon = kDefaultOracleEpsilon);

void to_json(nlohmann::json& j, const OracleResult& r);
void to_json(nlohmann::json& j, const GreedyResult& r);

}  // namespace circuitscope
