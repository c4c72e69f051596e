#include "circuitscope/oracle.hpp"

#include <algorithm>
#include <bit>
#include <limits>

namespace circuitscope {

std::vector<NodeId> coarse_nodes(const ModelConfig& config) {
  std::vector<NodeId> out;
  for (const auto& n : enumerate_nodes(config)) {
    if (n.granularity == Granularity::AttnBlock || n.granularity == Granularity::MlpBlock ||
        n.granularity == Granularity::Head) {
      out.push_back(n);
    }
  }
  return out;
}

BinaryMask circuit_without(const ModelConfig& config, const std::vector<NodeId>& removed) {
  const NodeLayout layout(config);
  BinaryMask bits(layout.size(), 1);
  for (const auto& n : removed) bits[layout.index(n)] = 0;
  return enforce_hierarchy(bits, layout);
}

std::vector<NodeId> active_coarse_nodes(const BinaryMask& bits, const ModelConfig& config) {
  const NodeLayout layout(config);
  if (bits.size() != layout.size()) throw std::invalid_argument("circuit size does not match layout");
  const BinaryMask consistent = enforce_hierarchy(bits, layout);
  std::vector<NodeId> out;
  for (const auto& n : coarse_nodes(config)) {
    if (consistent[layout.index(n)]) out.push_back(n);
  }
  return out;
}

namespace {

std::vector<NodeId> checked_nodes(const ModelConfig& config, const std::vector<NodeId>& nodes) {
  const NodeLayout layout(config);
  std::vector<NodeId> out;
  for (const auto& n : nodes) {
    if (!node_valid(n, config)) throw OracleError("node " + to_string(n) + " does not exist in this model");
    if (n.granularity != Granularity::AttnBlock && n.granularity != Granularity::MlpBlock &&
        n.granularity != Granularity::Head) {
      throw OracleError("node " + to_string(n) + " is not a coarse node");
    }
    if (std::find(out.begin(), out.end(), n) != out.end()) throw OracleError("duplicate node " + to_string(n));
    out.push_back(n);
  }
  if (out.size() > kMaxOracleNodes) {
    throw OracleError("exhaustive search is limited to " + std::to_string(kMaxOracleNodes) + " nodes, got " +
                      std::to_string(out.size()));
  }
  std::sort(out.begin(), out.end(),
            [&](const NodeId& a, const NodeId& b) { return layout.index(a) < layout.index(b); });
  return out;
}

double loss_without(const CircuitEvaluator& ev, const ModelConfig& config, const std::vector<NodeId>& removed) {
  return ev.run(circuit_without(config, removed)).kl;
}

}  // namespace

OracleResult exhaustive_search(const Model& model, const std::vector<TaskExample>& examples,
                               const std::vector<NodeId>& nodes, double epsilon) {
  OracleResult r;
  r.nodes = checked_nodes(model.config(), nodes);
  r.epsilon = epsilon;
  if (examples.empty()) throw OracleError("exhaustive search needs at least one example");
  const CircuitEvaluator ev(model, examples);
  const std::size_t n = r.nodes.size();
  const std::uint32_t count = std::uint32_t{1} << n;
  const std::uint32_t all = count - 1;

  std::vector<double> losses(count);
  for (std::uint32_t s = 0; s < count; ++s) {
    std::vector<NodeId> removed;
    for (std::size_t i = 0; i < n; ++i) {
      if (!(s >> i & 1U)) removed.push_back(r.nodes[i]);
    }
    losses[s] = loss_without(ev, model.config(), removed);
  }
  r.examined = count;
  r.full_loss = losses[all];

  const double bound = r.full_loss + epsilon;
  int best = std::numeric_limits<int>::max();
  for (std::uint32_t s = 0; s < count; ++s) {
    if (losses[s] <= bound) best = std::min(best, std::popcount(s));
  }
  r.feasible = best != std::numeric_limits<int>::max();
  std::vector<std::uint32_t> winners;
  if (r.feasible) {
    for (std::uint32_t s = 0; s < count; ++s) {
      if (std::popcount(s) == best && losses[s] <= bound) winners.push_back(s);
    }
  } else {
    winners.push_back(all);
  }
  r.minimal_size = static_cast<std::size_t>(std::popcount(winners.front()));
  // Subsets are listed by the layout indices of their members, which makes
  // the result independent of the order the caller listed nodes in.
  std::vector<std::pair<std::vector<NodeId>, double>> subsets;
  for (std::uint32_t s : winners) {
    std::vector<NodeId> kept;
    for (std::size_t i = 0; i < n; ++i) {
      if (s >> i & 1U) kept.push_back(r.nodes[i]);
    }
    subsets.emplace_back(std::move(kept), losses[s]);
  }
  const NodeLayout layout(model.config());
  auto key = [&](const std::vector<NodeId>& v) {
    std::vector<std::size_t> k;
    for (const auto& x : v) k.push_back(layout.index(x));
    return k;
  };
  std::sort(subsets.begin(), subsets.end(), [&](const auto& a, const auto& b) { return key(a.first) < key(b.first); });
  for (auto& [kept, loss] : subsets) {
    r.minimal_subsets.push_back(std::move(kept));
    r.minimal_losses.push_back(loss);
  }
  return r;
}

GreedyResult greedy_ablation(const Model& model, const std::vector<TaskExample>& examples,
                             const std::vector<NodeId>& nodes, double epsilon) {
  GreedyResult r;
  r.nodes = checked_nodes(model.config(), nodes);
  r.epsilon = epsilon;
  if (examples.empty()) throw OracleError("greedy ablation needs at least one example");
  const CircuitEvaluator ev(model, examples);
  std::vector<NodeId> removed;
  r.remaining = r.nodes;
  r.full_loss = loss_without(ev, model.config(), removed);
  double current = r.full_loss;
  const double bound = r.full_loss + epsilon;
  while (!r.remaining.empty()) {
    std::size_t best = r.remaining.size();
    double best_loss = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < r.remaining.size(); ++i) {
      auto trial = removed;
      trial.push_back(r.remaining[i]);
      const double loss = loss_without(ev, model.config(), trial);
      if (loss < best_loss) {
        best_loss = loss;
        best = i;
      }
    }
    if (best == r.remaining.size() || !(best_loss <= bound)) break;
    removed.push_back(r.remaining[best]);
    r.trace.push_back({r.remaining[best], best_loss, best_loss - current});
    current = best_loss;
    r.remaining.erase(r.remaining.begin() + static_cast<std::ptrdiff_t>(best));
  }
  return r;
}

namespace {

nlohmann::json node_list(const std::vector<NodeId>& nodes) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& n : nodes) j.push_back(to_string(n));
  return j;
}

}  // namespace

void to_json(nlohmann::json& j, const OracleResult& r) {
  nlohmann::json subsets = nlohmann::json::array();
  for (std::size_t i = 0; i < r.minimal_subsets.size(); ++i) {
    subsets.push_back({{"nodes", node_list(r.minimal_subsets[i])}, {"loss", r.minimal_losses[i]}});
  }
  j = {{"kind", "exhaustive"},
       {"nodes", node_list(r.nodes)},
       {"epsilon", r.epsilon},
       {"full_loss", r.full_loss},
       {"feasible", r.feasible},
       {"minimal_size", r.minimal_size},
       {"minimal_subsets", subsets},
       {"examined", r.examined}};
}

void to_json(nlohmann::json& j, const GreedyResult& r) {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& s : r.trace) trace.push_back({{"removed", to_string(s.removed)}, {"loss", s.loss}, {"delta", s.delta}});
  j = {{"kind", "greedy"},
       {"nodes", node_list(r.nodes)},
       {"epsilon", r.epsilon},
       {"full_loss", r.full_loss},
       {"trace", trace},
       {"remaining", node_list(r.remaining)}};
}

}  // namespace circuitscope
