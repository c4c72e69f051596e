#include <doctest.h>

#include <algorithm>
#include <limits>

#include "circuitscope/extraction.hpp"
#include "circuitscope/oracle.hpp"
#include "helpers.hpp"

using namespace circuitscope;

namespace {

struct Fixture {
  ModelConfig cfg = testing::micro_config(1, 2, 8, 16);
  Model model = testing::lively_model(cfg, 77, 0.5F);
  std::vector<TaskExample> data = gen_gt(6, 4);
};

// Loss of keeping exactly `kept` among the coarse nodes, via evaluate_circuit.
double kept_loss(const Fixture& f, const std::vector<NodeId>& kept) {
  std::vector<NodeId> removed;
  for (const auto& n : coarse_nodes(f.cfg)) {
    if (std::find(kept.begin(), kept.end(), n) == kept.end()) removed.push_back(n);
  }
  return evaluate_circuit(f.model, circuit_without(f.cfg, removed), f.data).kl_divergence;
}

}  // namespace

TEST_CASE("coarse nodes and removal circuits") {
  const auto cfg = testing::micro_config(2, 2, 8, 16);
  const auto nodes = coarse_nodes(cfg);
  CHECK(nodes.size() == 8);
  const auto bits = circuit_without(cfg, {NodeId::attn_block(1)});
  const NodeLayout layout(cfg);
  CHECK(bits[layout.index(NodeId::head_of(1, 0))] == 0);
  CHECK(bits[layout.index(NodeId::neuron_of(Granularity::AttnNeuron, 1, 0))] == 0);
  CHECK(bits[layout.index(NodeId::head_of(0, 0))] == 1);
  CHECK(active_coarse_nodes(bits, cfg).size() == 5);
}

TEST_CASE("exhaustive search returns verified minimal subsets") {
  const Fixture f;
  const auto nodes = coarse_nodes(f.cfg);
  const double eps = 0.05;
  const auto r = exhaustive_search(f.model, f.data, nodes, eps);
  CHECK(r.examined == 16);
  CHECK(r.full_loss < 1e-9);
  REQUIRE(r.feasible);
  REQUIRE_FALSE(r.minimal_subsets.empty());
  const double bound = r.full_loss + eps;
  for (std::size_t i = 0; i < r.minimal_subsets.size(); ++i) {
    const auto& s = r.minimal_subsets[i];
    CHECK(s.size() == r.minimal_size);
    CHECK(kept_loss(f, s) == doctest::Approx(r.minimal_losses[i]).epsilon(1e-9));
    CHECK(r.minimal_losses[i] <= bound);
  }
  // No subset with fewer nodes meets the tolerance.
  for (std::uint32_t s = 0; s < 16; ++s) {
    std::vector<NodeId> kept;
    for (std::size_t i = 0; i < 4; ++i) {
      if (s >> i & 1U) kept.push_back(nodes[i]);
    }
    if (kept.size() < r.minimal_size) CHECK(kept_loss(f, kept) > bound);
  }
}

TEST_CASE("exhaustive search does not depend on node order") {
  const Fixture f;
  auto nodes = coarse_nodes(f.cfg);
  const auto a = exhaustive_search(f.model, f.data, nodes, 0.05);
  std::reverse(nodes.begin(), nodes.end());
  const auto b = exhaustive_search(f.model, f.data, nodes, 0.05);
  CHECK(a.minimal_subsets == b.minimal_subsets);
  CHECK(a.minimal_losses == b.minimal_losses);
  CHECK(nlohmann::json(a) == nlohmann::json(b));
}

TEST_CASE("tolerance extremes") {
  const Fixture f;
  const auto nodes = coarse_nodes(f.cfg);
  const auto loose = exhaustive_search(f.model, f.data, nodes, std::numeric_limits<double>::infinity());
  CHECK(loose.feasible);
  CHECK(loose.minimal_size == 0);
  const auto tight = exhaustive_search(f.model, f.data, nodes, -1e-3);
  CHECK_FALSE(tight.feasible);
  REQUIRE(tight.minimal_subsets.size() == 1);
  CHECK(tight.minimal_subsets.front() == nodes);
}

TEST_CASE("oracle input validation") {
  const Fixture f;
  CHECK_THROWS_AS(exhaustive_search(f.model, f.data, {NodeId::neuron_of(Granularity::MlpHidden, 0, 0)}),
                  OracleError);
  CHECK_THROWS_AS(exhaustive_search(f.model, f.data, {NodeId::attn_block(5)}), OracleError);
  CHECK_THROWS_AS(exhaustive_search(f.model, f.data, {NodeId::attn_block(0), NodeId::attn_block(0)}), OracleError);
  CHECK_THROWS_AS(exhaustive_search(f.model, {}, coarse_nodes(f.cfg)), OracleError);
  const auto big = testing::micro_config(3, 6, 12, 8);
  const Model m = Model::random(big, 1);
  CHECK(coarse_nodes(big).size() == 24);
  CHECK_THROWS_AS(exhaustive_search(m, f.data, coarse_nodes(big)), OracleError);
}

TEST_CASE("greedy ablation removes an inert head first") {
  Fixture f;
  // Head 1 writes nothing: its rows of the output projection are zero.
  auto& wo = f.model.mutable_weight("layer/0/attn/wo");
  const std::size_t dh = static_cast<std::size_t>(f.cfg.d_head());
  for (std::size_t r = dh; r < 2 * dh; ++r) {
    for (std::size_t c = 0; c < wo.cols(); ++c) wo[r * wo.cols() + c] = 0.0F;
  }
  const auto nodes = coarse_nodes(f.cfg);
  const auto g = greedy_ablation(f.model, f.data, nodes, 0.05);
  REQUIRE_FALSE(g.trace.empty());
  CHECK(g.trace.front().removed == NodeId::head_of(0, 1));
  CHECK(std::abs(g.trace.front().delta) < 1e-9);
  for (const auto& s : g.trace) CHECK(s.loss <= g.full_loss + 0.05);
  const auto ex = exhaustive_search(f.model, f.data, nodes, 0.05);
  CHECK(g.remaining.size() >= ex.minimal_size);
  const nlohmann::json j = g;
  CHECK(j.at("kind") == "greedy");
  CHECK(j.at("trace").size() == g.trace.size());
}

TEST_CASE("greedy ties go to the lower layout index") {
  Fixture f;
  // Both heads inert: removing either costs nothing.
  auto& wo = f.model.mutable_weight("layer/0/attn/wo");
  for (float& v : wo.data()) v = 0.0F;
  const auto g = greedy_ablation(f.model, f.data, coarse_nodes(f.cfg), 0.05);
  REQUIRE(g.trace.size() >= 2);
  CHECK(g.trace[0].removed == NodeId::attn_block(0));
}
