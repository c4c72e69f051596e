#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "circuitscope/gates.hpp"
#include "circuitscope/model.hpp"
#include "circuitscope/tasks.hpp"

namespace circuitscope {

inline constexpr int kMetricSchemaVersion = 1;
inline constexpr double kKlFloor = 1e-12;

// P(y > y_start + margin) - P(y < y_start - margin) over the 100 two-digit
// year probabilities.
double gt_score(std::span<const double> year_probs, int y_start, int margin = 0);

// Logit difference, used for both IOI and gendered-pronoun scores.
double logit_difference(std::span<const float> logits, Token good, Token bad);
inline double ioi_score(std::span<const float> logits, Token io, Token s) { return logit_difference(logits, io, s); }
inline double gp_score(std::span<const float> logits, Token consistent, Token inconsistent) {
  return logit_difference(logits, consistent, inconsistent);
}

double mean(std::span<const double> values);

// sum_v p(v) * ln(p(v) / max(q(v), floor)); terms with p(v) = 0 contribute 0.
double kl_divergence(std::span<const double> p, std::span<const double> q, double floor = kKlFloor);

std::vector<double> softmax(std::span<const float> logits);

// Score of one example's answer-position logits under its task metric.
double task_score(const TaskExample& ex, std::span<const float> logits, int gt_margin = 0);

struct CircuitSize {
  std::array<std::size_t, kNumGranularities> active{};
  std::array<std::size_t, kNumGranularities> total{};
  std::array<double, kNumGranularities> sparsity{};
  double parameter_count = 0.0;
  double total_parameters = 0.0;
  // original / circuit parameters; empty when the circuit has no parameters
  std::optional<double> compression_ratio;
};

// Parameters of a block count only when its block gate is on, scaled by the
// active fraction of the finer families feeding each weight.
CircuitSize circuit_size(const BinaryMask& bits, const ModelConfig& config);

struct EdgeCount {
  std::size_t active = 0;
  std::size_t total = 0;
  double compression = 0.0;
};

// Coarse DAG: EMB, every head, every MLP block, OUT. A head in layer l reads
// EMB and every head/MLP below l; an MLP in layer l additionally reads the
// heads of layer l; OUT reads everything. EMB and OUT are always active; a
// head is active iff its attention block and head bits are both set.
EdgeCount edge_count(const BinaryMask& bits, const ModelConfig& config);

struct MetricReport {
  std::optional<double> gt_score;
  std::optional<double> ioi_score;
  std::optional<double> gp_score;
  double kl_divergence = 0.0;
  CircuitSize size;
  EdgeCount edges;
  std::size_t examples = 0;
};

void to_json(nlohmann::json& j, const MetricReport& r);
void from_json(const nlohmann::json& j, MetricReport& r);

}  // namespace circuitscope
