#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "circuitscope/gates.hpp"
#include "circuitscope/metrics.hpp"
#include "circuitscope/model.hpp"
#include "circuitscope/tasks.hpp"
#include "circuitscope/training.hpp"

namespace circuitscope {

inline constexpr std::string_view kToolVersion = "0.1.0";

// Binarize every gate, then zero children of inactive parents.
BinaryMask extract(const MaskSet& masks);

// Bits of a circuit with every gate on.
BinaryMask full_circuit(const ModelConfig& config);

// Evaluates binary circuits against a fixed dataset. Corrupted sites and the
// base distribution of every example are computed once.
class CircuitEvaluator {
 public:
  CircuitEvaluator(const Model& model, const std::vector<TaskExample>& examples, int gt_margin = 0);

  struct Result {
    double kl = 0.0;     // mean KL(base || circuit)
    double score = 0.0;  // mean task score of the circuit
    std::vector<double> per_example_kl;
    std::vector<double> per_example_score;
  };

  // Gate values in layout order; binary circuits pass 0/1.
  Result run(std::span<const float> gates) const;
  Result run(const BinaryMask& bits) const;
  // Unpatched model on the clean inputs.
  Result base() const;

  const NodeLayout& layout() const { return layout_; }
  std::size_t size() const { return examples_.size(); }

 private:
  const Model& model_;
  const std::vector<TaskExample>& examples_;
  int gt_margin_;
  NodeLayout layout_;
  WeightCache<float> cache_;
  struct Prepared {
    SiteValues<float> corrupt;
    std::vector<float> base_logits;
    std::vector<double> base_probs;
    double base_score = 0.0;
  };
  std::vector<Prepared> prepared_;
};

// Task score and KL vs base of a binary circuit over a dataset, plus size and
// edge accounting.
MetricReport evaluate_circuit(const Model& model, const BinaryMask& bits, const std::vector<TaskExample>& examples,
                              int gt_margin = 0);
MetricReport evaluate_base(const Model& model, const std::vector<TaskExample>& examples, int gt_margin = 0);

struct CircuitReport {
  ModelConfig model_config;
  TaskKind task = TaskKind::GreaterThan;
  BinaryMask bits;
  MetricReport base;
  MetricReport circuit;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::string tool_version{kToolVersion};

  // active[layer][family]
  std::vector<std::array<std::size_t, kNumGranularities>> layer_counts() const;
};

CircuitReport make_report(const Model& model, const BinaryMask& bits, const std::vector<TaskExample>& examples,
                          TaskKind task, const nlohmann::json& config, std::uint64_t seed, int gt_margin = 0);

void to_json(nlohmann::json& j, const CircuitReport& r);
void from_json(const nlohmann::json& j, CircuitReport& r);

enum class ReportFormat { Json, Markdown, Csv };
ReportFormat parse_report_format(std::string_view name);

std::string render_report(const CircuitReport& report, ReportFormat format);

}  // namespace circuitscope
