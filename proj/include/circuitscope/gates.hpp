#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "circuitscope/checkpoint.hpp"
#include "circuitscope/model.hpp"

namespace circuitscope {

// Hard Concrete stretch/temperature constants.
struct GateConstants {
  double beta = 2.0 / 3.0;
  double gamma = -0.1;
  double zeta = 1.1;

  void validate() const;
  // beta * log(-gamma / zeta): log_alpha above this keeps the gate.
  double threshold() const;

  friend bool operator==(const GateConstants&, const GateConstants&) = default;
};

void to_json(nlohmann::json& j, const GateConstants& c);
void from_json(const nlohmann::json& j, GateConstants& c);

// One coefficient per granularity, indexed by index_of(Granularity).
using Lambdas = std::array<double, kNumGranularities>;

// Sparsity weights: heads 3.0, mlp hidden 5.0, mlp output 1.5,
// attention neurons 1.5, attention blocks 0.2, mlp blocks 0.1.
Lambdas default_lambdas();

double sample_gate(double log_alpha, const GateConstants& c, double u);
double eval_gate(double log_alpha, const GateConstants& c);
double expected_l0(double log_alpha, const GateConstants& c);
bool binarize(double log_alpha, const GateConstants& c);

// Uniform noise in (1e-6, 1 - 1e-6), a pure function of (seed, step, index).
double gate_noise(std::uint64_t seed, std::uint64_t step, std::uint64_t index);

using BinaryMask = std::vector<std::uint8_t>;

// Zeroes every node whose parent bit is zero.
BinaryMask enforce_hierarchy(const BinaryMask& bits, const NodeLayout& layout);

class MaskSet {
 public:
  MaskSet() = default;
  MaskSet(const ModelConfig& config, GateConstants constants, float init_log_alpha = 2.0F);

  const NodeLayout& layout() const { return layout_; }
  const GateConstants& constants() const { return constants_; }
  std::size_t size() const { return log_alpha_.size(); }

  std::span<const float> log_alpha() const { return log_alpha_; }
  std::span<float> log_alpha() { return log_alpha_; }
  std::span<const float> family(int layer, Granularity g) const;
  std::span<float> family(int layer, Granularity g);

  float& operator[](std::size_t i) { return log_alpha_[i]; }
  float operator[](std::size_t i) const { return log_alpha_[i]; }

  BinaryMask binarized() const;

  Checkpoint to_checkpoint() const;
  static MaskSet from_checkpoint(const Checkpoint& ckpt);

  friend bool operator==(const MaskSet&, const MaskSet&) = default;

 private:
  NodeLayout layout_;
  GateConstants constants_;
  std::vector<float> log_alpha_;
};

struct L0Penalty {
  std::array<double, kNumGranularities> family_mean{};
  double total = 0.0;
};

// Mean expected-L0 per family (each in [0,1]) and the lambda-weighted sum.
L0Penalty normalized_l0(const MaskSet& masks, const Lambdas& lambdas);

void save_masks(const std::string& path, const MaskSet& masks);
MaskSet load_masks(const std::string& path);

}  // namespace circuitscope
