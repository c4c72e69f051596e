#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "circuitscope/engine/ops.hpp"
#include "circuitscope/model.hpp"
#include "circuitscope/tasks.hpp"

namespace testing {

using circuitscope::engine::Tape;
using circuitscope::engine::Tensor;
using circuitscope::engine::Var;

using LossFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

inline Tensor<double> random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  std::normal_distribution<double> normal(0.0, scale);
  for (double& v : t.data()) v = normal(rng);
  return t;
}

// Largest |analytic - numeric| / max(1, |numeric|) over every input element,
// using central differences.
inline double max_grad_error(const LossFn& f, const std::vector<Tensor<double>>& inputs, double h = 1e-5) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.parameter(t));
  const auto grads = tape.backward(f(tape, vars));
  std::vector<Tensor<double>> analytic;
  for (const auto& t : inputs) analytic.emplace_back(t.shape());
  for (const auto& g : grads) analytic[g.param.id] = g.grad;

  auto eval = [&](const std::vector<Tensor<double>>& xs) {
    Tape<double> t;
    std::vector<Var<double>> vs;
    for (const auto& x : xs) vs.push_back(t.parameter(x));
    return t.value(f(t, vs))[0];
  };
  double worst = 0.0;
  auto xs = inputs;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (std::size_t i = 0; i < xs[k].size(); ++i) {
      const double orig = xs[k][i];
      xs[k][i] = orig + h;
      const double up = eval(xs);
      xs[k][i] = orig - h;
      const double down = eval(xs);
      xs[k][i] = orig;
      const double numeric = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

inline circuitscope::ModelConfig micro_config(int layers = 1, int heads = 2, int d_model = 8, int d_mlp = 16) {
  circuitscope::ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d_model;
  c.d_mlp = d_mlp;
  c.vocab_size = static_cast<int>(circuitscope::Vocabulary::standard().size());
  c.max_seq_len = 32;
  return c;
}

// Random model with weights large enough that every component matters.
inline circuitscope::Model lively_model(const circuitscope::ModelConfig& c, std::uint64_t seed, float scale = 0.3F) {
  circuitscope::Model m = circuitscope::Model::random(c, seed);
  std::mt19937_64 rng(seed + 17);
  std::normal_distribution<float> normal(0.0F, scale);
  for (const auto& [name, _] : m.weights()) {
    if (name.ends_with("/gain")) continue;
    for (float& v : m.mutable_weight(name).data()) v = normal(rng);
  }
  return m;
}

}  // namespace testing
