#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string_view>
#include <vector>

#include "circuitscope/gates.hpp"
#include "circuitscope/transformer.hpp"

namespace circuitscope {

enum class GateMode {
  Sampled,        // Hard Concrete sample with per-gate noise
  Deterministic,  // eval_gate
  Binary,         // binarize
};

GateMode parse_gate_mode(std::string_view name);

// m*clean + (1-m)*corrupt. m holds one value (broadcast) or one per column.
FloatTensor interpolate(const FloatTensor& clean, const FloatTensor& corrupt, std::span<const float> m);

// Noise u for every gate at one training step.
std::vector<double> step_noise(std::size_t gates, std::uint64_t seed, std::uint64_t step);

// Flat gate values in layout order.
std::vector<float> gate_values(const MaskSet& masks, GateMode mode, std::span<const double> noise = {});

struct StreamState {
  std::vector<LayerSites<FloatTensor>> clean;
  std::vector<LayerSites<FloatTensor>> corrupted;
  std::vector<LayerSites<FloatTensor>> base;
  FloatTensor clean_logits;
  FloatTensor corrupted_logits;
  FloatTensor base_logits;
};

StreamState run_two_stream(const Model& model, const MaskSet& masks, std::span<const Token> clean,
                           std::span<const Token> corrupt, GateMode mode, std::span<const double> noise = {});

// Same three passes with explicit per-gate values (e.g. a binary circuit).
StreamState run_two_stream_with_gates(const Model& model, std::span<const float> gates, std::span<const Token> clean,
                                      std::span<const Token> corrupt);

// Per-(layer, family) log_alpha leaves on a tape.
template <class Real>
using GateLeaves = std::vector<std::array<engine::Var<Real>, kNumGranularities>>;

template <class Real>
GateLeaves<Real> bind_log_alpha(engine::Tape<Real>& tape, const MaskSet& masks, bool trainable) {
  GateLeaves<Real> leaves;
  const int L = masks.layout().config().n_layers;
  for (int l = 0; l < L; ++l) {
    std::array<engine::Var<Real>, kNumGranularities> row;
    for (Granularity g : kAllGranularities) {
      const auto span = masks.family(l, g);
      engine::Tensor<Real> t({span.size()});
      for (std::size_t i = 0; i < span.size(); ++i) t[i] = static_cast<Real>(span[i]);
      row[index_of(g)] = trainable ? tape.parameter(std::move(t)) : tape.constant(std::move(t));
    }
    leaves.push_back(row);
  }
  return leaves;
}

template <class Real>
std::vector<LayerGates<Real>> assemble_gates(const std::vector<std::array<engine::Var<Real>, kNumGranularities>>& fam) {
  std::vector<LayerGates<Real>> out;
  out.reserve(fam.size());
  for (const auto& r : fam) {
    out.push_back({r[index_of(Granularity::Head)], r[index_of(Granularity::AttnNeuron)],
                   r[index_of(Granularity::AttnBlock)], r[index_of(Granularity::MlpHidden)],
                   r[index_of(Granularity::MlpOutput)], r[index_of(Granularity::MlpBlock)]});
  }
  return out;
}

// Differentiable gate values from log_alpha leaves. Sampled mode needs one
// noise value per gate in layout order; Binary mode is not differentiable
// and yields constants.
template <class Real>
std::vector<LayerGates<Real>> hard_concrete_gates(engine::Tape<Real>& tape, const GateLeaves<Real>& leaves,
                                                  const NodeLayout& layout, const GateConstants& c, GateMode mode,
                                                  std::span<const double> noise = {}) {
  namespace E = engine;
  if (mode == GateMode::Sampled && noise.size() != layout.size()) {
    throw std::invalid_argument("sampled gates need one noise value per gate");
  }
  std::vector<std::array<E::Var<Real>, kNumGranularities>> fam(leaves.size());
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    for (Granularity g : kAllGranularities) {
      const auto la = leaves[l][index_of(g)];
      E::Var<Real> m;
      if (mode == GateMode::Binary) {
        const auto& v = tape.value(la);
        E::Tensor<Real> bits(v.shape());
        for (std::size_t i = 0; i < v.size(); ++i) bits[i] = binarize(static_cast<double>(v[i]), c) ? Real{1} : Real{0};
        m = tape.constant(std::move(bits));
      } else {
        E::Var<Real> x = la;
        if (mode == GateMode::Sampled) {
          const std::size_t off = layout.offset(static_cast<int>(l), g);
          E::Tensor<Real> logit_u({layout.width(g)});
          for (std::size_t i = 0; i < logit_u.size(); ++i) {
            const double u = noise[off + i];
            logit_u[i] = static_cast<Real>(std::log(u) - std::log1p(-u));
          }
          x = E::scale(E::add(la, tape.constant(std::move(logit_u))), static_cast<Real>(1.0 / c.beta));
        }
        auto s = E::sigmoid(x);
        m = E::clamp01(E::add_scalar(E::scale(s, static_cast<Real>(c.zeta - c.gamma)), static_cast<Real>(c.gamma)));
      }
      fam[l][index_of(g)] = m;
    }
  }
  return assemble_gates(fam);
}

template <class Real>
std::vector<LayerGates<Real>> constant_gates(engine::Tape<Real>& tape, const NodeLayout& layout,
                                             std::span<const float> values) {
  if (values.size() != layout.size()) throw std::invalid_argument("gate value count does not match layout");
  const int L = layout.config().n_layers;
  std::vector<std::array<engine::Var<Real>, kNumGranularities>> fam(static_cast<std::size_t>(L));
  for (int l = 0; l < L; ++l) {
    for (Granularity g : kAllGranularities) {
      const std::size_t off = layout.offset(l, g);
      engine::Tensor<Real> t({layout.width(g)});
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<Real>(values[off + i]);
      fam[static_cast<std::size_t>(l)][index_of(g)] = tape.constant(std::move(t));
    }
  }
  return assemble_gates(fam);
}

// Corrupted-stream sites of one input, computed once and reused across steps.
template <class Real>
SiteValues<Real> corrupted_sites(const WeightCache<Real>& cache, std::span<const Token> corrupt) {
  engine::Tape<Real> tape;
  const auto bw = bind_weights(tape, cache, false);
  const auto fwd = forward_graph(tape, bw, cache.config(), corrupt, nullptr, corrupt.size() - 1);
  return detach_sites(tape, fwd.sites);
}

}  // namespace circuitscope
