#include "circuitscope/twostream.hpp"

namespace circuitscope {

GateMode parse_gate_mode(std::string_view name) {
  if (name == "sampled") return GateMode::Sampled;
  if (name == "deterministic") return GateMode::Deterministic;
  if (name == "binary") return GateMode::Binary;
  throw std::invalid_argument("unknown gate mode '" + std::string(name) + "'");
}

FloatTensor interpolate(const FloatTensor& clean, const FloatTensor& corrupt, std::span<const float> m) {
  engine::Tape<float> tape;
  auto c = tape.constant(clean);
  auto r = tape.constant(corrupt);
  auto g = tape.constant(FloatTensor::vector(std::vector<float>(m.begin(), m.end())));
  return tape.value(engine::interpolate(c, r, g));
}

std::vector<double> step_noise(std::size_t gates, std::uint64_t seed, std::uint64_t step) {
  std::vector<double> u(gates);
  for (std::size_t i = 0; i < gates; ++i) u[i] = gate_noise(seed, step, i);
  return u;
}

std::vector<float> gate_values(const MaskSet& masks, GateMode mode, std::span<const double> noise) {
  if (mode == GateMode::Sampled && noise.size() != masks.size()) {
    throw std::invalid_argument("sampled gates need one noise value per gate");
  }
  const auto& c = masks.constants();
  std::vector<float> out(masks.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double la = masks[i];
    switch (mode) {
      case GateMode::Sampled: out[i] = static_cast<float>(sample_gate(la, c, noise[i])); break;
      case GateMode::Deterministic: out[i] = static_cast<float>(eval_gate(la, c)); break;
      case GateMode::Binary: out[i] = binarize(la, c) ? 1.0F : 0.0F; break;
    }
  }
  return out;
}

namespace {

std::vector<LayerSites<FloatTensor>> values_of(const engine::Tape<float>& tape,
                                               const std::vector<LayerSites<engine::Var<float>>>& sites) {
  std::vector<LayerSites<FloatTensor>> out;
  for (const auto& s : sites) {
    out.push_back({tape.value(s.head_z), tape.value(s.attn_out), tape.value(s.mlp_hidden), tape.value(s.mlp_out)});
  }
  return out;
}

}  // namespace

StreamState run_two_stream_with_gates(const Model& model, std::span<const float> gates, std::span<const Token> clean,
                                      std::span<const Token> corrupt) {
  if (clean.size() != corrupt.size()) {
    throw std::invalid_argument("clean and corrupted inputs differ in length (" + std::to_string(clean.size()) +
                                " vs " + std::to_string(corrupt.size()) + ")");
  }
  const NodeLayout layout(model.config());
  const WeightCache<float> cache(model);
  engine::Tape<float> tape;
  const auto bw = bind_weights(tape, cache, false);

  const auto corr = forward_graph(tape, bw, model.config(), corrupt);
  const auto base = forward_graph(tape, bw, model.config(), clean);
  const SiteValues<float> corr_sites = detach_sites(tape, corr.sites);
  const auto gate_vars = constant_gates(tape, layout, gates);
  const StreamPatch<float> patch{&corr_sites, &gate_vars};
  const auto mixed = forward_graph(tape, bw, model.config(), clean, &patch);

  StreamState st;
  st.clean = values_of(tape, mixed.sites);
  st.corrupted = values_of(tape, corr.sites);
  st.base = values_of(tape, base.sites);
  st.clean_logits = tape.value(mixed.logits);
  st.corrupted_logits = tape.value(corr.logits);
  st.base_logits = tape.value(base.logits);
  return st;
}

StreamState run_two_stream(const Model& model, const MaskSet& masks, std::span<const Token> clean,
                           std::span<const Token> corrupt, GateMode mode, std::span<const double> noise) {
  if (masks.layout().config() != model.config()) throw std::invalid_argument("mask set does not match model config");
  const auto gates = gate_values(masks, mode, noise);
  return run_two_stream_with_gates(model, gates, clean, corrupt);
}

}  // namespace circuitscope
