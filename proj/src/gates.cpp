#include "circuitscope/gates.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace circuitscope {

namespace {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double clamp01(double x) { return std::min(1.0, std::max(0.0, x)); }

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::string mask_array_name(Granularity g, int layer) {
  return "mask/" + std::string(granularity_name(g)) + "/" + std::to_string(layer);
}

}  // namespace

void GateConstants::validate() const {
  if (!(beta > 0) || !(gamma < 0) || !(zeta > 1)) {
    throw ConfigError("gate constants require beta > 0, gamma < 0, zeta > 1");
  }
}

double GateConstants::threshold() const { return beta * std::log(-gamma / zeta); }

void to_json(nlohmann::json& j, const GateConstants& c) {
  j = {{"beta", c.beta}, {"gamma", c.gamma}, {"zeta", c.zeta}};
}

void from_json(const nlohmann::json& j, GateConstants& c) {
  c.beta = j.at("beta").get<double>();
  c.gamma = j.at("gamma").get<double>();
  c.zeta = j.at("zeta").get<double>();
}

Lambdas default_lambdas() {
  Lambdas l{};
  l[index_of(Granularity::Head)] = 3.0;
  l[index_of(Granularity::MlpHidden)] = 5.0;
  l[index_of(Granularity::MlpOutput)] = 1.5;
  l[index_of(Granularity::AttnNeuron)] = 1.5;
  l[index_of(Granularity::AttnBlock)] = 0.2;
  l[index_of(Granularity::MlpBlock)] = 0.1;
  return l;
}

double sample_gate(double log_alpha, const GateConstants& c, double u) {
  if (!(u > 0.0 && u < 1.0)) throw std::domain_error("gate noise u must lie in (0, 1)");
  const double s = sigmoid((std::log(u) - std::log1p(-u) + log_alpha) / c.beta);
  return clamp01(s * (c.zeta - c.gamma) + c.gamma);
}

double eval_gate(double log_alpha, const GateConstants& c) {
  return clamp01(sigmoid(log_alpha) * (c.zeta - c.gamma) + c.gamma);
}

double expected_l0(double log_alpha, const GateConstants& c) { return sigmoid(log_alpha - c.threshold()); }

bool binarize(double log_alpha, const GateConstants& c) { return log_alpha > c.threshold(); }

double gate_noise(std::uint64_t seed, std::uint64_t step, std::uint64_t index) {
  const std::uint64_t h = splitmix64(splitmix64(splitmix64(seed) ^ step) ^ index);
  // 53 random bits -> [0, 1)
  const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
  return std::clamp(u, 1e-6, 1.0 - 1e-6);
}

BinaryMask enforce_hierarchy(const BinaryMask& bits, const NodeLayout& layout) {
  if (bits.size() != layout.size()) {
    throw std::invalid_argument("mask has " + std::to_string(bits.size()) + " bits, layout has " +
                                std::to_string(layout.size()));
  }
  BinaryMask out = bits;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto parent = node_parent(layout.node(i));
    if (parent && out[layout.index(*parent)] == 0) out[i] = 0;
  }
  return out;
}

MaskSet::MaskSet(const ModelConfig& config, GateConstants constants, float init_log_alpha)
    : layout_(config), constants_(constants), log_alpha_(layout_.size(), init_log_alpha) {
  constants_.validate();
}

std::span<const float> MaskSet::family(int layer, Granularity g) const {
  return std::span<const float>(log_alpha_).subspan(layout_.offset(layer, g), layout_.width(g));
}

std::span<float> MaskSet::family(int layer, Granularity g) {
  return std::span<float>(log_alpha_).subspan(layout_.offset(layer, g), layout_.width(g));
}

BinaryMask MaskSet::binarized() const {
  BinaryMask bits(log_alpha_.size());
  for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = binarize(log_alpha_[i], constants_) ? 1 : 0;
  return bits;
}

Checkpoint MaskSet::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.meta = {{"kind", "masks"}, {"config", layout_.config()}, {"gate", constants_}};
  for (int l = 0; l < layout_.config().n_layers; ++l) {
    for (Granularity g : kAllGranularities) {
      const auto span = family(l, g);
      ckpt.arrays.push_back(
          {mask_array_name(g, l), engine::Tensor<float>::vector(std::vector<float>(span.begin(), span.end()))});
    }
  }
  return ckpt;
}

MaskSet MaskSet::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.value("kind", "") != "masks") throw CheckpointError("checkpoint does not hold masks");
  MaskSet masks(ckpt.meta.at("config").get<ModelConfig>(), ckpt.meta.at("gate").get<GateConstants>());
  for (int l = 0; l < masks.layout_.config().n_layers; ++l) {
    for (Granularity g : kAllGranularities) {
      const auto& t = ckpt.array(mask_array_name(g, l));
      auto dst = masks.family(l, g);
      if (t.size() != dst.size()) throw CheckpointError("mask array " + mask_array_name(g, l) + " has wrong size");
      std::copy(t.data().begin(), t.data().end(), dst.begin());
    }
  }
  return masks;
}

L0Penalty normalized_l0(const MaskSet& masks, const Lambdas& lambdas) {
  L0Penalty p;
  const auto& layout = masks.layout();
  for (Granularity g : kAllGranularities) {
    double acc = 0.0;
    for (int l = 0; l < layout.config().n_layers; ++l) {
      for (float la : masks.family(l, g)) acc += expected_l0(la, masks.constants());
    }
    const double mean = acc / static_cast<double>(layout.family_total(g));
    p.family_mean[index_of(g)] = mean;
    p.total += lambdas[index_of(g)] * mean;
  }
  return p;
}

void save_masks(const std::string& path, const MaskSet& masks) { write_checkpoint(path, masks.to_checkpoint()); }

MaskSet load_masks(const std::string& path) { return MaskSet::from_checkpoint(read_checkpoint(path)); }

}  // namespace circuitscope
