#include "circuitscope/model.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "circuitscope/checkpoint.hpp"

namespace circuitscope {

void ModelConfig::validate() const {
  if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_mlp <= 0 || vocab_size <= 0 || max_seq_len <= 0) {
    throw ConfigError("model config: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model (" + std::to_string(d_model) + ") not divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers}, {"n_heads", c.n_heads},       {"d_model", c.d_model},
       {"d_mlp", c.d_mlp},       {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_mlp = j.at("d_mlp").get<int>();
  c.vocab_size = j.value("vocab_size", 0);
  c.max_seq_len = j.value("max_seq_len", 64);
}

std::string_view granularity_name(Granularity g) {
  switch (g) {
    case Granularity::AttnBlock: return "attn_block";
    case Granularity::MlpBlock: return "mlp_block";
    case Granularity::Head: return "head";
    case Granularity::AttnNeuron: return "attn_neuron";
    case Granularity::MlpHidden: return "mlp_hidden";
    case Granularity::MlpOutput: return "mlp_output";
  }
  return "unknown";
}

std::string_view granularity_title(Granularity g) {
  switch (g) {
    case Granularity::AttnBlock: return "Attn Block";
    case Granularity::MlpBlock: return "MLP Block";
    case Granularity::Head: return "Attn Heads";
    case Granularity::AttnNeuron: return "Attn Neurons";
    case Granularity::MlpHidden: return "MLP Hidden";
    case Granularity::MlpOutput: return "MLP Output";
  }
  return "unknown";
}

Granularity parse_granularity(std::string_view name) {
  for (Granularity g : kAllGranularities) {
    if (granularity_name(g) == name) return g;
  }
  throw ConfigError("unknown granularity '" + std::string(name) + "'");
}

std::string to_string(const NodeId& n) {
  std::ostringstream os;
  os << granularity_name(n.granularity) << "(l=" << n.layer;
  if (n.head) os << ",h=" << *n.head;
  if (n.neuron) os << ",n=" << *n.neuron;
  os << ')';
  return os.str();
}

std::size_t family_width(const ModelConfig& c, Granularity g) {
  switch (g) {
    case Granularity::AttnBlock:
    case Granularity::MlpBlock: return 1;
    case Granularity::Head: return static_cast<std::size_t>(c.n_heads);
    case Granularity::AttnNeuron:
    case Granularity::MlpOutput: return static_cast<std::size_t>(c.d_model);
    case Granularity::MlpHidden: return static_cast<std::size_t>(c.d_mlp);
  }
  return 0;
}

NodeLayout::NodeLayout(const ModelConfig& config) : config_(config) {
  std::size_t acc = 0;
  for (Granularity g : kAllGranularities) {
    widths_[index_of(g)] = family_width(config, g);
    prefix_[index_of(g)] = acc;
    acc += widths_[index_of(g)];
  }
  per_layer_ = acc;
}

std::size_t NodeLayout::offset(int layer, Granularity g) const {
  return static_cast<std::size_t>(layer) * per_layer_ + prefix_[index_of(g)];
}

std::size_t NodeLayout::index(const NodeId& node) const {
  if (!node_valid(node, config_)) throw std::out_of_range("invalid node " + to_string(node));
  std::size_t i = offset(node.layer, node.granularity);
  if (node.head) i += static_cast<std::size_t>(*node.head);
  if (node.neuron) i += static_cast<std::size_t>(*node.neuron);
  return i;
}

NodeId NodeLayout::node(std::size_t index) const {
  if (index >= size()) throw std::out_of_range("node index " + std::to_string(index) + " out of range");
  const int layer = static_cast<int>(index / per_layer_);
  std::size_t rem = index % per_layer_;
  for (Granularity g : kAllGranularities) {
    const std::size_t w = widths_[index_of(g)];
    if (rem < w) {
      const int k = static_cast<int>(rem);
      switch (g) {
        case Granularity::AttnBlock: return NodeId::attn_block(layer);
        case Granularity::MlpBlock: return NodeId::mlp_block(layer);
        case Granularity::Head: return NodeId::head_of(layer, k);
        default: return NodeId::neuron_of(g, layer, k);
      }
    }
    rem -= w;
  }
  throw std::logic_error("unreachable node layout state");
}

std::vector<NodeId> enumerate_nodes(const ModelConfig& config) {
  config.validate();
  const NodeLayout layout(config);
  std::vector<NodeId> nodes;
  nodes.reserve(layout.size());
  for (std::size_t i = 0; i < layout.size(); ++i) nodes.push_back(layout.node(i));
  return nodes;
}

std::optional<NodeId> node_parent(const NodeId& node) {
  switch (node.granularity) {
    case Granularity::AttnBlock:
    case Granularity::MlpBlock: return std::nullopt;
    case Granularity::Head:
    case Granularity::AttnNeuron: return NodeId::attn_block(node.layer);
    case Granularity::MlpHidden:
    case Granularity::MlpOutput: return NodeId::mlp_block(node.layer);
  }
  return std::nullopt;
}

bool node_valid(const NodeId& node, const ModelConfig& config) {
  if (node.layer < 0 || node.layer >= config.n_layers) return false;
  const bool wants_head = node.granularity == Granularity::Head;
  const bool wants_neuron = node.granularity == Granularity::AttnNeuron ||
                            node.granularity == Granularity::MlpHidden ||
                            node.granularity == Granularity::MlpOutput;
  if (wants_head != node.head.has_value() || wants_neuron != node.neuron.has_value()) return false;
  const auto width = static_cast<int>(family_width(config, node.granularity));
  if (node.head && (*node.head < 0 || *node.head >= width)) return false;
  if (node.neuron && (*node.neuron < 0 || *node.neuron >= width)) return false;
  return true;
}

Model::Model(ModelConfig config, std::map<std::string, FloatTensor> weights)
    : config_(config), weights_(std::move(weights)) {
  validate();
}

std::string Model::layer_name(int layer, std::string_view part) {
  return "layer/" + std::to_string(layer) + "/" + std::string(part);
}

std::map<std::string, engine::Shape> Model::expected_shapes(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto m = static_cast<std::size_t>(c.d_mlp);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  std::map<std::string, engine::Shape> s;
  s["embed/token"] = {v, d};
  s["embed/position"] = {static_cast<std::size_t>(c.max_seq_len), d};
  for (int l = 0; l < c.n_layers; ++l) {
    s[layer_name(l, "ln1/gain")] = {d};
    s[layer_name(l, "ln1/bias")] = {d};
    for (const char* p : {"attn/wq", "attn/wk", "attn/wv", "attn/wo"}) s[layer_name(l, p)] = {d, d};
    for (const char* p : {"attn/bq", "attn/bk", "attn/bv", "attn/bo"}) s[layer_name(l, p)] = {d};
    s[layer_name(l, "ln2/gain")] = {d};
    s[layer_name(l, "ln2/bias")] = {d};
    s[layer_name(l, "mlp/w_in")] = {d, m};
    s[layer_name(l, "mlp/b_in")] = {m};
    s[layer_name(l, "mlp/w_out")] = {m, d};
    s[layer_name(l, "mlp/b_out")] = {d};
  }
  s["final_ln/gain"] = {d};
  s["final_ln/bias"] = {d};
  s["unembed/w"] = {d, v};
  s["unembed/b"] = {v};
  return s;
}

void Model::validate() const {
  config_.validate();
  const auto shapes = expected_shapes(config_);
  if (shapes.size() != weights_.size()) {
    throw ConfigError("model has " + std::to_string(weights_.size()) + " weights, expected " +
                      std::to_string(shapes.size()));
  }
  for (const auto& [name, shape] : shapes) {
    auto it = weights_.find(name);
    if (it == weights_.end()) throw ConfigError("model is missing weight '" + name + "'");
    if (it->second.shape() != shape) {
      throw ConfigError("weight '" + name + "' has shape " + engine::shape_string(it->second.shape()) +
                        ", expected " + engine::shape_string(shape));
    }
  }
}

Model Model::random(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0F, 1.0F);
  const float base_std = 0.02F;
  // Residual-writing projections are scaled down with depth, GPT-2 style.
  const float resid_std = base_std / std::sqrt(2.0F * static_cast<float>(config.n_layers));
  std::map<std::string, FloatTensor> weights;
  for (const auto& [name, shape] : expected_shapes(config)) {
    FloatTensor t(shape);
    const bool is_gain = name.ends_with("/gain");
    const bool is_bias = !is_gain && shape.size() == 1;
    if (is_gain) {
      std::fill(t.data().begin(), t.data().end(), 1.0F);
    } else if (!is_bias) {
      const bool resid = name.ends_with("attn/wo") || name.ends_with("mlp/w_out");
      const float s = resid ? resid_std : base_std;
      for (float& v : t.data()) v = normal(rng) * s;
    }
    weights.emplace(name, std::move(t));
  }
  return Model(config, std::move(weights));
}

Model Model::zeros(const ModelConfig& config) {
  std::map<std::string, FloatTensor> weights;
  for (const auto& [name, shape] : expected_shapes(config)) weights.emplace(name, FloatTensor(shape));
  return Model(config, std::move(weights));
}

const FloatTensor& Model::weight(const std::string& name) const {
  auto it = weights_.find(name);
  if (it == weights_.end()) throw std::out_of_range("no weight named '" + name + "'");
  return it->second;
}

FloatTensor& Model::mutable_weight(const std::string& name) {
  auto it = weights_.find(name);
  if (it == weights_.end()) throw std::out_of_range("no weight named '" + name + "'");
  return it->second;
}

void save_model(const std::string& path, const Model& model) {
  Checkpoint ckpt;
  ckpt.meta = {{"kind", "model"}, {"config", model.config()}};
  for (const auto& [name, t] : model.weights()) ckpt.arrays.push_back({name, t});
  write_checkpoint(path, ckpt);
}

Model load_model(const std::string& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  if (ckpt.meta.value("kind", "") != "model") throw CheckpointError("'" + path + "' is not a model checkpoint");
  const auto config = ckpt.meta.at("config").get<ModelConfig>();
  std::map<std::string, FloatTensor> weights;
  for (const auto& a : ckpt.arrays) weights.emplace(a.name, a.tensor);
  return Model(config, std::move(weights));
}

}  // namespace circuitscope
