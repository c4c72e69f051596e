#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "circuitscope/engine/tensor.hpp"

namespace circuitscope {

using Token = std::int32_t;
using Tokens = std::vector<Token>;
using FloatTensor = engine::Tensor<float>;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 64;
  int d_mlp = 256;
  int vocab_size = 0;
  int max_seq_len = 64;

  int d_head() const { return d_model / n_heads; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// The six gateable node families. Enumeration order inside a layer follows
// this declaration order.
enum class Granularity : std::uint8_t { AttnBlock, MlpBlock, Head, AttnNeuron, MlpHidden, MlpOutput };

inline constexpr std::size_t kNumGranularities = 6;
inline constexpr std::array<Granularity, kNumGranularities> kAllGranularities = {
    Granularity::AttnBlock, Granularity::MlpBlock,  Granularity::Head,
    Granularity::AttnNeuron, Granularity::MlpHidden, Granularity::MlpOutput};

std::string_view granularity_name(Granularity g);
std::string_view granularity_title(Granularity g);
Granularity parse_granularity(std::string_view name);

inline std::size_t index_of(Granularity g) { return static_cast<std::size_t>(g); }

struct NodeId {
  Granularity granularity = Granularity::AttnBlock;
  int layer = 0;
  std::optional<int> head;
  std::optional<int> neuron;

  static NodeId attn_block(int layer) { return {Granularity::AttnBlock, layer, {}, {}}; }
  static NodeId mlp_block(int layer) { return {Granularity::MlpBlock, layer, {}, {}}; }
  static NodeId head_of(int layer, int h) { return {Granularity::Head, layer, h, {}}; }
  static NodeId neuron_of(Granularity g, int layer, int n) { return {g, layer, {}, n}; }

  friend bool operator==(const NodeId&, const NodeId&) = default;
};

std::string to_string(const NodeId& n);

// Number of gates of family g in one layer.
std::size_t family_width(const ModelConfig& c, Granularity g);

// Flat index layout of every gate: by layer, then family, then index.
class NodeLayout {
 public:
  NodeLayout() = default;
  explicit NodeLayout(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::size_t size() const { return per_layer_ * static_cast<std::size_t>(config_.n_layers); }
  std::size_t per_layer() const { return per_layer_; }

  std::size_t offset(int layer, Granularity g) const;
  std::size_t width(Granularity g) const { return widths_[index_of(g)]; }
  // Gates of family g summed over all layers.
  std::size_t family_total(Granularity g) const { return width(g) * static_cast<std::size_t>(config_.n_layers); }

  std::size_t index(const NodeId& node) const;
  NodeId node(std::size_t index) const;

  friend bool operator==(const NodeLayout&, const NodeLayout&) = default;

 private:
  ModelConfig config_;
  std::array<std::size_t, kNumGranularities> widths_{};
  std::array<std::size_t, kNumGranularities> prefix_{};
  std::size_t per_layer_ = 0;
};

std::vector<NodeId> enumerate_nodes(const ModelConfig& config);
std::optional<NodeId> node_parent(const NodeId& node);
bool node_valid(const NodeId& node, const ModelConfig& config);

// Frozen transformer weights. Names follow "layer/<l>/<part>/<param>".
class Model {
 public:
  Model() = default;
  Model(ModelConfig config, std::map<std::string, FloatTensor> weights);

  static Model random(const ModelConfig& config, std::uint64_t seed);
  static Model zeros(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const FloatTensor& weight(const std::string& name) const;
  FloatTensor& mutable_weight(const std::string& name);
  const std::map<std::string, FloatTensor>& weights() const { return weights_; }
  std::map<std::string, FloatTensor>& mutable_weights() { return weights_; }

  static std::string layer_name(int layer, std::string_view part);
  static std::map<std::string, engine::Shape> expected_shapes(const ModelConfig& config);
  void validate() const;

  friend bool operator==(const Model&, const Model&) = default;

 private:
  ModelConfig config_;
  std::map<std::string, FloatTensor> weights_;
};

void save_model(const std::string& path, const Model& model);
Model load_model(const std::string& path);

}  // namespace circuitscope
