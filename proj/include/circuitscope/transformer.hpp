#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "circuitscope/engine/ops.hpp"
#include "circuitscope/model.hpp"

namespace circuitscope {

// Activations at the four distinct gate sites of one layer:
//   head_z     [T, d_model]  concatenated per-head attention outputs (before W_O)
//   attn_out   [T, d_model]  attention output after W_O and bias (AttnNeuron/AttnBlock site)
//   mlp_hidden [T, d_mlp]    post-GELU hidden activations
//   mlp_out    [T, d_model]  MLP output after W_out and bias (MlpOutput/MlpBlock site)
template <class T>
struct LayerSites {
  T head_z;
  T attn_out;
  T mlp_hidden;
  T mlp_out;
};

template <class Real>
using SharedTensor = std::shared_ptr<const engine::Tensor<Real>>;

template <class Real>
using SiteValues = std::vector<LayerSites<SharedTensor<Real>>>;

// Gate values of one layer, one Var per family (block gates have size 1).
template <class Real>
struct LayerGates {
  engine::Var<Real> head;
  engine::Var<Real> attn_neuron;
  engine::Var<Real> attn_block;
  engine::Var<Real> mlp_hidden;
  engine::Var<Real> mlp_output;
  engine::Var<Real> mlp_block;
};

// Model weights converted to Real once and shared between tapes.
template <class Real>
class WeightCache {
 public:
  WeightCache() = default;
  explicit WeightCache(const Model& model) : config_(model.config()) {
    for (const auto& [name, t] : model.weights()) {
      values_.emplace_back(name, std::make_shared<const engine::Tensor<Real>>(t.template cast<Real>()));
    }
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<std::pair<std::string, SharedTensor<Real>>>& values() const { return values_; }

  SharedTensor<Real> get(const std::string& name) const {
    for (const auto& [n, v] : values_) {
      if (n == name) return v;
    }
    throw std::out_of_range("no weight named '" + name + "'");
  }

 private:
  ModelConfig config_;
  std::vector<std::pair<std::string, SharedTensor<Real>>> values_;
};

template <class Real>
struct BoundLayer {
  engine::Var<Real> ln1_gain, ln1_bias;
  engine::Var<Real> wq, bq, wk, bk, wv, bv, wo, bo;
  engine::Var<Real> ln2_gain, ln2_bias;
  engine::Var<Real> w_in, b_in, w_out, b_out;
};

template <class Real>
struct BoundWeights {
  engine::Var<Real> token_embed, pos_embed;
  std::vector<BoundLayer<Real>> layers;
  engine::Var<Real> final_gain, final_bias;
  engine::Var<Real> unembed_w, unembed_b;
  // Every bound weight by name, for gradient lookup during base training.
  std::vector<std::pair<std::string, engine::Var<Real>>> by_name;
};

// Places cached weights on a tape, as frozen constants or trainable
// parameters.
template <class Real>
BoundWeights<Real> bind_weights(engine::Tape<Real>& tape, const WeightCache<Real>& cache, bool trainable) {
  BoundWeights<Real> bw;
  auto bind = [&](const std::string& name) {
    auto v = trainable ? tape.parameter(cache.get(name)) : tape.constant(cache.get(name));
    bw.by_name.emplace_back(name, v);
    return v;
  };
  const ModelConfig& c = cache.config();
  bw.token_embed = bind("embed/token");
  bw.pos_embed = bind("embed/position");
  for (int l = 0; l < c.n_layers; ++l) {
    BoundLayer<Real> bl;
    bl.ln1_gain = bind(Model::layer_name(l, "ln1/gain"));
    bl.ln1_bias = bind(Model::layer_name(l, "ln1/bias"));
    bl.wq = bind(Model::layer_name(l, "attn/wq"));
    bl.bq = bind(Model::layer_name(l, "attn/bq"));
    bl.wk = bind(Model::layer_name(l, "attn/wk"));
    bl.bk = bind(Model::layer_name(l, "attn/bk"));
    bl.wv = bind(Model::layer_name(l, "attn/wv"));
    bl.bv = bind(Model::layer_name(l, "attn/bv"));
    bl.wo = bind(Model::layer_name(l, "attn/wo"));
    bl.bo = bind(Model::layer_name(l, "attn/bo"));
    bl.ln2_gain = bind(Model::layer_name(l, "ln2/gain"));
    bl.ln2_bias = bind(Model::layer_name(l, "ln2/bias"));
    bl.w_in = bind(Model::layer_name(l, "mlp/w_in"));
    bl.b_in = bind(Model::layer_name(l, "mlp/b_in"));
    bl.w_out = bind(Model::layer_name(l, "mlp/w_out"));
    bl.b_out = bind(Model::layer_name(l, "mlp/b_out"));
    bw.layers.push_back(bl);
  }
  bw.final_gain = bind("final_ln/gain");
  bw.final_bias = bind("final_ln/bias");
  bw.unembed_w = bind("unembed/w");
  bw.unembed_b = bind("unembed/b");
  return bw;
}

// Corrupted-stream activations plus gate values to mix against them. When a
// forward runs with a patch, every gate site is interpolated finest family
// first: Head -> AttnNeuron -> AttnBlock and MlpHidden -> MlpOutput -> MlpBlock.
template <class Real>
struct StreamPatch {
  const SiteValues<Real>* corrupt = nullptr;
  const std::vector<LayerGates<Real>>* gates = nullptr;
};

template <class Real>
struct ForwardResult {
  std::vector<LayerSites<engine::Var<Real>>> sites;
  // Contributions written to the residual stream, after gating.
  std::vector<engine::Var<Real>> attn_contrib;
  std::vector<engine::Var<Real>> mlp_contrib;
  engine::Var<Real> logits;
};

inline void check_tokens(const ModelConfig& c, std::span<const Token> tokens) {
  if (tokens.empty()) throw std::invalid_argument("empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(c.max_seq_len)) {
    throw std::invalid_argument("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                                std::to_string(c.max_seq_len));
  }
  for (Token t : tokens) {
    if (t < 0 || t >= c.vocab_size) throw std::out_of_range("token id " + std::to_string(t) + " out of range");
  }
}

// Pre-norm decoder-only forward. `readout_row` restricts the final logits to
// one position; otherwise logits cover every position.
template <class Real>
ForwardResult<Real> forward_graph(engine::Tape<Real>& tape, const BoundWeights<Real>& w, const ModelConfig& c,
                                  std::span<const Token> tokens, const std::type_identity_t<StreamPatch<Real>>* patch = nullptr,
                                  std::optional<std::size_t> readout_row = std::nullopt) {
  namespace E = engine;
  check_tokens(c, tokens);
  const std::size_t T = tokens.size();
  const std::size_t H = static_cast<std::size_t>(c.n_heads);
  const std::size_t dh = static_cast<std::size_t>(c.d_head());
  const Real attn_scale = Real{1} / std::sqrt(static_cast<Real>(dh));
  if (patch != nullptr) {
    if (patch->corrupt == nullptr || patch->gates == nullptr ||
        patch->corrupt->size() != static_cast<std::size_t>(c.n_layers) ||
        patch->gates->size() != static_cast<std::size_t>(c.n_layers)) {
      throw std::invalid_argument("stream patch does not cover every layer");
    }
  }

  std::vector<Token> positions(T);
  for (std::size_t i = 0; i < T; ++i) positions[i] = static_cast<Token>(i);

  ForwardResult<Real> out;
  auto x = E::add(E::gather_rows(w.token_embed, tokens), E::gather_rows(w.pos_embed, std::span<const Token>(positions)));

  for (int l = 0; l < c.n_layers; ++l) {
    const auto& L = w.layers[static_cast<std::size_t>(l)];
    const LayerSites<SharedTensor<Real>>* corr = patch ? &(*patch->corrupt)[static_cast<std::size_t>(l)] : nullptr;
    const LayerGates<Real>* gates = patch ? &(*patch->gates)[static_cast<std::size_t>(l)] : nullptr;
    LayerSites<E::Var<Real>> site;

    auto h = E::layer_norm(x, L.ln1_gain, L.ln1_bias);
    auto q = E::add_bias(E::matmul(h, L.wq), L.bq);
    auto k = E::add_bias(E::matmul(h, L.wk), L.bk);
    auto v = E::add_bias(E::matmul(h, L.wv), L.bv);
    std::vector<E::Var<Real>> heads;
    heads.reserve(H);
    for (std::size_t hd = 0; hd < H; ++hd) {
      auto qh = E::slice_cols(q, hd * dh, (hd + 1) * dh);
      auto kh = E::slice_cols(k, hd * dh, (hd + 1) * dh);
      auto vh = E::slice_cols(v, hd * dh, (hd + 1) * dh);
      auto probs = E::softmax_rows(E::scale(E::matmul_nt(qh, kh), attn_scale), /*causal=*/true);
      heads.push_back(E::matmul(probs, vh));
    }
    site.head_z = E::concat_cols(heads);
    auto z = site.head_z;
    if (patch) {
      auto z_corr = tape.constant(corr->head_z);
      z = E::interpolate(z, z_corr, E::repeat_each(gates->head, dh));
    }
    site.attn_out = E::add_bias(E::matmul(z, L.wo), L.bo);
    auto attn = site.attn_out;
    if (patch) {
      auto a_corr = tape.constant(corr->attn_out);
      attn = E::interpolate(attn, a_corr, gates->attn_neuron);
      attn = E::interpolate(attn, a_corr, gates->attn_block);
    }
    out.attn_contrib.push_back(attn);
    x = E::add(x, attn);

    auto h2 = E::layer_norm(x, L.ln2_gain, L.ln2_bias);
    site.mlp_hidden = E::gelu(E::add_bias(E::matmul(h2, L.w_in), L.b_in));
    auto hid = site.mlp_hidden;
    if (patch) {
      hid = E::interpolate(hid, tape.constant(corr->mlp_hidden), gates->mlp_hidden);
    }
    site.mlp_out = E::add_bias(E::matmul(hid, L.w_out), L.b_out);
    auto mlp = site.mlp_out;
    if (patch) {
      auto m_corr = tape.constant(corr->mlp_out);
      mlp = E::interpolate(mlp, m_corr, gates->mlp_output);
      mlp = E::interpolate(mlp, m_corr, gates->mlp_block);
    }
    out.mlp_contrib.push_back(mlp);
    x = E::add(x, mlp);
    out.sites.push_back(site);
  }

  if (readout_row) {
    if (*readout_row >= T) throw std::out_of_range("readout row outside sequence");
    x = E::slice_rows(x, *readout_row, *readout_row + 1);
  }
  auto hf = E::layer_norm(x, w.final_gain, w.final_bias);
  out.logits = E::add_bias(E::matmul(hf, w.unembed_w), w.unembed_b);
  return out;
}

// Site values of a finished forward, detached from the tape.
template <class Real>
SiteValues<Real> detach_sites(const engine::Tape<Real>& tape, const std::vector<LayerSites<engine::Var<Real>>>& sites) {
  SiteValues<Real> out;
  out.reserve(sites.size());
  for (const auto& s : sites) {
    out.push_back({tape.value_ptr(s.head_z), tape.value_ptr(s.attn_out), tape.value_ptr(s.mlp_hidden),
                   tape.value_ptr(s.mlp_out)});
  }
  return out;
}

// Plain, ungated forward over every position.
struct ActivationRecord {
  std::vector<LayerSites<FloatTensor>> sites;
  // Per-head contribution projected through W_O (no bias), [layer][head] -> [T, d_model].
  std::vector<std::vector<FloatTensor>> head_outputs;
  std::vector<FloatTensor> attn_block_out;
  std::vector<FloatTensor> mlp_block_out;
  FloatTensor logits;
};

ActivationRecord forward_layers(const Model& model, std::span<const Token> tokens);

}  // namespace circuitscope
