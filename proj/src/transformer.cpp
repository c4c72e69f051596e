#include "circuitscope/transformer.hpp"

namespace circuitscope {

ActivationRecord forward_layers(const Model& model, std::span<const Token> tokens) {
  const ModelConfig& c = model.config();
  const WeightCache<float> cache(model);
  engine::Tape<float> tape;
  const auto bw = bind_weights(tape, cache, /*trainable=*/false);
  const auto fwd = forward_graph(tape, bw, c, tokens);

  ActivationRecord rec;
  const std::size_t T = tokens.size();
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  const std::size_t dh = static_cast<std::size_t>(c.d_head());
  for (std::size_t l = 0; l < fwd.sites.size(); ++l) {
    const auto& s = fwd.sites[l];
    rec.sites.push_back({tape.value(s.head_z), tape.value(s.attn_out), tape.value(s.mlp_hidden), tape.value(s.mlp_out)});
    rec.attn_block_out.push_back(tape.value(fwd.attn_contrib[l]));
    rec.mlp_block_out.push_back(tape.value(fwd.mlp_contrib[l]));

    const auto& z = tape.value(s.head_z);
    const auto& wo = model.weight(Model::layer_name(static_cast<int>(l), "attn/wo"));
    std::vector<FloatTensor> per_head;
    for (int h = 0; h < c.n_heads; ++h) {
      FloatTensor o({T, d});
      const std::size_t base = static_cast<std::size_t>(h) * dh;
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t k = 0; k < dh; ++k) {
          const float zv = z.at(t, base + k);
          for (std::size_t j = 0; j < d; ++j) o.at(t, j) += zv * wo.at(base + k, j);
        }
      }
      per_head.push_back(std::move(o));
    }
    rec.head_outputs.push_back(std::move(per_head));
  }
  rec.logits = tape.value(fwd.logits);
  return rec;
}

}  // namespace circuitscope
