#include "circuitscope/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace circuitscope {

double gt_score(std::span<const double> year_probs, int y_start, int margin) {
  if (year_probs.size() != 100) throw std::invalid_argument("gt_score expects 100 year probabilities");
  if (y_start < 0 || y_start > 99) throw std::out_of_range("y_start outside 00..99");
  if (margin < 0) throw std::invalid_argument("gt_score margin must be non-negative");
  double above = 0.0, below = 0.0;
  for (int y = 0; y < 100; ++y) {
    if (y > y_start + margin) above += year_probs[static_cast<std::size_t>(y)];
    if (y < y_start - margin) below += year_probs[static_cast<std::size_t>(y)];
  }
  return above - below;
}

double logit_difference(std::span<const float> logits, Token good, Token bad) {
  if (good < 0 || bad < 0 || static_cast<std::size_t>(good) >= logits.size() ||
      static_cast<std::size_t>(bad) >= logits.size()) {
    throw std::out_of_range("logit_difference: token outside vocabulary");
  }
  return static_cast<double>(logits[static_cast<std::size_t>(good)]) -
         static_cast<double>(logits[static_cast<std::size_t>(bad)]);
}

double mean(std::span<const double> values) {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double kl_divergence(std::span<const double> p, std::span<const double> q, double floor) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    kl += p[i] * (std::log(p[i]) - std::log(std::max(q[i], floor)));
  }
  return std::max(kl, 0.0);
}

std::vector<double> softmax(std::span<const float> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

double task_score(const TaskExample& ex, std::span<const float> logits, int gt_margin) {
  switch (ex.task) {
    case TaskKind::GreaterThan: {
      const auto probs = softmax(logits);
      const auto& vocab = Vocabulary::standard();
      std::vector<double> years(100);
      for (int y = 0; y < 100; ++y) years[static_cast<std::size_t>(y)] = probs[static_cast<std::size_t>(vocab.year_token(y))];
      return gt_score(years, ex.spec.y_start, gt_margin);
    }
    case TaskKind::Ioi: return ioi_score(logits, ex.spec.io, ex.spec.s);
    case TaskKind::GenderedPronoun: return gp_score(logits, ex.spec.consistent, ex.spec.inconsistent);
  }
  return 0.0;
}

CircuitSize circuit_size(const BinaryMask& bits, const ModelConfig& c) {
  const NodeLayout layout(c);
  if (bits.size() != layout.size()) throw std::invalid_argument("circuit_size: mask size mismatch");
  CircuitSize out;
  const double d = c.d_model;
  const double m = c.d_mlp;
  const double attn_qkv = 3.0 * (d * d + d);  // input side, owned by heads
  const double attn_o = d * d;                // head rows x output neurons
  const double mlp_in = d * m + m;            // owned by hidden neurons
  const double mlp_o = m * d;                 // hidden rows x output neurons
  for (int l = 0; l < c.n_layers; ++l) {
    std::array<double, kNumGranularities> frac{};
    for (Granularity g : kAllGranularities) {
      const std::size_t off = layout.offset(l, g);
      const std::size_t w = layout.width(g);
      std::size_t on = 0;
      for (std::size_t i = 0; i < w; ++i) on += bits[off + i] ? 1 : 0;
      out.active[index_of(g)] += on;
      out.total[index_of(g)] += w;
      frac[index_of(g)] = static_cast<double>(on) / static_cast<double>(w);
    }
    const auto f = [&](Granularity g) { return frac[index_of(g)]; };
    const double attn_full = attn_qkv + attn_o + d + 2.0 * d;
    const double mlp_full = mlp_in + mlp_o + d + 2.0 * d;
    out.total_parameters += attn_full + mlp_full;
    out.parameter_count += f(Granularity::AttnBlock) *
                           (attn_qkv * f(Granularity::Head) + attn_o * f(Granularity::Head) * f(Granularity::AttnNeuron) +
                            d * f(Granularity::AttnNeuron) + 2.0 * d);
    out.parameter_count += f(Granularity::MlpBlock) *
                           (mlp_in * f(Granularity::MlpHidden) + mlp_o * f(Granularity::MlpHidden) * f(Granularity::MlpOutput) +
                            d * f(Granularity::MlpOutput) + 2.0 * d);
  }
  for (Granularity g : kAllGranularities) {
    const std::size_t i = index_of(g);
    out.sparsity[i] = 1.0 - static_cast<double>(out.active[i]) / static_cast<double>(out.total[i]);
  }
  if (out.parameter_count > 0.0) out.compression_ratio = out.total_parameters / out.parameter_count;
  return out;
}

EdgeCount edge_count(const BinaryMask& bits, const ModelConfig& c) {
  const NodeLayout layout(c);
  if (bits.size() != layout.size()) throw std::invalid_argument("edge_count: mask size mismatch");
  const std::size_t H = static_cast<std::size_t>(c.n_heads);
  const std::size_t L = static_cast<std::size_t>(c.n_layers);
  // Running counts of (all, active) nodes available as upstream sources.
  std::size_t up_all = 1, up_active = 1;  // EMB
  EdgeCount e;
  for (std::size_t l = 0; l < L; ++l) {
    const int li = static_cast<int>(l);
    const bool block_on = bits[layout.offset(li, Granularity::AttnBlock)] != 0;
    std::size_t heads_on = 0;
    for (std::size_t h = 0; h < H; ++h) {
      if (block_on && bits[layout.offset(li, Granularity::Head) + h]) ++heads_on;
    }
    e.total += H * up_all;
    e.active += heads_on * up_active;
    const bool mlp_on = bits[layout.offset(li, Granularity::MlpBlock)] != 0;
    e.total += up_all + H;
    if (mlp_on) e.active += up_active + heads_on;
    up_all += H + 1;
    up_active += heads_on + (mlp_on ? 1 : 0);
  }
  e.total += up_all;  // OUT
  e.active += up_active;
  e.compression = e.total == 0 ? 0.0 : 1.0 - static_cast<double>(e.active) / static_cast<double>(e.total);
  return e;
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::optional<double> optional_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

void to_json(nlohmann::json& j, const MetricReport& r) {
  nlohmann::json families = nlohmann::json::object();
  for (Granularity g : kAllGranularities) {
    const std::size_t i = index_of(g);
    families[std::string(granularity_name(g))] = {
        {"active", r.size.active[i]}, {"total", r.size.total[i]}, {"sparsity", r.size.sparsity[i]}};
  }
  j = {{"schema_version", kMetricSchemaVersion},
       {"gt_score", optional_json(r.gt_score)},
       {"ioi_score", optional_json(r.ioi_score)},
       {"gp_score", optional_json(r.gp_score)},
       {"kl_divergence", r.kl_divergence},
       {"kl_floor", kKlFloor},
       {"examples", r.examples},
       {"families", families},
       {"parameter_count", r.size.parameter_count},
       {"total_parameters", r.size.total_parameters},
       {"compression_ratio", optional_json(r.size.compression_ratio)},
       {"active_edges", r.edges.active},
       {"total_edges", r.edges.total},
       {"edge_compression", r.edges.compression}};
}

void from_json(const nlohmann::json& j, MetricReport& r) {
  if (j.value("schema_version", 0) != kMetricSchemaVersion) throw std::invalid_argument("unsupported metric schema");
  r.gt_score = optional_from(j, "gt_score");
  r.ioi_score = optional_from(j, "ioi_score");
  r.gp_score = optional_from(j, "gp_score");
  r.kl_divergence = j.at("kl_divergence").get<double>();
  r.examples = j.value("examples", std::size_t{0});
  const auto& fam = j.at("families");
  for (Granularity g : kAllGranularities) {
    const auto& f = fam.at(std::string(granularity_name(g)));
    const std::size_t i = index_of(g);
    r.size.active[i] = f.at("active").get<std::size_t>();
    r.size.total[i] = f.at("total").get<std::size_t>();
    r.size.sparsity[i] = f.at("sparsity").get<double>();
  }
  r.size.parameter_count = j.at("parameter_count").get<double>();
  r.size.total_parameters = j.at("total_parameters").get<double>();
  r.size.compression_ratio = optional_from(j, "compression_ratio");
  r.edges.active = j.at("active_edges").get<std::size_t>();
  r.edges.total = j.at("total_edges").get<std::size_t>();
  r.edges.compression = j.at("edge_compression").get<double>();
}

}  // namespace circuitscope
