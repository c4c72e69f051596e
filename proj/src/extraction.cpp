#include "circuitscope/extraction.hpp"

#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "circuitscope/parallel.hpp"

namespace circuitscope {

BinaryMask extract(const MaskSet& masks) { return enforce_hierarchy(masks.binarized(), masks.layout()); }

BinaryMask full_circuit(const ModelConfig& config) { return BinaryMask(NodeLayout(config).size(), 1); }

CircuitEvaluator::CircuitEvaluator(const Model& model, const std::vector<TaskExample>& examples, int gt_margin)
    : model_(model), examples_(examples), gt_margin_(gt_margin), layout_(model.config()), cache_(model) {
  prepared_.resize(examples.size());
  parallel_for(examples.size(), [&](std::size_t i) {
    const auto& ex = examples_[i];
    if (ex.clean.size() != ex.corrupt.size()) {
      throw std::invalid_argument("clean and corrupted inputs differ in length (" + std::to_string(ex.clean.size()) +
                                  " vs " + std::to_string(ex.corrupt.size()) + ")");
    }
    Prepared p;
    p.corrupt = corrupted_sites(cache_, ex.corrupt);
    engine::Tape<float> tape;
    const auto bw = bind_weights(tape, cache_, false);
    const auto fwd = forward_graph(tape, bw, model_.config(), ex.clean, nullptr, ex.answer_position);
    const auto& logits = tape.value(fwd.logits);
    p.base_logits.assign(logits.data().begin(), logits.data().end());
    p.base_probs = softmax(p.base_logits);
    p.base_score = task_score(ex, p.base_logits, gt_margin_);
    prepared_[i] = std::move(p);
  });
}

CircuitEvaluator::Result CircuitEvaluator::run(std::span<const float> gates) const {
  if (gates.size() != layout_.size()) throw std::invalid_argument("gate value count does not match layout");
  Result r;
  r.per_example_kl.resize(examples_.size());
  r.per_example_score.resize(examples_.size());
  parallel_for(examples_.size(), [&](std::size_t i) {
    const auto& ex = examples_[i];
    engine::Tape<float> tape;
    const auto bw = bind_weights(tape, cache_, false);
    const auto g = constant_gates<float>(tape, layout_, gates);
    const StreamPatch<float> patch{&prepared_[i].corrupt, &g};
    const auto fwd = forward_graph(tape, bw, model_.config(), ex.clean, &patch, ex.answer_position);
    const auto& logits = tape.value(fwd.logits).data();
    r.per_example_kl[i] = kl_divergence(prepared_[i].base_probs, softmax(logits));
    r.per_example_score[i] = task_score(ex, logits, gt_margin_);
  });
  r.kl = mean(r.per_example_kl);
  r.score = mean(r.per_example_score);
  return r;
}

CircuitEvaluator::Result CircuitEvaluator::run(const BinaryMask& bits) const {
  if (bits.size() != layout_.size()) throw std::invalid_argument("circuit size does not match layout");
  std::vector<float> gates(bits.size());
  for (std::size_t i = 0; i < bits.size(); ++i) gates[i] = bits[i] ? 1.0F : 0.0F;
  return run(gates);
}

CircuitEvaluator::Result CircuitEvaluator::base() const {
  Result r;
  r.per_example_kl.assign(examples_.size(), 0.0);
  for (const auto& p : prepared_) r.per_example_score.push_back(p.base_score);
  r.score = mean(r.per_example_score);
  return r;
}

namespace {

MetricReport to_report(const CircuitEvaluator::Result& r, const BinaryMask& bits, const ModelConfig& config,
                       const std::vector<TaskExample>& examples) {
  MetricReport m;
  m.kl_divergence = r.kl;
  m.examples = examples.size();
  if (!examples.empty()) {
    switch (examples.front().task) {
      case TaskKind::GreaterThan: m.gt_score = r.score; break;
      case TaskKind::Ioi: m.ioi_score = r.score; break;
      case TaskKind::GenderedPronoun: m.gp_score = r.score; break;
    }
  }
  m.size = circuit_size(bits, config);
  m.edges = edge_count(bits, config);
  return m;
}

}  // namespace

MetricReport evaluate_circuit(const Model& model, const BinaryMask& bits, const std::vector<TaskExample>& examples,
                              int gt_margin) {
  const NodeLayout layout(model.config());
  if (bits.size() != layout.size()) throw std::invalid_argument("circuit size does not match layout");
  if (enforce_hierarchy(bits, layout) != bits) throw std::invalid_argument("circuit violates mask hierarchy");
  const CircuitEvaluator ev(model, examples, gt_margin);
  return to_report(ev.run(bits), bits, model.config(), examples);
}

MetricReport evaluate_base(const Model& model, const std::vector<TaskExample>& examples, int gt_margin) {
  const CircuitEvaluator ev(model, examples, gt_margin);
  return to_report(ev.base(), full_circuit(model.config()), model.config(), examples);
}

std::vector<std::array<std::size_t, kNumGranularities>> CircuitReport::layer_counts() const {
  const NodeLayout layout(model_config);
  if (bits.size() != layout.size()) throw std::invalid_argument("report bits do not match model config");
  std::vector<std::array<std::size_t, kNumGranularities>> out(static_cast<std::size_t>(model_config.n_layers));
  for (int l = 0; l < model_config.n_layers; ++l) {
    for (Granularity g : kAllGranularities) {
      const std::size_t off = layout.offset(l, g);
      std::size_t n = 0;
      for (std::size_t i = 0; i < layout.width(g); ++i) n += bits[off + i] ? 1 : 0;
      out[static_cast<std::size_t>(l)][index_of(g)] = n;
    }
  }
  return out;
}

CircuitReport make_report(const Model& model, const BinaryMask& bits, const std::vector<TaskExample>& examples,
                          TaskKind task, const nlohmann::json& config, std::uint64_t seed, int gt_margin) {
  const NodeLayout layout(model.config());
  if (bits.size() != layout.size()) throw std::invalid_argument("circuit size does not match layout");
  if (enforce_hierarchy(bits, layout) != bits) throw std::invalid_argument("circuit violates mask hierarchy");
  const CircuitEvaluator ev(model, examples, gt_margin);
  CircuitReport r;
  r.model_config = model.config();
  r.task = task;
  r.bits = bits;
  r.base = to_report(ev.base(), full_circuit(model.config()), model.config(), examples);
  r.circuit = to_report(ev.run(bits), bits, model.config(), examples);
  r.config = config;
  r.seed = seed;
  return r;
}

void to_json(nlohmann::json& j, const CircuitReport& r) {
  const NodeLayout layout(r.model_config);
  const auto counts = r.layer_counts();
  nlohmann::json masks = nlohmann::json::object();
  for (Granularity g : kAllGranularities) {
    nlohmann::json rows = nlohmann::json::array();
    for (int l = 0; l < r.model_config.n_layers; ++l) {
      const std::size_t off = layout.offset(l, g);
      std::vector<int> row(layout.width(g));
      for (std::size_t i = 0; i < row.size(); ++i) row[i] = r.bits[off + i] ? 1 : 0;
      rows.push_back(row);
    }
    masks[std::string(granularity_name(g))] = rows;
  }
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < counts.size(); ++l) {
    nlohmann::json row = {{"layer", l}};
    for (Granularity g : kAllGranularities) {
      row[std::string(granularity_name(g))] = {{"active", counts[l][index_of(g)]}, {"total", layout.width(g)}};
    }
    layers.push_back(row);
  }
  j = {{"schema_version", kMetricSchemaVersion},
       {"tool_version", r.tool_version},
       {"task", std::string(task_name(r.task))},
       {"seed", r.seed},
       {"model_config", r.model_config},
       {"config", r.config},
       {"layers", layers},
       {"masks", masks},
       {"base", r.base},
       {"circuit", r.circuit}};
}

void from_json(const nlohmann::json& j, CircuitReport& r) {
  if (j.value("schema_version", 0) != kMetricSchemaVersion) throw std::invalid_argument("unsupported report schema");
  r.tool_version = j.at("tool_version").get<std::string>();
  r.task = parse_task(j.at("task").get<std::string>());
  r.seed = j.at("seed").get<std::uint64_t>();
  r.model_config = j.at("model_config").get<ModelConfig>();
  r.config = j.at("config");
  const NodeLayout layout(r.model_config);
  r.bits.assign(layout.size(), 0);
  const auto& masks = j.at("masks");
  for (Granularity g : kAllGranularities) {
    const auto& rows = masks.at(std::string(granularity_name(g)));
    if (rows.size() != static_cast<std::size_t>(r.model_config.n_layers)) {
      throw std::invalid_argument("report masks do not match model config");
    }
    for (int l = 0; l < r.model_config.n_layers; ++l) {
      const auto row = rows.at(static_cast<std::size_t>(l)).get<std::vector<int>>();
      if (row.size() != layout.width(g)) throw std::invalid_argument("report masks do not match model config");
      const std::size_t off = layout.offset(l, g);
      for (std::size_t i = 0; i < row.size(); ++i) r.bits[off + i] = row[i] != 0 ? 1 : 0;
    }
  }
  r.base = j.at("base").get<MetricReport>();
  r.circuit = j.at("circuit").get<MetricReport>();
}

ReportFormat parse_report_format(std::string_view name) {
  if (name == "json") return ReportFormat::Json;
  if (name == "markdown" || name == "md") return ReportFormat::Markdown;
  if (name == "csv") return ReportFormat::Csv;
  throw std::invalid_argument("unknown report format '" + std::string(name) + "'");
}

namespace {

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string optional_cell(const std::optional<double>& v) { return v ? fixed(*v) : std::string("-"); }

std::string render_markdown(const CircuitReport& r) {
  const NodeLayout layout(r.model_config);
  const auto counts = r.layer_counts();
  std::ostringstream out;
  out << "# Circuit report\n\n";
  out << "Task: " << task_name(r.task) << "  \n";
  out << "Seed: " << r.seed << "  \n";
  out << "Model: " << r.model_config.n_layers << " layers, " << r.model_config.n_heads << " heads, d_model "
      << r.model_config.d_model << ", d_mlp " << r.model_config.d_mlp << "\n\n";

  out << "| Layer |";
  for (Granularity g : kAllGranularities) out << ' ' << granularity_title(g) << " |";
  out << "\n|---|";
  for (std::size_t i = 0; i < kNumGranularities; ++i) out << "---|";
  out << '\n';
  for (std::size_t l = 0; l < counts.size(); ++l) {
    out << "| " << (l + 1) << " |";
    for (Granularity g : kAllGranularities) {
      const std::size_t n = counts[l][index_of(g)];
      if (g == Granularity::AttnBlock || g == Granularity::MlpBlock) {
        out << ' ' << (n ? "Active" : "Pruned") << " |";
      } else {
        out << ' ' << n << '/' << layout.width(g) << " |";
      }
    }
    out << '\n';
  }

  out << "\n## Sparsity\n\n| Family | Active | Total | Sparsity |\n|---|---|---|---|\n";
  for (Granularity g : kAllGranularities) {
    const std::size_t i = index_of(g);
    out << "| " << granularity_title(g) << " | " << r.circuit.size.active[i] << " | " << r.circuit.size.total[i]
        << " | " << fixed(100.0 * r.circuit.size.sparsity[i], 1) << "% |\n";
  }

  out << "\n## Metrics\n\n| Metric | Base | Circuit |\n|---|---|---|\n";
  out << "| GT score | " << optional_cell(r.base.gt_score) << " | " << optional_cell(r.circuit.gt_score) << " |\n";
  out << "| IOI score | " << optional_cell(r.base.ioi_score) << " | " << optional_cell(r.circuit.ioi_score) << " |\n";
  out << "| GP score | " << optional_cell(r.base.gp_score) << " | " << optional_cell(r.circuit.gp_score) << " |\n";
  out << "| KL divergence | " << fixed(r.base.kl_divergence) << " | " << fixed(r.circuit.kl_divergence) << " |\n";
  out << "| Parameters | " << fixed(r.base.size.parameter_count, 1) << " | " << fixed(r.circuit.size.parameter_count, 1)
      << " |\n";
  out << "| Compression ratio | " << optional_cell(r.base.size.compression_ratio) << " | "
      << optional_cell(r.circuit.size.compression_ratio) << " |\n";
  out << "| Active edges | " << r.base.edges.active << '/' << r.base.edges.total << " | " << r.circuit.edges.active
      << '/' << r.circuit.edges.total << " |\n";
  out << "| Edge compression | " << fixed(100.0 * r.base.edges.compression, 2) << "% | "
      << fixed(100.0 * r.circuit.edges.compression, 2) << "% |\n";
  return out.str();
}

std::string render_csv(const CircuitReport& r) {
  const NodeLayout layout(r.model_config);
  const auto counts = r.layer_counts();
  std::ostringstream out;
  out << "layer,family,active,total,sparsity\n";
  for (std::size_t l = 0; l < counts.size(); ++l) {
    for (Granularity g : kAllGranularities) {
      const std::size_t n = counts[l][index_of(g)];
      const std::size_t t = layout.width(g);
      out << l << ',' << granularity_name(g) << ',' << n << ',' << t << ','
          << fixed(1.0 - static_cast<double>(n) / static_cast<double>(t)) << '\n';
    }
  }
  return out.str();
}

}  // namespace

std::string render_report(const CircuitReport& report, ReportFormat format) {
  switch (format) {
    case ReportFormat::Json: return nlohmann::json(report).dump(2) + "\n";
    case ReportFormat::Markdown: return render_markdown(report);
    case ReportFormat::Csv: return render_csv(report);
  }
  return {};
}

}  // namespace circuitscope
