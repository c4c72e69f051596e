#include <doctest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "circuitscope/extraction.hpp"
#include "circuitscope/twostream.hpp"
#include "helpers.hpp"

using namespace circuitscope;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Binarize every gate, then one sweep zeroing children of inactive parents.
BinaryMask reference_extract(const MaskSet& masks) {
  const auto& layout = masks.layout();
  const double thr = masks.constants().threshold();
  BinaryMask raw(masks.size());
  for (std::size_t i = 0; i < masks.size(); ++i) raw[i] = static_cast<double>(masks[i]) > thr ? 1 : 0;
  BinaryMask out = raw;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const auto n = layout.node(i);
    const bool attn_child = n.granularity == Granularity::Head || n.granularity == Granularity::AttnNeuron;
    const bool mlp_child = n.granularity == Granularity::MlpHidden || n.granularity == Granularity::MlpOutput;
    if (attn_child && !raw[layout.index(NodeId::attn_block(n.layer))]) out[i] = 0;
    if (mlp_child && !raw[layout.index(NodeId::mlp_block(n.layer))]) out[i] = 0;
  }
  return out;
}

MaskSet random_masks(const ModelConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> uni(-6.0F, 6.0F);
  MaskSet m(cfg, GateConstants{});
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = uni(rng);
  return m;
}

}  // namespace

TEST_CASE("extract saturated masks") {
  const auto cfg = testing::micro_config(2, 2, 8, 16);
  const MaskSet on(cfg, GateConstants{}, 20.0F);
  CHECK(extract(on) == full_circuit(cfg));
  MaskSet mixed(cfg, GateConstants{}, 20.0F);
  mixed.family(0, Granularity::AttnBlock)[0] = -20.0F;
  const auto bits = extract(mixed);
  const NodeLayout& layout = mixed.layout();
  CHECK(bits[layout.index(NodeId::head_of(0, 0))] == 0);
  CHECK(bits[layout.index(NodeId::head_of(0, 1))] == 0);
  CHECK(bits[layout.index(NodeId::neuron_of(Granularity::AttnNeuron, 0, 3))] == 0);
  CHECK(bits[layout.index(NodeId::head_of(1, 0))] == 1);
  CHECK(bits[layout.index(NodeId::mlp_block(0))] == 1);
}

TEST_CASE("extract equals a two-pass reference and is idempotent") {
  std::mt19937_64 rng(12);
  const auto cfg = testing::micro_config(1, 2, 8, 16);
  for (int trial = 0; trial < 200; ++trial) {
    const auto masks = random_masks(cfg, rng);
    const auto bits = extract(masks);
    CHECK(bits == reference_extract(masks));
    CHECK(enforce_hierarchy(bits, masks.layout()) == bits);
  }
}

TEST_CASE("full circuit reproduces the base metrics exactly") {
  const auto cfg = testing::micro_config(2, 2, 8, 16);
  const Model m = testing::lively_model(cfg, 31);
  const auto data = gen_gt(6, 2);
  const auto base = evaluate_base(m, data);
  const auto full = evaluate_circuit(m, full_circuit(cfg), data);
  CHECK(full.kl_divergence < 1e-9);
  REQUIRE(full.gt_score.has_value());
  CHECK(*full.gt_score == *base.gt_score);
  CHECK(full.edges.active == full.edges.total);
}

TEST_CASE("empty circuit KL equals KL against the corrupted run") {
  const auto cfg = testing::micro_config(2, 2, 8, 16);
  const Model m = testing::lively_model(cfg, 32);
  const auto data = gen_gt(5, 3);
  const auto empty = evaluate_circuit(m, BinaryMask(NodeLayout(cfg).size(), 0), data);
  double expected = 0.0;
  for (const auto& ex : data) {
    const auto clean = forward_layers(m, ex.clean).logits;
    const auto corrupt = forward_layers(m, ex.corrupt).logits;
    const std::size_t V = clean.cols(), row = ex.answer_position * V;
    const std::vector<float> cl(clean.data().begin() + static_cast<std::ptrdiff_t>(row),
                                clean.data().begin() + static_cast<std::ptrdiff_t>(row + V));
    const std::vector<float> co(corrupt.data().begin() + static_cast<std::ptrdiff_t>(row),
                                corrupt.data().begin() + static_cast<std::ptrdiff_t>(row + V));
    expected += kl_divergence(softmax(cl), softmax(co));
  }
  expected /= static_cast<double>(data.size());
  CHECK(empty.kl_divergence == doctest::Approx(expected).epsilon(1e-5));
  CHECK(empty.edges.active == 1);
}

TEST_CASE("evaluate_circuit rejects circuits that break the hierarchy") {
  const auto cfg = testing::micro_config(1, 2, 8, 16);
  const Model m = testing::lively_model(cfg, 1);
  const NodeLayout layout(cfg);
  BinaryMask bits(layout.size(), 1);
  bits[layout.index(NodeId::attn_block(0))] = 0;
  CHECK_THROWS(evaluate_circuit(m, bits, gen_gt(2, 1)));
}

TEST_CASE("report counts, renderings and JSON round trip") {
  const auto cfg = testing::micro_config(2, 2, 8, 16);
  const Model m = testing::lively_model(cfg, 40);
  std::mt19937_64 rng(3);
  const auto masks = random_masks(cfg, rng);
  const auto bits = extract(masks);
  const auto data = gen_gt(4, 5);
  const auto report = make_report(m, bits, data, TaskKind::GreaterThan, {{"note", "x"}}, 9);
  const auto counts = report.layer_counts();
  REQUIRE(counts.size() == 2);
  for (int l = 0; l < 2; ++l) {
    for (Granularity g : kAllGranularities) {
      std::size_t n = 0;
      const auto off = masks.layout().offset(l, g);
      for (std::size_t i = 0; i < masks.layout().width(g); ++i) n += bits[off + i];
      CHECK(counts[static_cast<std::size_t>(l)][index_of(g)] == n);
    }
  }

  const std::string json = render_report(report, ReportFormat::Json);
  const auto back = nlohmann::json::parse(json).get<CircuitReport>();
  CHECK(render_report(back, ReportFormat::Json) == json);
  CHECK(back.bits == bits);

  const std::string csv = render_report(report, ReportFormat::Csv);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 6);
  CHECK(csv.starts_with("layer,family,active,total,sparsity\n"));
  const std::string md = render_report(report, ReportFormat::Markdown);
  CHECK(md.find("| Layer | Attn Block | MLP Block | Attn Heads | Attn Neurons | MLP Hidden | MLP Output |") !=
        std::string::npos);
  CHECK(parse_report_format("md") == ReportFormat::Markdown);
  CHECK_THROWS(parse_report_format("html"));
}

TEST_CASE("full four-layer circuit renders four active rows") {
  const auto cfg = testing::micro_config(4, 2, 8, 16);
  const Model m = testing::lively_model(cfg, 4);
  const auto report = make_report(m, full_circuit(cfg), gen_gt(2, 1), TaskKind::GreaterThan, {}, 0);
  const std::string md = render_report(report, ReportFormat::Markdown);
  for (int l = 1; l <= 4; ++l) {
    CHECK(md.find("| " + std::to_string(l) + " | Active | Active | 2/2 | 8/8 | 16/16 | 8/8 |") != std::string::npos);
  }
  CHECK(md.find("Pruned") == std::string::npos);
}

TEST_CASE("pruning-summary report matches the golden markdown") {
  const std::string dir = CIRCUITSCOPE_TEST_DIR "/golden/";
  const auto report = nlohmann::json::parse(slurp(dir + "pruning_summary.json")).get<CircuitReport>();
  CHECK(render_report(report, ReportFormat::Markdown) == slurp(dir + "pruning_summary.md"));
  CHECK(render_report(report, ReportFormat::Markdown).find("| 11/12 |") != std::string::npos);
}
