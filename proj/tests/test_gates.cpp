#include <doctest.h>

#include <cmath>
#include <random>

#include "circuitscope/gates.hpp"
#include "helpers.hpp"

using namespace circuitscope;

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("gate constants and threshold") {
  const GateConstants c;
  CHECK(c.beta == doctest::Approx(2.0 / 3.0));
  CHECK(c.threshold() == doctest::Approx((2.0 / 3.0) * std::log(0.1 / 1.1)).epsilon(1e-12));
  CHECK(c.threshold() == doctest::Approx(-1.5986).epsilon(1e-4));
  CHECK_THROWS_AS((GateConstants{0.0, -0.1, 1.1}.validate()), ConfigError);
  CHECK_THROWS_AS((GateConstants{0.5, 0.1, 1.1}.validate()), ConfigError);
  CHECK_THROWS_AS((GateConstants{0.5, -0.1, 0.9}.validate()), ConfigError);
}

TEST_CASE("default lambdas") {
  const auto l = default_lambdas();
  CHECK(l[index_of(Granularity::Head)] == 3.0);
  CHECK(l[index_of(Granularity::MlpHidden)] == 5.0);
  CHECK(l[index_of(Granularity::MlpOutput)] == 1.5);
  CHECK(l[index_of(Granularity::AttnNeuron)] == 1.5);
  CHECK(l[index_of(Granularity::AttnBlock)] == 0.2);
  CHECK(l[index_of(Granularity::MlpBlock)] == 0.1);
}

TEST_CASE("sample_gate follows the stretched, clamped sigmoid") {
  const GateConstants c;
  // u = 0.5 cancels the noise: s = sigmoid(log_alpha / beta).
  CHECK(sample_gate(0.0, c, 0.5) == doctest::Approx(0.5));
  const double s = logistic(1.0 / c.beta);
  CHECK(sample_gate(1.0, c, 0.5) == doctest::Approx(s * 1.2 - 0.1));
  CHECK(sample_gate(20.0, c, 0.5) == 1.0);
  CHECK(sample_gate(-20.0, c, 0.5) == 0.0);
  CHECK_THROWS_AS(sample_gate(0.0, c, 0.0), std::domain_error);
  CHECK_THROWS_AS(sample_gate(0.0, c, 1.0), std::domain_error);
  // Monotone in both arguments.
  CHECK(sample_gate(0.3, c, 0.4) < sample_gate(0.3, c, 0.6));
  CHECK(sample_gate(0.1, c, 0.5) < sample_gate(0.4, c, 0.5));
}

TEST_CASE("eval_gate, expected_l0 and binarize") {
  const GateConstants c;
  CHECK(eval_gate(0.0, c) == doctest::Approx(0.5));
  CHECK(eval_gate(10.0, c) == 1.0);
  CHECK(eval_gate(-10.0, c) == 0.0);
  CHECK(expected_l0(c.threshold(), c) == doctest::Approx(0.5));
  CHECK(expected_l0(0.0, c) == doctest::Approx(logistic(-c.threshold())));
  CHECK(binarize(c.threshold() + 1e-6, c));
  CHECK_FALSE(binarize(c.threshold(), c));
  CHECK_FALSE(binarize(-2.0, c));
  CHECK(binarize(-1.5, c));
}

TEST_CASE("expected_l0 matches a Monte Carlo estimate of P(m > 0)") {
  const GateConstants c;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> uni(1e-9, 1.0 - 1e-9);
  for (double la : {-1.0, 0.5}) {
    int positive = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) positive += sample_gate(la, c, uni(rng)) > 0.0;
    CHECK(static_cast<double>(positive) / n == doctest::Approx(expected_l0(la, c)).epsilon(0.02));
  }
}

TEST_CASE("gate_noise is a deterministic function of its key") {
  CHECK(gate_noise(1, 2, 3) == gate_noise(1, 2, 3));
  CHECK(gate_noise(1, 2, 3) != gate_noise(1, 2, 4));
  CHECK(gate_noise(1, 2, 3) != gate_noise(1, 3, 3));
  CHECK(gate_noise(1, 2, 3) != gate_noise(2, 2, 3));
  double total = 0.0;
  for (std::uint64_t i = 0; i < 10000; ++i) {
    const double u = gate_noise(7, 0, i);
    CHECK(u > 0.0);
    CHECK(u < 1.0);
    total += u;
  }
  CHECK(total / 10000 == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("enforce_hierarchy zeroes children of inactive parents") {
  const auto cfg = testing::micro_config(1, 2, 8, 16);
  const NodeLayout layout(cfg);
  BinaryMask bits(layout.size(), 1);
  bits[layout.index(NodeId::attn_block(0))] = 0;
  const auto out = enforce_hierarchy(bits, layout);
  for (int h = 0; h < 2; ++h) CHECK(out[layout.index(NodeId::head_of(0, h))] == 0);
  for (int i = 0; i < 8; ++i) CHECK(out[layout.index(NodeId::neuron_of(Granularity::AttnNeuron, 0, i))] == 0);
  for (int i = 0; i < 16; ++i) CHECK(out[layout.index(NodeId::neuron_of(Granularity::MlpHidden, 0, i))] == 1);
  CHECK(enforce_hierarchy(out, layout) == out);
  CHECK_THROWS_AS(enforce_hierarchy(BinaryMask(3, 1), layout), std::invalid_argument);
}

TEST_CASE("MaskSet layout, binarization and checkpoint round trip") {
  const auto cfg = testing::micro_config(2, 2, 8, 16);
  MaskSet m(cfg, GateConstants{}, 2.0F);
  CHECK(m.size() == 2 * (2 + 2 + 8 + 16 + 8));
  m.family(1, Granularity::Head)[1] = -3.0F;
  const auto bits = m.binarized();
  CHECK(bits[m.layout().index(NodeId::head_of(1, 1))] == 0);
  CHECK(bits[m.layout().index(NodeId::head_of(1, 0))] == 1);

  const auto ckpt = m.to_checkpoint();
  CHECK(ckpt.has("mask/head/1"));
  CHECK(ckpt.has("mask/mlp_output/0"));
  CHECK(MaskSet::from_checkpoint(decode_checkpoint(encode_checkpoint(ckpt))) == m);
}

TEST_CASE("normalized_l0 is the lambda-weighted mean per family") {
  const auto cfg = testing::micro_config(1, 2, 8, 16);
  MaskSet m(cfg, GateConstants{}, 0.0F);
  for (float& v : m.family(0, Granularity::MlpHidden)) v = -30.0F;
  const auto p = normalized_l0(m, default_lambdas());
  const double e0 = expected_l0(0.0, GateConstants{});
  CHECK(p.family_mean[index_of(Granularity::Head)] == doctest::Approx(e0));
  CHECK(p.family_mean[index_of(Granularity::MlpHidden)] == doctest::Approx(0.0).epsilon(1e-9));
  const double expected = e0 * (3.0 + 1.5 + 1.5 + 0.2 + 0.1);
  CHECK(p.total == doctest::Approx(expected));
}
