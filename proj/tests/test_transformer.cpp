#include <doctest.h>

#include <cmath>

#include "circuitscope/transformer.hpp"
#include "circuitscope/twostream.hpp"
#include "helpers.hpp"

using namespace circuitscope;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat weight(const Model& m, const std::string& name) {
  const auto& t = m.weight(name);
  const std::size_t r = t.rows(), c = t.cols();
  Mat out(r, std::vector<double>(c));
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i][j] = t[i * c + j];
  }
  return out;
}

std::vector<double> vec(const Model& m, const std::string& name) {
  const auto& t = m.weight(name);
  return {t.data().begin(), t.data().end()};
}

Mat matmul(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < b.size(); ++k) {
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
    }
  }
  return out;
}

void add_bias(Mat& a, const std::vector<double>& b) {
  for (auto& row : a) {
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
  }
}

Mat layer_norm(const Mat& x, const std::vector<double>& g, const std::vector<double>& b) {
  Mat out = x;
  for (auto& row : out) {
    double mean = 0.0, var = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(row.size());
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mean) / std::sqrt(var + 1e-5) * g[j] + b[j];
  }
  return out;
}

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

// Straightforward transformer forward written independently of the engine.
Mat reference_logits(const Model& m, const Tokens& tokens) {
  const auto& c = m.config();
  const std::size_t T = tokens.size(), d = static_cast<std::size_t>(c.d_model);
  const std::size_t H = static_cast<std::size_t>(c.n_heads), dh = d / H;
  const Mat tok = weight(m, "embed/token"), pos = weight(m, "embed/position");
  Mat x(T, std::vector<double>(d));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < d; ++j) x[t][j] = tok[static_cast<std::size_t>(tokens[t])][j] + pos[t][j];
  }
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "layer/" + std::to_string(l) + "/";
    const Mat h = layer_norm(x, vec(m, p + "ln1/gain"), vec(m, p + "ln1/bias"));
    Mat q = matmul(h, weight(m, p + "attn/wq")), k = matmul(h, weight(m, p + "attn/wk")),
        v = matmul(h, weight(m, p + "attn/wv"));
    add_bias(q, vec(m, p + "attn/bq"));
    add_bias(k, vec(m, p + "attn/bk"));
    add_bias(v, vec(m, p + "attn/bv"));
    Mat z(T, std::vector<double>(d, 0.0));
    for (std::size_t hd = 0; hd < H; ++hd) {
      for (std::size_t i = 0; i < T; ++i) {
        std::vector<double> s(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double acc = 0.0;
          for (std::size_t e = 0; e < dh; ++e) acc += q[i][hd * dh + e] * k[j][hd * dh + e];
          s[j] = acc / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double total = 0.0;
        for (double& sv : s) total += (sv = std::exp(sv - mx));
        for (std::size_t j = 0; j <= i; ++j) {
          for (std::size_t e = 0; e < dh; ++e) z[i][hd * dh + e] += s[j] / total * v[j][hd * dh + e];
        }
      }
    }
    Mat attn = matmul(z, weight(m, p + "attn/wo"));
    add_bias(attn, vec(m, p + "attn/bo"));
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < d; ++j) x[t][j] += attn[t][j];
    }
    Mat hid = matmul(layer_norm(x, vec(m, p + "ln2/gain"), vec(m, p + "ln2/bias")), weight(m, p + "mlp/w_in"));
    add_bias(hid, vec(m, p + "mlp/b_in"));
    for (auto& row : hid) {
      for (double& v2 : row) v2 = gelu(v2);
    }
    Mat out = matmul(hid, weight(m, p + "mlp/w_out"));
    add_bias(out, vec(m, p + "mlp/b_out"));
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < d; ++j) x[t][j] += out[t][j];
    }
  }
  Mat logits = matmul(layer_norm(x, vec(m, "final_ln/gain"), vec(m, "final_ln/bias")), weight(m, "unembed/w"));
  add_bias(logits, vec(m, "unembed/b"));
  return logits;
}

Tokens sample_tokens() { return {0, 5, 17, 42, 3, 99, 7}; }

}  // namespace

TEST_CASE("forward matches an independent reference implementation") {
  const auto cfg = testing::micro_config(2, 2, 8, 16);
  const Model m = testing::lively_model(cfg, 9);
  const Tokens tokens = sample_tokens();
  const Mat ref = reference_logits(m, tokens);

  const WeightCache<double> cache(m);
  engine::Tape<double> tape;
  const auto bw = bind_weights(tape, cache, false);
  const auto fwd = forward_graph(tape, bw, cfg, tokens);
  const auto& logits = tape.value(fwd.logits);
  REQUIRE(logits.rows() == tokens.size());
  double worst = 0.0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    for (std::size_t v = 0; v < logits.cols(); ++v) worst = std::max(worst, std::abs(logits[t * logits.cols() + v] - ref[t][v]));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("readout row equals the matching row of the full forward") {
  const auto cfg = testing::micro_config(2, 2, 8, 16);
  const Model m = testing::lively_model(cfg, 2);
  const Tokens tokens = sample_tokens();
  const WeightCache<float> cache(m);
  engine::Tape<float> tape;
  const auto bw = bind_weights(tape, cache, false);
  const auto full = tape.value(forward_graph(tape, bw, cfg, tokens).logits);
  const auto row = tape.value(forward_graph(tape, bw, cfg, tokens, nullptr, 4).logits);
  for (std::size_t v = 0; v < row.size(); ++v) CHECK(row[v] == full[4 * full.cols() + v]);
}

TEST_CASE("forward is causal") {
  const auto cfg = testing::micro_config(2, 2, 8, 16);
  const Model m = testing::lively_model(cfg, 3);
  Tokens a = sample_tokens();
  Tokens b = a;
  b.back() = 11;
  const auto ra = forward_layers(m, a);
  const auto rb = forward_layers(m, b);
  const std::size_t V = ra.logits.cols();
  for (std::size_t t = 0; t + 1 < a.size(); ++t) {
    for (std::size_t v = 0; v < V; ++v) CHECK(ra.logits[t * V + v] == rb.logits[t * V + v]);
  }
}

TEST_CASE("per-head outputs sum to the attention block output") {
  const auto cfg = testing::micro_config(1, 2, 8, 16);
  const Model m = testing::lively_model(cfg, 4);
  const auto rec = forward_layers(m, sample_tokens());
  const auto& bo = m.weight("layer/0/attn/bo");
  const auto& total = rec.attn_block_out[0];
  for (std::size_t i = 0; i < total.size(); ++i) {
    const double sum = rec.head_outputs[0][0][i] + rec.head_outputs[0][1][i] + bo[i % 8];
    CHECK(total[i] == doctest::Approx(sum).epsilon(1e-5));
  }
}

TEST_CASE("token validation") {
  const auto cfg = testing::micro_config();
  const Model m = Model::random(cfg, 1);
  CHECK_THROWS(forward_layers(m, Tokens{}));
  CHECK_THROWS(forward_layers(m, Tokens{0, cfg.vocab_size}));
  CHECK_THROWS(forward_layers(m, Tokens(static_cast<std::size_t>(cfg.max_seq_len) + 1, 0)));
}
