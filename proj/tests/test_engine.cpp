#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "circuitscope/engine/ops.hpp"
#include "helpers.hpp"

using namespace circuitscope::engine;
using testing::max_grad_error;
using testing::random_tensor;

namespace {

// Scalar loss from an arbitrary tensor: weighted sum with fixed weights, so
// every output element gets a distinct upstream gradient.
Var<double> weighted_sum(Tape<double>& t, Var<double> x) {
  const auto& v = t.value(x);
  Tensor<double> w(v.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
  return dot(x, t.constant(std::move(w)));
}

}  // namespace

TEST_CASE("matmul variants agree with a naive product") {
  const auto a = Tensor<double>::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  const auto b = Tensor<double>::matrix(3, 2, {7, 8, 9, 10, 11, 12});
  Tape<double> t;
  const auto c = t.value(matmul(t.constant(a), t.constant(b)));
  CHECK(c.data()[0] == 58);
  CHECK(c.data()[1] == 64);
  CHECK(c.data()[2] == 139);
  CHECK(c.data()[3] == 154);
  const auto bt = Tensor<double>::matrix(2, 3, {7, 9, 11, 8, 10, 12});
  const auto c2 = t.value(matmul_nt(t.constant(a), t.constant(bt)));
  CHECK(c2 == c);
}

TEST_CASE("shape errors are reported") {
  Tape<double> t;
  auto a = t.constant(Tensor<double>({2, 3}));
  auto b = t.constant(Tensor<double>({2, 3}));
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  CHECK_THROWS_AS(add(a, t.constant(Tensor<double>({3, 2}))), ShapeError);
  CHECK_THROWS_AS(slice_cols(a, 2, 5), ShapeError);
}

TEST_CASE("backward requires a scalar output from the same tape") {
  Tape<double> t;
  auto p = t.parameter(Tensor<double>::vector({1.0, 2.0}));
  CHECK_THROWS_AS(t.backward(p), ShapeError);
  Tape<double> other;
  auto q = other.parameter(Tensor<double>::scalar(1.0));
  CHECK_THROWS_AS(t.backward(q), std::invalid_argument);
}

TEST_CASE("non-finite values are rejected") {
  Tape<double> t;
  CHECK_THROWS_AS(t.constant(Tensor<double>::scalar(std::numeric_limits<double>::quiet_NaN())), NonFiniteError);
  auto z = t.constant(Tensor<double>::scalar(0.0));
  CHECK_THROWS_AS(log(z), NonFiniteError);
}

TEST_CASE("constants receive no gradient and record no closure") {
  Tape<double> t;
  auto w = t.constant(Tensor<double>::matrix(2, 2, {1, 2, 3, 4}));
  auto x = t.parameter(Tensor<double>::matrix(1, 2, {0.5, -1.0}));
  auto frozen = matmul(w, w);
  CHECK_FALSE(t.requires_grad(frozen));
  auto y = sum(matmul(x, frozen));
  const auto grads = t.backward(y);
  REQUIRE(grads.size() == 1);
  CHECK(grads[0].param.id == x.id);
}

TEST_CASE("gradients match central differences") {
  std::mt19937_64 rng(5);
  SUBCASE("matmul") {
    CHECK(max_grad_error([](auto& t, const auto& v) { return weighted_sum(t, matmul(v[0], v[1])); },
                         {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)}) < 1e-7);
  }
  SUBCASE("matmul_nt") {
    CHECK(max_grad_error([](auto& t, const auto& v) { return weighted_sum(t, matmul_nt(v[0], v[1])); },
                         {random_tensor({3, 4}, rng), random_tensor({5, 4}, rng)}) < 1e-7);
  }
  SUBCASE("add, sub, mul, scale, add_scalar, add_bias") {
    CHECK(max_grad_error(
              [](auto& t, const auto& v) {
                auto a = add(v[0], v[1]);
                auto b = mul(sub(a, v[1]), v[1]);
                return weighted_sum(t, add_bias(add_scalar(scale(b, 1.7), -0.3), v[2]));
              },
              {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng), random_tensor({4}, rng)}) < 1e-7);
  }
  SUBCASE("gather_rows") {
    static const std::vector<std::int32_t> ids = {2, 0, 2, 1};
    CHECK(max_grad_error([](auto& t, const auto& v) { return weighted_sum(t, gather_rows(v[0], ids)); },
                         {random_tensor({3, 5}, rng)}) < 1e-7);
  }
  SUBCASE("layer_norm") {
    CHECK(max_grad_error([](auto& t, const auto& v) { return weighted_sum(t, layer_norm(v[0], v[1], v[2])); },
                         {random_tensor({3, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)}) < 1e-6);
  }
  SUBCASE("gelu") {
    CHECK(max_grad_error([](auto& t, const auto& v) { return weighted_sum(t, gelu(v[0])); },
                         {random_tensor({4, 5}, rng, 2.0)}) < 1e-7);
  }
  SUBCASE("softmax_rows causal and dense") {
    CHECK(max_grad_error([](auto& t, const auto& v) { return weighted_sum(t, softmax_rows(v[0], true)); },
                         {random_tensor({4, 4}, rng)}) < 1e-7);
    CHECK(max_grad_error([](auto& t, const auto& v) { return weighted_sum(t, softmax_rows(v[0], false)); },
                         {random_tensor({3, 5}, rng)}) < 1e-7);
  }
  SUBCASE("log_softmax_rows") {
    CHECK(max_grad_error([](auto& t, const auto& v) { return weighted_sum(t, log_softmax_rows(v[0])); },
                         {random_tensor({3, 5}, rng)}) < 1e-7);
  }
  SUBCASE("sigmoid and log") {
    CHECK(max_grad_error([](auto& t, const auto& v) { return weighted_sum(t, log(sigmoid(v[0]))); },
                         {random_tensor({6}, rng)}) < 1e-7);
  }
  SUBCASE("clamp01 away from the kinks") {
    const auto x = Tensor<double>::vector({-0.5, 0.2, 0.6, 1.4});
    CHECK(max_grad_error([](auto& t, const auto& v) { return weighted_sum(t, clamp01(v[0])); }, {x}) < 1e-8);
  }
  SUBCASE("concat, slices, repeat") {
    CHECK(max_grad_error(
              [](auto& t, const auto& v) {
                auto c = concat_cols<double>({v[0], v[1]});
                auto s = slice_rows(slice_cols(c, 1, 5), 1, 3);
                return add(weighted_sum(t, s), weighted_sum(t, repeat_each(v[2], 3)));
              },
              {random_tensor({3, 2}, rng), random_tensor({3, 4}, rng), random_tensor({4}, rng)}) < 1e-7);
  }
  SUBCASE("interpolate with per-column and broadcast gates") {
    CHECK(max_grad_error([](auto& t, const auto& v) { return weighted_sum(t, interpolate(v[0], v[1], v[2])); },
                         {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng), random_tensor({4}, rng)}) < 1e-7);
    CHECK(max_grad_error([](auto& t, const auto& v) { return weighted_sum(t, interpolate(v[0], v[1], v[2])); },
                         {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng), random_tensor({1}, rng)}) < 1e-7);
  }
}

TEST_CASE("causal softmax puts exactly zero mass above the diagonal") {
  Tape<double> t;
  std::mt19937_64 rng(1);
  const auto y = t.value(softmax_rows(t.constant(random_tensor({4, 4}, rng)), true));
  for (std::size_t i = 0; i < 4; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      if (j > i) CHECK(y[i * 4 + j] == 0.0);
      row += y[i * 4 + j];
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("interpolate endpoints are exact") {
  Tape<float> t;
  const auto c = Tensor<float>::matrix(2, 2, {0.1F, -3.7F, 2.5F, 1e-8F});
  const auto r = Tensor<float>::matrix(2, 2, {9.0F, 8.0F, 7.0F, 6.0F});
  auto vc = t.constant(c);
  auto vr = t.constant(r);
  CHECK(t.value(interpolate(vc, vr, t.constant(Tensor<float>::vector({1.0F, 1.0F})))) == c);
  CHECK(t.value(interpolate(vc, vr, t.constant(Tensor<float>::vector({0.0F, 0.0F})))) == r);
}

TEST_CASE("clamp01 passes no gradient where it clamps") {
  Tape<double> t;
  auto x = t.parameter(Tensor<double>::vector({-0.2, 0.5, 1.3}));
  const auto g = t.backward(sum(clamp01(x)));
  REQUIRE(g.size() == 1);
  CHECK(g[0].grad[0] == 0.0);
  CHECK(g[0].grad[1] == 1.0);
  CHECK(g[0].grad[2] == 0.0);
}
