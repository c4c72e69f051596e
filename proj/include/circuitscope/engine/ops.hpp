#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "circuitscope/engine/tape.hpp"
#include "circuitscope/engine/tensor.hpp"

namespace circuitscope::engine {

inline constexpr double kLayerNormEps = 1e-5;

namespace kernels {

// C[m,n] += A[m,k] * B[k,n]
template <class Real>
void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* crow = c + i * n;
    const Real* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      const Real* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <class Real>
void gemm_nt(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const Real* brow = b + j * k;
      Real acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <class Real>
void gemm_tn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    const Real* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = arow[p];
      Real* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class Real>
Real sigmoid(Real x) {
  if (x >= 0) return Real{1} / (Real{1} + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real{1} + e);
}

}  // namespace kernels

namespace detail {

template <class Real>
void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <class Real>
void require_matrix(const Tensor<Real>& a, const char* op) {
  if (a.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
  }
}

template <class Real>
Tape<Real>& tape_of(Var<Real> a) {
  if (a.tape == nullptr) throw std::invalid_argument("unbound variable");
  return *a.tape;
}

}  // namespace detail

template <class Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
  auto& t = detail::tape_of(a);
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require_matrix(av, "matmul");
  detail::require_matrix(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(av.shape()) + " x " +
                     shape_string(bv.shape()));
  }
  Tensor<Real> out({m, n});
  kernels::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return t.record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape<Real>& tp, const Tensor<Real>& g) {
    if (tp.requires_grad(a)) {
      kernels::gemm_nt(g.data().data(), tp.value(b).data().data(), tp.grad_buffer(a).data().data(), m, n, k);
    }
    if (tp.requires_grad(b)) {
      kernels::gemm_tn(tp.value(a).data().data(), g.data().data(), tp.grad_buffer(b).data().data(), m, k, n);
    }
  });
}

// a[m,k] * b[n,k]^T
template <class Real>
Var<Real> matmul_nt(Var<Real> a, Var<Real> b) {
  auto& t = detail::tape_of(a);
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require_matrix(av, "matmul_nt");
  detail::require_matrix(bv, "matmul_nt");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  if (bv.cols() != k) {
    throw ShapeError("matmul_nt: inner dimensions differ " + shape_string(av.shape()) + " x " +
                     shape_string(bv.shape()) + "^T");
  }
  Tensor<Real> out({m, n});
  kernels::gemm_nt(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return t.record("matmul_nt", std::move(out), {a, b}, [a, b, m, k, n](Tape<Real>& tp, const Tensor<Real>& g) {
    if (tp.requires_grad(a)) {
      kernels::gemm_nn(g.data().data(), tp.value(b).data().data(), tp.grad_buffer(a).data().data(), m, n, k);
    }
    if (tp.requires_grad(b)) {
      kernels::gemm_tn(g.data().data(), tp.value(a).data().data(), tp.grad_buffer(b).data().data(), m, n, k);
    }
  });
}

template <class Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
  auto& t = detail::tape_of(a);
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require_same_shape(av, bv, "add");
  Tensor<Real> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return t.record("add", std::move(out), {a, b}, [a, b](Tape<Real>& tp, const Tensor<Real>& g) {
    for (Var<Real> in : {a, b}) {
      if (!tp.requires_grad(in)) continue;
      auto& ga = tp.grad_buffer(in);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

template <class Real>
Var<Real> sub(Var<Real> a, Var<Real> b) {
  auto& t = detail::tape_of(a);
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require_same_shape(av, bv, "sub");
  Tensor<Real> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return t.record("sub", std::move(out), {a, b}, [a, b](Tape<Real>& tp, const Tensor<Real>& g) {
    if (tp.requires_grad(a)) {
      auto& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(b)) {
      auto& gb = tp.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

// x[m,n] + bias[n] broadcast over rows.
template <class Real>
Var<Real> add_bias(Var<Real> x, Var<Real> bias) {
  auto& t = detail::tape_of(x);
  const auto& xv = t.value(x);
  const auto& bv = t.value(bias);
  const std::size_t m = xv.rows(), n = xv.cols();
  if (bv.size() != n) {
    throw ShapeError("add_bias: bias " + shape_string(bv.shape()) + " vs input " + shape_string(xv.shape()));
  }
  Tensor<Real> out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] + bv[j];
  }
  return t.record("add_bias", std::move(out), {x, bias}, [x, bias, m, n](Tape<Real>& tp, const Tensor<Real>& g) {
    if (tp.requires_grad(x)) {
      auto& gx = tp.grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tp.requires_grad(bias)) {
      auto& gb = tp.grad_buffer(bias);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    }
  });
}

template <class Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
  auto& t = detail::tape_of(a);
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require_same_shape(av, bv, "mul");
  Tensor<Real> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return t.record("mul", std::move(out), {a, b}, [a, b](Tape<Real>& tp, const Tensor<Real>& g) {
    if (tp.requires_grad(a)) {
      auto& ga = tp.grad_buffer(a);
      const auto& bv2 = tp.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (tp.requires_grad(b)) {
      auto& gb = tp.grad_buffer(b);
      const auto& av2 = tp.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
    }
  });
}

template <class Real>
Var<Real> scale(Var<Real> a, Real s) {
  auto& t = detail::tape_of(a);
  const auto& av = t.value(a);
  Tensor<Real> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return t.record("scale", std::move(out), {a}, [a, s](Tape<Real>& tp, const Tensor<Real>& g) {
    auto& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

template <class Real>
Var<Real> add_scalar(Var<Real> a, Real s) {
  auto& t = detail::tape_of(a);
  const auto& av = t.value(a);
  Tensor<Real> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + s;
  return t.record("add_scalar", std::move(out), {a}, [a](Tape<Real>& tp, const Tensor<Real>& g) {
    auto& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// Rows of table[V,d] selected by ids.
template <class Real>
Var<Real> gather_rows(Var<Real> table, std::span<const std::int32_t> ids) {
  auto& t = detail::tape_of(table);
  const auto& tv = t.value(table);
  detail::require_matrix(tv, "gather_rows");
  const std::size_t d = tv.cols();
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  Tensor<Real> out({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= tv.rows()) {
      throw std::out_of_range("gather_rows: index " + std::to_string(idx[r]) + " outside table of " +
                              std::to_string(tv.rows()) + " rows");
    }
    std::copy_n(tv.row(static_cast<std::size_t>(idx[r])).begin(), d, out.row(r).begin());
  }
  return t.record("gather_rows", std::move(out), {table}, [table, idx, d](Tape<Real>& tp, const Tensor<Real>& g) {
    auto& gt = tp.grad_buffer(table);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const std::size_t src = static_cast<std::size_t>(idx[r]);
      for (std::size_t j = 0; j < d; ++j) gt[src * d + j] += g[r * d + j];
    }
  });
}

// Row-wise layer normalization with learned gain and bias.
template <class Real>
Var<Real> layer_norm(Var<Real> x, Var<Real> gain, Var<Real> bias) {
  auto& t = detail::tape_of(x);
  const auto& xv = t.value(x);
  const auto& gv = t.value(gain);
  const auto& bv = t.value(bias);
  const std::size_t m = xv.rows(), n = xv.cols();
  if (gv.size() != n || bv.size() != n) throw ShapeError("layer_norm: gain/bias width mismatch");
  Tensor<Real> out(xv.shape());
  auto xhat = std::make_shared<std::vector<Real>>(m * n);
  auto inv_std = std::make_shared<std::vector<Real>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const Real* xr = &xv[i * n];
    Real mean{0};
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<Real>(n);
    Real var{0};
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<Real>(n);
    const Real rs = Real{1} / std::sqrt(var + static_cast<Real>(kLayerNormEps));
    (*inv_std)[i] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const Real h = (xr[j] - mean) * rs;
      (*xhat)[i * n + j] = h;
      out[i * n + j] = h * gv[j] + bv[j];
    }
  }
  return t.record("layer_norm", std::move(out), {x, gain, bias},
                  [x, gain, bias, m, n, xhat, inv_std](Tape<Real>& tp, const Tensor<Real>& g) {
                    const auto& gv2 = tp.value(gain);
                    if (tp.requires_grad(x)) {
                      auto& gx = tp.grad_buffer(x);
                      std::vector<Real> dh(n);
                      for (std::size_t i = 0; i < m; ++i) {
                        Real mean_dh{0}, mean_dh_h{0};
                        for (std::size_t j = 0; j < n; ++j) {
                          dh[j] = g[i * n + j] * gv2[j];
                          mean_dh += dh[j];
                          mean_dh_h += dh[j] * (*xhat)[i * n + j];
                        }
                        mean_dh /= static_cast<Real>(n);
                        mean_dh_h /= static_cast<Real>(n);
                        for (std::size_t j = 0; j < n; ++j) {
                          gx[i * n + j] += (*inv_std)[i] * (dh[j] - mean_dh - (*xhat)[i * n + j] * mean_dh_h);
                        }
                      }
                    }
                    if (tp.requires_grad(gain)) {
                      auto& gg = tp.grad_buffer(gain);
                      for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * (*xhat)[i * n + j];
                      }
                    }
                    if (tp.requires_grad(bias)) {
                      auto& gb = tp.grad_buffer(bias);
                      for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                      }
                    }
                  });
}

// GELU, tanh approximation.
template <class Real>
Var<Real> gelu(Var<Real> x) {
  auto& t = detail::tape_of(x);
  const auto& xv = t.value(x);
  const Real c = static_cast<Real>(0.7978845608028654);  // sqrt(2/pi)
  const Real k = static_cast<Real>(0.044715);
  Tensor<Real> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Real v = xv[i];
    out[i] = Real{0.5} * v * (Real{1} + std::tanh(c * (v + k * v * v * v)));
  }
  return t.record("gelu", std::move(out), {x}, [x, c, k](Tape<Real>& tp, const Tensor<Real>& g) {
    const auto& xv2 = tp.value(x);
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Real v = xv2[i];
      const Real th = std::tanh(c * (v + k * v * v * v));
      const Real d = Real{0.5} * (Real{1} + th) +
                     Real{0.5} * v * (Real{1} - th * th) * c * (Real{1} + Real{3} * k * v * v);
      gx[i] += g[i] * d;
    }
  });
}

// Row-wise softmax with max subtraction. With causal=true, entry (i,j) for
// j > i is excluded and set to exactly zero.
template <class Real>
Var<Real> softmax_rows(Var<Real> x, bool causal = false) {
  auto& t = detail::tape_of(x);
  const auto& xv = t.value(x);
  const std::size_t m = xv.rows(), n = xv.cols();
  if (causal && n < m) throw ShapeError("softmax_rows: causal mask needs cols >= rows");
  Tensor<Real> out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t width = causal ? std::min(n, i + 1) : n;
    const Real* xr = &xv[i * n];
    Real mx = xr[0];
    for (std::size_t j = 1; j < width; ++j) mx = std::max(mx, xr[j]);
    Real sum{0};
    for (std::size_t j = 0; j < width; ++j) {
      const Real e = std::exp(xr[j] - mx);
      out[i * n + j] = e;
      sum += e;
    }
    for (std::size_t j = 0; j < width; ++j) out[i * n + j] /= sum;
  }
  auto y = std::make_shared<Tensor<Real>>(out);
  return t.record("softmax_rows", std::move(out), {x}, [x, y, m, n](Tape<Real>& tp, const Tensor<Real>& g) {
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < m; ++i) {
      Real dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += (*y)[i * n + j] * g[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += (*y)[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

template <class Real>
Var<Real> log_softmax_rows(Var<Real> x) {
  auto& t = detail::tape_of(x);
  const auto& xv = t.value(x);
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor<Real> out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const Real* xr = &xv[i * n];
    Real mx = xr[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    Real sum{0};
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(xr[j] - mx);
    const Real lse = mx + std::log(sum);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xr[j] - lse;
  }
  auto y = std::make_shared<Tensor<Real>>(out);
  return t.record("log_softmax_rows", std::move(out), {x}, [x, y, m, n](Tape<Real>& tp, const Tensor<Real>& g) {
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < m; ++i) {
      Real gsum{0};
      for (std::size_t j = 0; j < n; ++j) gsum += g[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] - std::exp((*y)[i * n + j]) * gsum;
    }
  });
}

template <class Real>
Var<Real> sigmoid(Var<Real> x) {
  auto& t = detail::tape_of(x);
  const auto& xv = t.value(x);
  Tensor<Real> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = kernels::sigmoid(xv[i]);
  auto y = std::make_shared<Tensor<Real>>(out);
  return t.record("sigmoid", std::move(out), {x}, [x, y](Tape<Real>& tp, const Tensor<Real>& g) {
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*y)[i] * (Real{1} - (*y)[i]);
  });
}

template <class Real>
Var<Real> log(Var<Real> x) {
  auto& t = detail::tape_of(x);
  const auto& xv = t.value(x);
  Tensor<Real> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(xv[i]);
  return t.record("log", std::move(out), {x}, [x](Tape<Real>& tp, const Tensor<Real>& g) {
    const auto& xv2 = tp.value(x);
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xv2[i];
  });
}

// min(1, max(0, x)); the gradient is zero wherever the clamp is active.
template <class Real>
Var<Real> clamp01(Var<Real> x) {
  auto& t = detail::tape_of(x);
  const auto& xv = t.value(x);
  Tensor<Real> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(Real{1}, std::max(Real{0}, xv[i]));
  return t.record("clamp01", std::move(out), {x}, [x](Tape<Real>& tp, const Tensor<Real>& g) {
    const auto& xv2 = tp.value(x);
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv2[i] > Real{0} && xv2[i] < Real{1}) gx[i] += g[i];
    }
  });
}

template <class Real>
Var<Real> concat_cols(const std::vector<Var<Real>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  auto& t = detail::tape_of(parts.front());
  const std::size_t m = t.value(parts.front()).rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& v = t.value(p);
    if (v.rows() != m) throw ShapeError("concat_cols: row count mismatch");
    widths.push_back(v.cols());
    total += v.cols();
  }
  Tensor<Real> out({m, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = t.value(parts[k]);
    for (std::size_t i = 0; i < m; ++i) std::copy_n(v.row(i).begin(), widths[k], &out[i * total + off]);
    off += widths[k];
  }
  return t.record("concat_cols", std::move(out), parts, [parts, widths, m, total](Tape<Real>& tp, const Tensor<Real>& g) {
    std::size_t off2 = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (tp.requires_grad(parts[k])) {
        auto& gp = tp.grad_buffer(parts[k]);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += g[i * total + off2 + j];
        }
      }
      off2 += widths[k];
    }
  });
}

template <class Real>
Var<Real> slice_cols(Var<Real> x, std::size_t begin, std::size_t end) {
  auto& t = detail::tape_of(x);
  const auto& xv = t.value(x);
  const std::size_t m = xv.rows(), n = xv.cols();
  if (begin > end || end > n) throw ShapeError("slice_cols: range out of bounds");
  const std::size_t w = end - begin;
  Tensor<Real> out = xv.rank() == 1 ? Tensor<Real>({w}) : Tensor<Real>({m, w});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(&xv[i * n + begin], w, &out[i * w]);
  return t.record("slice_cols", std::move(out), {x}, [x, begin, m, n, w](Tape<Real>& tp, const Tensor<Real>& g) {
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < w; ++j) gx[i * n + begin + j] += g[i * w + j];
    }
  });
}

template <class Real>
Var<Real> slice_rows(Var<Real> x, std::size_t begin, std::size_t end) {
  auto& t = detail::tape_of(x);
  const auto& xv = t.value(x);
  detail::require_matrix(xv, "slice_rows");
  const std::size_t n = xv.cols();
  if (begin > end || end > xv.rows()) throw ShapeError("slice_rows: range out of bounds");
  Tensor<Real> out({end - begin, n});
  std::copy(xv.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
            xv.data().begin() + static_cast<std::ptrdiff_t>(end * n), out.data().begin());
  return t.record("slice_rows", std::move(out), {x}, [x, begin, n](Tape<Real>& tp, const Tensor<Real>& g) {
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin * n + i] += g[i];
  });
}

// m*clean + (1-m)*other, with m either a single value or one value per column.
// Equal inputs pass through unchanged.
template <class Real>
Var<Real> interpolate(Var<Real> clean, Var<Real> other, Var<Real> m) {
  auto& t = detail::tape_of(clean);
  const auto& cv = t.value(clean);
  const auto& ov = t.value(other);
  const auto& mv = t.value(m);
  detail::require_same_shape(cv, ov, "interpolate");
  const std::size_t rows = cv.rows(), cols = cv.cols();
  const bool scalar_gate = mv.size() == 1;
  if (!scalar_gate && mv.size() != cols) {
    throw ShapeError("interpolate: gate " + shape_string(mv.shape()) + " vs activation " + shape_string(cv.shape()));
  }
  Tensor<Real> out(cv.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const Real g = scalar_gate ? mv[0] : mv[j];
      const Real c = cv[i * cols + j], o = ov[i * cols + j];
      out[i * cols + j] = c == o ? c : g * c + (Real{1} - g) * o;
    }
  }
  return t.record("interpolate", std::move(out), {clean, other, m},
                  [clean, other, m, rows, cols, scalar_gate](Tape<Real>& tp, const Tensor<Real>& g) {
                    const auto& mv2 = tp.value(m);
                    if (tp.requires_grad(clean)) {
                      auto& gc = tp.grad_buffer(clean);
                      for (std::size_t i = 0; i < rows; ++i) {
                        for (std::size_t j = 0; j < cols; ++j) {
                          gc[i * cols + j] += g[i * cols + j] * (scalar_gate ? mv2[0] : mv2[j]);
                        }
                      }
                    }
                    if (tp.requires_grad(other)) {
                      auto& go = tp.grad_buffer(other);
                      for (std::size_t i = 0; i < rows; ++i) {
                        for (std::size_t j = 0; j < cols; ++j) {
                          go[i * cols + j] += g[i * cols + j] * (Real{1} - (scalar_gate ? mv2[0] : mv2[j]));
                        }
                      }
                    }
                    if (tp.requires_grad(m)) {
                      const auto& cv2 = tp.value(clean);
                      const auto& ov2 = tp.value(other);
                      auto& gm = tp.grad_buffer(m);
                      for (std::size_t i = 0; i < rows; ++i) {
                        for (std::size_t j = 0; j < cols; ++j) {
                          const Real d = g[i * cols + j] * (cv2[i * cols + j] - ov2[i * cols + j]);
                          gm[scalar_gate ? 0 : j] += d;
                        }
                      }
                    }
                  });
}

// [a,b,...] -> [a x k, b x k, ...]
template <class Real>
Var<Real> repeat_each(Var<Real> v, std::size_t k) {
  auto& t = detail::tape_of(v);
  const auto& vv = t.value(v);
  const std::size_t n = vv.size();
  Tensor<Real> out({n * k});
  for (std::size_t i = 0; i < n; ++i) std::fill_n(&out[i * k], k, vv[i]);
  return t.record("repeat_each", std::move(out), {v}, [v, n, k](Tape<Real>& tp, const Tensor<Real>& g) {
    auto& gv = tp.grad_buffer(v);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) gv[i] += g[i * k + j];
    }
  });
}

template <class Real>
Var<Real> sum(Var<Real> x) {
  auto& t = detail::tape_of(x);
  const auto& xv = t.value(x);
  Real s{0};
  for (Real v : xv.data()) s += v;
  return t.record("sum", Tensor<Real>::scalar(s), {x}, [x](Tape<Real>& tp, const Tensor<Real>& g) {
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
  });
}

template <class Real>
Var<Real> dot(Var<Real> a, Var<Real> b) {
  return sum(mul(a, b));
}

}  // namespace circuitscope::engine
