#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "flowvae/errors.hpp"
#include "flowvae/graph.hpp"
#include "flowvae/tensor.hpp"

// Differentiable operations over Graph<T>. Image tensors are [n, h, w, c]
// row-major; "rows" means the leading (batch) axis.
namespace flowvae::ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <class T, class F>
Tensor<T> map(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  const T* src = a.data();
  T* dst = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) dst[i] = f(src[i]);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  Graph<T>* g = a.graph;
  return g->record(std::move(out), {a, b}, [g, a, b](const Tensor<T>& go) {
    g->accumulate(a, go);
    g->accumulate(b, go);
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  Graph<T>* g = a.graph;
  return g->record(std::move(out), {a, b}, [g, a, b](const Tensor<T>& go) {
    g->accumulate(a, go);
    if (g->requires_grad(b)) g->accumulate(b, detail::map(go, [](T v) { return -v; }));
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  Graph<T>* g = a.graph;
  return g->record(std::move(out), {a, b}, [g, a, b](const Tensor<T>& go) {
    if (g->requires_grad(a)) {
      Tensor<T> ga(go.shape());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = go[i] * b.value()[i];
      g->accumulate(a, ga);
    }
    if (g->requires_grad(b)) {
      Tensor<T> gb(go.shape());
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = go[i] * a.value()[i];
      g->accumulate(b, gb);
    }
  });
}

template <class T>
Var<T> div(Var<T> a, Var<T> b) {
  detail::same_shape(a.shape(), b.shape(), "div");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
  Graph<T>* g = a.graph;
  return g->record(std::move(out), {a, b}, [g, a, b](const Tensor<T>& go) {
    if (g->requires_grad(a)) {
      Tensor<T> ga(go.shape());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = go[i] / b.value()[i];
      g->accumulate(a, ga);
    }
    if (g->requires_grad(b)) {
      Tensor<T> gb(go.shape());
      for (std::size_t i = 0; i < gb.size(); ++i) {
        const T bv = b.value()[i];
        gb[i] = -go[i] * a.value()[i] / (bv * bv);
      }
      g->accumulate(b, gb);
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T c) {
  Graph<T>* g = a.graph;
  return g->record(detail::map(a.value(), [c](T v) { return v * c; }), {a}, [g, a, c](const Tensor<T>& go) {
    g->accumulate(a, detail::map(go, [c](T v) { return v * c; }));
  });
}

template <class T>
Var<T> add_scalar(Var<T> a, T c) {
  Graph<T>* g = a.graph;
  return g->record(detail::map(a.value(), [c](T v) { return v + c; }), {a},
                   [g, a](const Tensor<T>& go) { g->accumulate(a, go); });
}

template <class T>
Var<T> exp(Var<T> a) {
  Graph<T>* g = a.graph;
  Tensor<T> out = detail::map(a.value(), [](T v) { return std::exp(v); });
  return g->record(out, {a}, [g, a, out](const Tensor<T>& go) {
    Tensor<T> ga(go.shape());
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = go[i] * out[i];
    g->accumulate(a, ga);
  });
}

template <class T>
Var<T> log(Var<T> a) {
  Graph<T>* g = a.graph;
  for (T v : a.value().values())
    if (!(v > T(0))) throw NumericError("log of non-positive value");
  return g->record(detail::map(a.value(), [](T v) { return std::log(v); }), {a}, [g, a](const Tensor<T>& go) {
    Tensor<T> ga(go.shape());
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = go[i] / a.value()[i];
    g->accumulate(a, ga);
  });
}

template <class T>
Var<T> tanh(Var<T> a) {
  Graph<T>* g = a.graph;
  Tensor<T> out = detail::map(a.value(), [](T v) { return std::tanh(v); });
  return g->record(out, {a}, [g, a, out](const Tensor<T>& go) {
    Tensor<T> ga(go.shape());
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = go[i] * (T(1) - out[i] * out[i]);
    g->accumulate(a, ga);
  });
}

/// x for x > 0, exp(x) - 1 otherwise.
template <class T>
Tensor<T> elu_value(const Tensor<T>& x) {
  return detail::map(x, [](T v) { return v > T(0) ? v : std::expm1(v); });
}

template <class T>
Var<T> elu(Var<T> a) {
  Graph<T>* g = a.graph;
  Tensor<T> out = elu_value(a.value());
  return g->record(out, {a}, [g, a, out](const Tensor<T>& go) {
    Tensor<T> ga(go.shape());
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = a.value()[i] > T(0) ? go[i] : go[i] * (out[i] + T(1));
    g->accumulate(a, ga);
  });
}

template <class T>
Var<T> square(Var<T> a) {
  Graph<T>* g = a.graph;
  return g->record(detail::map(a.value(), [](T v) { return v * v; }), {a}, [g, a](const Tensor<T>& go) {
    Tensor<T> ga(go.shape());
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = T(2) * go[i] * a.value()[i];
    g->accumulate(a, ga);
  });
}

// Gradient passes only where lo < x < hi.
template <class T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  Graph<T>* g = a.graph;
  return g->record(detail::map(a.value(), [lo, hi](T v) { return std::clamp(v, lo, hi); }), {a},
                   [g, a, lo, hi](const Tensor<T>& go) {
                     Tensor<T> ga(go.shape());
                     for (std::size_t i = 0; i < ga.size(); ++i) {
                       const T v = a.value()[i];
                       ga[i] = (v > lo && v < hi) ? go[i] : T(0);
                     }
                     g->accumulate(a, ga);
                   });
}

// ----------------------------------------------------------------- reductions

/// [n, ...] -> [n], summing each row.
template <class T>
Var<T> sum_rows(Var<T> a) {
  const int n = a.dim(0);
  const std::size_t rs = a.value().row_size();
  Tensor<T> out(Shape{n});
  for (int r = 0; r < n; ++r) {
    T s = 0;
    const T* p = a.value().data() + r * rs;
    for (std::size_t i = 0; i < rs; ++i) s += p[i];
    out[r] = s;
  }
  Graph<T>* g = a.graph;
  return g->record(std::move(out), {a}, [g, a, n, rs](const Tensor<T>& go) {
    Tensor<T> ga(a.shape());
    for (int r = 0; r < n; ++r) std::fill(ga.data() + r * rs, ga.data() + (r + 1) * rs, go[r]);
    g->accumulate(a, ga);
  });
}

/// Sum of every element, shape [1].
template <class T>
Var<T> sum_all(Var<T> a) {
  T s = 0;
  for (T v : a.value().values()) s += v;
  Graph<T>* g = a.graph;
  return g->record(Tensor<T>(Shape{1}, std::vector<T>{s}), {a},
                   [g, a](const Tensor<T>& go) { g->accumulate(a, Tensor<T>(a.shape(), go[0])); });
}

template <class T>
Var<T> mean_all(Var<T> a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a.value().size()));
}

/// [1] -> [n] by repetition.
template <class T>
Var<T> expand_rows(Var<T> a, int n) {
  require(a.value().size() == 1, "expand_rows expects a single element");
  Graph<T>* g = a.graph;
  return g->record(Tensor<T>(Shape{n}, a.value()[0]), {a}, [g, a](const Tensor<T>& go) {
    T s = 0;
    for (T v : go.values()) s += v;
    g->accumulate(a, Tensor<T>(a.shape(), s));
  });
}

// ---------------------------------------------------------------- broadcasting

/// y[..., c] = exp(log_s[c]) * x[..., c] + b[c].
template <class T>
Var<T> channel_affine(Var<T> x, Var<T> log_s, Var<T> b) {
  const int c = x.dim(-1);
  require(log_s.value().size() == static_cast<std::size_t>(c) && b.value().size() == static_cast<std::size_t>(c),
          "channel_affine: channel mismatch " + shape_str(x.shape()));
  std::vector<T> s(c);
  for (int k = 0; k < c; ++k) s[k] = std::exp(log_s.value()[k]);
  Tensor<T> out(x.shape());
  const std::size_t npos = x.value().size() / c;
  for (std::size_t p = 0; p < npos; ++p)
    for (int k = 0; k < c; ++k) out[p * c + k] = s[k] * x.value()[p * c + k] + b.value()[k];
  Graph<T>* g = x.graph;
  return g->record(std::move(out), {x, log_s, b}, [g, x, log_s, b, s, c, npos](const Tensor<T>& go) {
    if (g->requires_grad(x)) {
      Tensor<T> gx(x.shape());
      for (std::size_t p = 0; p < npos; ++p)
        for (int k = 0; k < c; ++k) gx[p * c + k] = go[p * c + k] * s[k];
      g->accumulate(x, gx);
    }
    Tensor<T> gs(log_s.shape()), gb(b.shape());
    for (std::size_t p = 0; p < npos; ++p)
      for (int k = 0; k < c; ++k) {
        gs[k] += go[p * c + k] * x.value()[p * c + k] * s[k];
        gb[k] += go[p * c + k];
      }
    g->accumulate(log_s, gs);
    g->accumulate(b, gb);
  });
}

/// x[n, ..., c] + v[n, c], the per-channel vector added at every position.
template <class T>
Var<T> add_channel_rows(Var<T> x, Var<T> v) {
  const int n = x.dim(0), c = x.dim(-1);
  require(v.value().rank() == 2 && v.dim(0) == n && v.dim(1) == c,
          "add_channel_rows: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
  const std::size_t npos = x.value().row_size() / c;
  Tensor<T> out(x.shape());
  for (int r = 0; r < n; ++r)
    for (std::size_t p = 0; p < npos; ++p)
      for (int k = 0; k < c; ++k) {
        const std::size_t i = (r * npos + p) * c + k;
        out[i] = x.value()[i] + v.value()[r * c + k];
      }
  Graph<T>* g = x.graph;
  return g->record(std::move(out), {x, v}, [g, x, v, n, c, npos](const Tensor<T>& go) {
    g->accumulate(x, go);
    if (!g->requires_grad(v)) return;
    Tensor<T> gv(v.shape());
    for (int r = 0; r < n; ++r)
      for (std::size_t p = 0; p < npos; ++p)
        for (int k = 0; k < c; ++k) gv[r * c + k] += go[(r * npos + p) * c + k];
    g->accumulate(v, gv);
  });
}

// ------------------------------------------------------------- linear algebra

/// x[n, m] · w[m, k] + b[k].
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  using namespace detail;
  require(x.value().rank() == 2 && w.value().rank() == 2 && x.dim(1) == w.dim(0) &&
              b.value().size() == static_cast<std::size_t>(w.dim(1)),
          "linear: " + shape_str(x.shape()) + " x " + shape_str(w.shape()) + " + " + shape_str(b.shape()));
  const int n = x.dim(0), m = w.dim(0), k = w.dim(1);
  Tensor<T> out(Shape{n, k});
  MapMat<T> o(out.data(), n, k);
  o.noalias() = CMapMat<T>(x.value().data(), n, m) * CMapMat<T>(w.value().data(), m, k);
  o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().data(), k);
  Graph<T>* g = x.graph;
  return g->record(std::move(out), {x, w, b}, [g, x, w, b, n, m, k](const Tensor<T>& go) {
    CMapMat<T> gom(go.data(), n, k);
    if (g->requires_grad(x)) {
      Tensor<T> gx(x.shape());
      MapMat<T>(gx.data(), n, m).noalias() = gom * CMapMat<T>(w.value().data(), m, k).transpose();
      g->accumulate(x, gx);
    }
    if (g->requires_grad(w)) {
      Tensor<T> gw(w.shape());
      MapMat<T>(gw.data(), m, k).noalias() = CMapMat<T>(x.value().data(), n, m).transpose() * gom;
      g->accumulate(w, gw);
    }
    if (g->requires_grad(b)) {
      Tensor<T> gb(b.shape());
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), k) = gom.colwise().sum();
      g->accumulate(b, gb);
    }
  });
}

/// Per-position channel mixing y[..., i] = Σ_j w[i, j] x[..., j].
template <class T>
Var<T> channel_matmul(Var<T> x, Var<T> w) {
  using namespace detail;
  const int c = x.dim(-1);
  require(w.value().rank() == 2 && w.dim(0) == c && w.dim(1) == c,
          "channel_matmul: " + shape_str(x.shape()) + " with " + shape_str(w.shape()));
  const int npos = static_cast<int>(x.value().size() / c);
  Tensor<T> out(x.shape());
  MapMat<T>(out.data(), npos, c).noalias() =
      CMapMat<T>(x.value().data(), npos, c) * CMapMat<T>(w.value().data(), c, c).transpose();
  Graph<T>* g = x.graph;
  return g->record(std::move(out), {x, w}, [g, x, w, c, npos](const Tensor<T>& go) {
    CMapMat<T> gom(go.data(), npos, c);
    if (g->requires_grad(x)) {
      Tensor<T> gx(x.shape());
      MapMat<T>(gx.data(), npos, c).noalias() = gom * CMapMat<T>(w.value().data(), c, c);
      g->accumulate(x, gx);
    }
    if (g->requires_grad(w)) {
      Tensor<T> gw(w.shape());
      MapMat<T>(gw.data(), c, c).noalias() = gom.transpose() * CMapMat<T>(x.value().data(), npos, c);
      g->accumulate(w, gw);
    }
  });
}

/// W = P · L · U with L = I + strict_lower(lower), U = strict_upper(upper) +
/// diag(sign ⊙ exp(log_diag)), and (P·M)[i, :] = M[perm[i], :].
template <class T>
Var<T> plu_weight(Var<T> lower, Var<T> upper, Var<T> log_diag, const std::vector<int>& perm,
                  const std::vector<T>& sign) {
  using namespace detail;
  const int c = static_cast<int>(perm.size());
  RowMat<T> L = RowMat<T>::Identity(c, c), U = RowMat<T>::Zero(c, c);
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < c; ++j) {
      if (j < i) L(i, j) = lower.value()[i * c + j];
      if (j > i) U(i, j) = upper.value()[i * c + j];
    }
  for (int i = 0; i < c; ++i) U(i, i) = sign[i] * std::exp(log_diag.value()[i]);
  RowMat<T> A = L * U;
  Tensor<T> out(Shape{c, c});
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < c; ++j) out[i * c + j] = A(perm[i], j);
  Graph<T>* g = lower.graph;
  return g->record(std::move(out), {lower, upper, log_diag},
                   [g, lower, upper, log_diag, perm, L, U, c](const Tensor<T>& go) {
                     RowMat<T> dA(c, c);
                     for (int i = 0; i < c; ++i)
                       for (int j = 0; j < c; ++j) dA(perm[i], j) = go[i * c + j];
                     RowMat<T> dL = dA * U.transpose();
                     RowMat<T> dU = L.transpose() * dA;
                     Tensor<T> gl(lower.shape()), gu(upper.shape()), gd(log_diag.shape());
                     for (int i = 0; i < c; ++i)
                       for (int j = 0; j < c; ++j) {
                         if (j < i) gl[i * c + j] = dL(i, j);
                         if (j > i) gu[i * c + j] = dU(i, j);
                       }
                     for (int i = 0; i < c; ++i) gd[i] = dU(i, i) * U(i, i);
                     g->accumulate(lower, gl);
                     g->accumulate(upper, gu);
                     g->accumulate(log_diag, gd);
                   });
}

// ------------------------------------------------------------------ convolution

/// Cross-correlation of x[n, h, w, ci] with kernel[k, k, ci, co] plus bias[co],
/// zero padding `pad`, output spatial size (h + 2·pad − k) / stride + 1.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> kernel, Var<T> bias, int stride, int pad) {
  using namespace detail;
  const Tensor<T>& xv = x.value();
  const Tensor<T>& kv = kernel.value();
  require(xv.rank() == 4 && kv.rank() == 4 && kv.dim(0) == kv.dim(1) && kv.dim(2) == xv.dim(3) &&
              bias.value().size() == static_cast<std::size_t>(kv.dim(3)),
          "conv2d: input " + shape_str(xv.shape()) + " kernel " + shape_str(kv.shape()));
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const int n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), ci = xv.dim(3);
  const int k = kv.dim(0), co = kv.dim(3);
  const int ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;
  require(ho > 0 && wo > 0, "conv2d: empty output");
  const int rows = n * ho * wo, kk = k * k * ci;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  // im2col: row (b, oy, ox), column (ky, kx, ch) matching the kernel layout.
  AlignedVector<T> cols;
  if (!direct) {
    cols.assign(static_cast<std::size_t>(rows) * kk, T(0));
    for (int b = 0; b < n; ++b)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          T* dst = cols.data() + static_cast<std::size_t>((b * ho + oy) * wo + ox) * kk;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= w) continue;
              const T* src = xv.data() + ((static_cast<std::size_t>(b) * h + iy) * w + ix) * ci;
              std::copy(src, src + ci, dst + (ky * k + kx) * ci);
            }
          }
        }
  }
  const T* colp = direct ? xv.data() : cols.data();
  Tensor<T> out(Shape{n, ho, wo, co});
  MapMat<T> o(out.data(), rows, co);
  o.noalias() = CMapMat<T>(colp, rows, kk) * CMapMat<T>(kv.data(), kk, co);
  o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.value().data(), co);
  if (!out.all_finite()) throw NumericError("conv2d produced non-finite output");

  Graph<T>* g = x.graph;
  return g->record(
      std::move(out), {x, kernel, bias},
      [g, x, kernel, bias, cols = std::move(cols), direct, n, h, w, ci, k, co, ho, wo, rows, kk, stride,
       pad](const Tensor<T>& go) {
        CMapMat<T> gom(go.data(), rows, co);
        const T* colp = direct ? x.value().data() : cols.data();
        if (g->requires_grad(kernel)) {
          Tensor<T> gk(kernel.shape());
          MapMat<T>(gk.data(), kk, co).noalias() = CMapMat<T>(colp, rows, kk).transpose() * gom;
          g->accumulate(kernel, gk);
        }
        if (g->requires_grad(bias)) {
          Tensor<T> gb(bias.shape());
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), co) = gom.colwise().sum();
          g->accumulate(bias, gb);
        }
        if (!g->requires_grad(x)) return;
        Tensor<T>& gx = g->grad_buffer(x);
        if (direct) {
          MapMat<T>(gx.data(), rows, kk).noalias() += gom * CMapMat<T>(kernel.value().data(), kk, co).transpose();
          return;
        }
        RowMat<T> gcols = gom * CMapMat<T>(kernel.value().data(), kk, co).transpose();
        for (int b = 0; b < n; ++b)
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
              const T* src = gcols.data() + static_cast<std::size_t>((b * ho + oy) * wo + ox) * kk;
              for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < k; ++kx) {
                  const int ix = ox * stride + kx - pad;
                  if (ix < 0 || ix >= w) continue;
                  T* dst = gx.data() + ((static_cast<std::size_t>(b) * h + iy) * w + ix) * ci;
                  const T* s = src + (ky * k + kx) * ci;
                  for (int c = 0; c < ci; ++c) dst[c] += s[c];
                }
              }
            }
      });
}

// ------------------------------------------------------------ shape movement

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  Graph<T>* g = x.graph;
  return g->record(x.value().reshaped(std::move(shape)), {x},
                   [g, x](const Tensor<T>& go) { g->accumulate(x, go.reshaped(x.shape())); });
}

/// Selects last-axis entries `idx` (in order).
template <class T>
Var<T> gather_last(Var<T> x, std::vector<int> idx) {
  const int c = x.dim(-1), m = static_cast<int>(idx.size());
  for (int i : idx) require(i >= 0 && i < c, "gather_last: index out of range");
  Shape s = x.shape();
  s.back() = m;
  const std::size_t npos = x.value().size() / c;
  Tensor<T> out(s);
  for (std::size_t p = 0; p < npos; ++p)
    for (int j = 0; j < m; ++j) out[p * m + j] = x.value()[p * c + idx[j]];
  Graph<T>* g = x.graph;
  return g->record(std::move(out), {x}, [g, x, idx = std::move(idx), c, m, npos](const Tensor<T>& go) {
    if (!g->requires_grad(x)) return;
    Tensor<T>& gx = g->grad_buffer(x);
    for (std::size_t p = 0; p < npos; ++p)
      for (int j = 0; j < m; ++j) gx[p * c + idx[j]] += go[p * m + j];
  });
}

/// Inverse of two gathers: out[..., ia[j]] = a[..., j], out[..., ib[j]] = b[..., j].
template <class T>
Var<T> merge_last(Var<T> a, Var<T> b, std::vector<int> ia, std::vector<int> ib) {
  const int ca = a.dim(-1), cb = b.dim(-1), c = ca + cb;
  require(static_cast<int>(ia.size()) == ca && static_cast<int>(ib.size()) == cb,
          "merge_last: index lists do not match inputs");
  require(a.value().size() / ca == b.value().size() / cb, "merge_last: position count mismatch");
  Shape s = a.shape();
  s.back() = c;
  const std::size_t npos = a.value().size() / ca;
  Tensor<T> out(s);
  for (std::size_t p = 0; p < npos; ++p) {
    for (int j = 0; j < ca; ++j) out[p * c + ia[j]] = a.value()[p * ca + j];
    for (int j = 0; j < cb; ++j) out[p * c + ib[j]] = b.value()[p * cb + j];
  }
  Graph<T>* g = a.graph;
  return g->record(std::move(out), {a, b}, [g, a, b, ia = std::move(ia), ib = std::move(ib), ca, cb, c,
                                            npos](const Tensor<T>& go) {
    if (g->requires_grad(a)) {
      Tensor<T> ga(a.shape());
      for (std::size_t p = 0; p < npos; ++p)
        for (int j = 0; j < ca; ++j) ga[p * ca + j] = go[p * c + ia[j]];
      g->accumulate(a, ga);
    }
    if (g->requires_grad(b)) {
      Tensor<T> gb(b.shape());
      for (std::size_t p = 0; p < npos; ++p)
        for (int j = 0; j < cb; ++j) gb[p * cb + j] = go[p * c + ib[j]];
      g->accumulate(b, gb);
    }
  });
}

inline std::vector<int> iota_range(int begin, int count) {
  std::vector<int> v(count);
  for (int i = 0; i < count; ++i) v[i] = begin + i;
  return v;
}

template <class T>
Var<T> slice_last(Var<T> x, int begin, int count) {
  return gather_last(x, iota_range(begin, count));
}

/// Index map for the 2×2 space-to-channel squeeze of an [h, w, c] image:
/// out[i, j, (dy·2 + dx)·c + ch] = in[2i + dy, 2j + dx, ch]. Entry o of the
/// result is the flat input offset feeding flat output offset o.
inline std::vector<int> squeeze_index(int h, int w, int c) {
  std::vector<int> src(static_cast<std::size_t>(h) * w * c);
  const int h2 = h / 2, w2 = w / 2, c4 = 4 * c;
  for (int i = 0; i < h2; ++i)
    for (int j = 0; j < w2; ++j)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          for (int ch = 0; ch < c; ++ch)
            src[(i * w2 + j) * c4 + (dy * 2 + dx) * c + ch] = ((2 * i + dy) * w + 2 * j + dx) * c + ch;
  return src;
}

// Applies a per-row permutation: out[r, o] = x[r, perm[o]], reshaped to `shape`.
template <class T>
Var<T> permute_rows(Var<T> x, std::vector<int> perm, Shape shape) {
  const int n = x.dim(0);
  const std::size_t rs = x.value().row_size();
  require(perm.size() == rs && shape_size(shape) == x.value().size(), "permute_rows: size mismatch");
  Tensor<T> out(shape);
  for (int r = 0; r < n; ++r)
    for (std::size_t o = 0; o < rs; ++o) out[r * rs + o] = x.value()[r * rs + perm[o]];
  Graph<T>* g = x.graph;
  return g->record(std::move(out), {x}, [g, x, perm = std::move(perm), n, rs](const Tensor<T>& go) {
    Tensor<T> gx(x.shape());
    for (int r = 0; r < n; ++r)
      for (std::size_t o = 0; o < rs; ++o) gx[r * rs + perm[o]] = go[r * rs + o];
    g->accumulate(x, gx);
  });
}

template <class T>
Var<T> squeeze2(Var<T> x) {
  require(x.value().rank() == 4, "squeeze expects [n,h,w,c]");
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (h % 2 || w % 2) throw ConfigError("squeeze: odd spatial dims " + shape_str(x.shape()));
  return permute_rows(x, squeeze_index(h, w, c), Shape{n, h / 2, w / 2, 4 * c});
}

template <class T>
Var<T> unsqueeze2(Var<T> x) {
  require(x.value().rank() == 4 && x.dim(3) % 4 == 0, "unsqueeze expects [n,h,w,4c]");
  const int n = x.dim(0), h = 2 * x.dim(1), w = 2 * x.dim(2), c = x.dim(3) / 4;
  const std::vector<int> fwd = squeeze_index(h, w, c);
  std::vector<int> inv(fwd.size());
  for (std::size_t o = 0; o < fwd.size(); ++o) inv[fwd[o]] = static_cast<int>(o);
  return permute_rows(x, std::move(inv), Shape{n, h, w, c});
}

/// Flattens each part to [n, k_i] and concatenates along axis 1.
template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat_rows of nothing");
  const int n = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.dim(0) == n, "concat_rows: batch mismatch");
    widths.push_back(p.value().row_size());
    total += widths.back();
  }
  Tensor<T> out(Shape{n, static_cast<int>(total)});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (int r = 0; r < n; ++r)
      std::copy_n(parts[k].value().data() + r * widths[k], widths[k], out.data() + r * total + off);
    off += widths[k];
  }
  Graph<T>* g = parts[0].graph;
  return g->record(std::move(out), std::span<const Var<T>>(parts), [g, parts, widths, total, n](const Tensor<T>& go) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (g->requires_grad(parts[k])) {
        Tensor<T> gp(parts[k].shape());
        for (int r = 0; r < n; ++r) std::copy_n(go.data() + r * total + off, widths[k], gp.data() + r * widths[k]);
        g->accumulate(parts[k], gp);
      }
      off += widths[k];
    }
  });
}

/// Columns [begin, begin + prod(shape[1:])) of x[n, D], reshaped to `shape`.
template <class T>
Var<T> take_cols(Var<T> x, int begin, Shape shape) {
  require(x.value().rank() == 2, "take_cols expects [n, D]");
  const int n = x.dim(0), total = x.dim(1);
  const int width = static_cast<int>(shape_size(shape) / n);
  require(begin >= 0 && begin + width <= total, "take_cols: range out of bounds");
  Tensor<T> out(shape);
  for (int r = 0; r < n; ++r)
    std::copy_n(x.value().data() + static_cast<std::size_t>(r) * total + begin, width, out.data() + r * width);
  Graph<T>* g = x.graph;
  return g->record(std::move(out), {x}, [g, x, n, total, width, begin](const Tensor<T>& go) {
    if (!g->requires_grad(x)) return;
    Tensor<T>& gx = g->grad_buffer(x);
    for (int r = 0; r < n; ++r)
      for (int j = 0; j < width; ++j) gx[static_cast<std::size_t>(r) * total + begin + j] += go[r * width + j];
  });
}

// -------------------------------------------------------------- densities

/// Row-wise standard-normal log density: −½Σv² − ½·D·ln(2π), shape [n].
template <class T>
Var<T> std_normal_log_prob(Var<T> v) {
  const T d = static_cast<T>(v.value().row_size());
  const T c = T(-0.5) * d * std::log(T(2) * std::numbers::pi_v<T>);
  return add_scalar(scale(sum_rows(square(v)), T(-0.5)), c);
}

}  // namespace flowvae::ops
