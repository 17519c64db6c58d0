// Copyright 2026 The fedsis Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Differentiable operations over BasicTensor. Every op copies into a fresh
// contiguous buffer; the only broadcasting supported is a rank-0 operand in
// the elementwise binaries.

#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "fedsis/tensor.hpp"

namespace fedsis {

namespace detail {

// Message expressions are only evaluated on failure.
#define FEDSIS_CHECK_SHAPE(cond, msg)                     \
  do {                                                    \
    if (!(cond)) throw ::fedsis::Error("shape", (msg));   \
  } while (0)

// Shapes for a binary elementwise op: equal, or one side rank-0.
template <class T>
Shape binary_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.rank() == 0) return a.shape();
  if (a.rank() == 0) return b.shape();
  throw Error("shape", std::string(op) + " " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
}

// Index of operand element feeding output element i (rank-0 -> always 0).
template <class T>
inline std::size_t pick(const Node<T>& n, std::size_t i) {
  return n.value.size() == 1 && n.shape.empty() ? 0 : i;
}

template <class T>
struct AxisSplit {
  std::size_t outer, n, inner;
};

template <class T>
AxisSplit<T> split_axis(const Shape& s, std::size_t axis) {
  FEDSIS_CHECK_SHAPE(axis < s.size(), "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit<T> r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// C[n x m] += A[n x k] * B[k x m]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    T* ci = c + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      const T* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[n x k] += G[n x m] * B[k x m]^T, via an explicit transpose of B so the
// inner loop runs over contiguous memory.
template <class T>
void gemm_nt(const T* g, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
  std::vector<T> bt(k * m);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < m; ++j) bt[j * k + p] = b[p * m + j];
  gemm_nn(g, bt.data(), c, n, m, k);
}

// C[k x m] += A[n x k]^T * G[n x m]
template <class T>
void gemm_tn(const T* a, const T* g, T* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* gi = g + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      T* cp = c + p * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += aip * gi[j];
    }
  }
}

template <class T, class F, class D>
BasicTensor<T> unary(const BasicTensor<T>& a, F f, D dfdx) {
  std::vector<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result<T>(a.shape(), std::move(out), {a}, [dfdx](Node<T>& self) {
    auto& in = *self.inputs[0];
    for (std::size_t i = 0; i < self.adj.size(); ++i) {
      in.adj[i] += self.adj[i] * dfdx(in.value[i], self.value[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  Shape s = detail::binary_shape(a, b, "add");
  const std::size_t n = shape_numel(s);
  std::vector<T> out(n);
  const auto& an = *a.node();
  const auto& bn = *b.node();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = an.value[detail::pick(an, i)] + bn.value[detail::pick(bn, i)];
  }
  return detail::make_result<T>(std::move(s), std::move(out), {a, b}, [](detail::Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!self.wants(k)) continue;
      auto& in = *self.inputs[k];
      for (std::size_t i = 0; i < self.adj.size(); ++i) in.adj[detail::pick(in, i)] += self.adj[i];
    }
  });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  Shape s = detail::binary_shape(a, b, "sub");
  const std::size_t n = shape_numel(s);
  std::vector<T> out(n);
  const auto& an = *a.node();
  const auto& bn = *b.node();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = an.value[detail::pick(an, i)] - bn.value[detail::pick(bn, i)];
  }
  return detail::make_result<T>(std::move(s), std::move(out), {a, b}, [](detail::Node<T>& self) {
    if (self.wants(0)) {
      auto& in = *self.inputs[0];
      for (std::size_t i = 0; i < self.adj.size(); ++i) in.adj[detail::pick(in, i)] += self.adj[i];
    }
    if (self.wants(1)) {
      auto& in = *self.inputs[1];
      for (std::size_t i = 0; i < self.adj.size(); ++i) in.adj[detail::pick(in, i)] -= self.adj[i];
    }
  });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  Shape s = detail::binary_shape(a, b, "mul");
  const std::size_t n = shape_numel(s);
  std::vector<T> out(n);
  const auto& an = *a.node();
  const auto& bn = *b.node();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = an.value[detail::pick(an, i)] * bn.value[detail::pick(bn, i)];
  }
  return detail::make_result<T>(std::move(s), std::move(out), {a, b}, [](detail::Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    for (std::size_t i = 0; i < self.adj.size(); ++i) {
      const std::size_t ix = detail::pick(x, i);
      const std::size_t iy = detail::pick(y, i);
      if (x.active) x.adj[ix] += self.adj[i] * y.value[iy];
      if (y.active) y.adj[iy] += self.adj[i] * x.value[ix];
    }
  });
}

template <class T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  Shape s = detail::binary_shape(a, b, "div");
  const std::size_t n = shape_numel(s);
  std::vector<T> out(n);
  const auto& an = *a.node();
  const auto& bn = *b.node();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = an.value[detail::pick(an, i)] / bn.value[detail::pick(bn, i)];
  }
  return detail::make_result<T>(std::move(s), std::move(out), {a, b}, [](detail::Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    for (std::size_t i = 0; i < self.adj.size(); ++i) {
      const std::size_t ix = detail::pick(x, i);
      const std::size_t iy = detail::pick(y, i);
      const T yv = y.value[iy];
      if (x.active) x.adj[ix] += self.adj[i] / yv;
      if (y.active) y.adj[iy] -= self.adj[i] * x.value[ix] / (yv * yv);
    }
  });
}

template <class T>
BasicTensor<T> neg(const BasicTensor<T>& a) {
  return detail::unary(a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <class T>
BasicTensor<T> exp(const BasicTensor<T>& a) {
  return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
BasicTensor<T> log(const BasicTensor<T>& a) {
  return detail::unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

/// Multiplication by a constant that is not part of the graph.
template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T c) {
  return detail::unary(a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T c) {
  return detail::unary(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  return detail::unary(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
BasicTensor<T> tanh(const BasicTensor<T>& a) {
  return detail::unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& a) {
  return detail::unary(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  FEDSIS_CHECK_SHAPE(a.rank() == 2 && b.rank() == 2 && a.extent(1) == b.extent(0),
                  "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t n = a.extent(0), k = a.extent(1), m = b.extent(1);
  std::vector<T> out(n * m, T(0));
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), n, k, m);
  return detail::make_result<T>(Shape{n, m}, std::move(out), {a, b},
                                [n, k, m](detail::Node<T>& self) {
                                  auto& x = *self.inputs[0];
                                  auto& y = *self.inputs[1];
                                  if (x.active) {
                                    detail::gemm_nt(self.adj.data(), y.value.data(), x.adj.data(), n, k, m);
                                  }
                                  if (y.active) {
                                    detail::gemm_tn(x.value.data(), self.adj.data(), y.adj.data(), n, k, m);
                                  }
                                });
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  FEDSIS_CHECK_SHAPE(a.rank() == 2, "transpose needs rank 2, got " + shape_str(a.shape()));
  const std::size_t r = a.extent(0), c = a.extent(1);
  std::vector<T> out(r * c);
  const auto x = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return detail::make_result<T>(Shape{c, r}, std::move(out), {a}, [r, c](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) in.adj[i * c + j] += self.adj[j * r + i];
  });
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  FEDSIS_CHECK_SHAPE(shape_numel(shape) == a.numel(),
                  "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), {a}, [](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    for (std::size_t i = 0; i < self.adj.size(); ++i) in.adj[i] += self.adj[i];
  });
}

/// x[n x m] + b[m] added to every row.
template <class T>
BasicTensor<T> add_row_bias(const BasicTensor<T>& x, const BasicTensor<T>& b) {
  FEDSIS_CHECK_SHAPE(x.rank() == 2 && b.rank() == 1 && b.extent(0) == x.extent(1),
                  "add_row_bias " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  const std::size_t n = x.extent(0), m = x.extent(1);
  std::vector<T> out(x.data().begin(), x.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bv[j];
  return detail::make_result<T>(x.shape(), std::move(out), {x, b}, [n, m](detail::Node<T>& self) {
    if (self.wants(0)) {
      auto& in = *self.inputs[0];
      for (std::size_t i = 0; i < self.adj.size(); ++i) in.adj[i] += self.adj[i];
    }
    if (self.wants(1)) {
      auto& bias = *self.inputs[1];
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) bias.adj[j] += self.adj[i * m + j];
    }
  });
}

/// x[n x in] * w[in x out] + b[out]
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  return add_row_bias(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Normalizations

/// Softmax along `axis`, stabilized by subtracting the slice maximum.
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& a, std::size_t axis) {
  const auto sp = detail::split_axis<T>(a.shape(), axis);
  std::vector<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) mx = std::max(mx, x[base + j * sp.inner]);
      T sum = T(0);
      for (std::size_t j = 0; j < sp.n; ++j) {
        const T e = std::exp(x[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] /= sum;
    }
  }
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [sp](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        T dot = T(0);
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t k = base + j * sp.inner;
          dot += self.adj[k] * self.value[k];
        }
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t k = base + j * sp.inner;
          in.adj[k] += self.value[k] * (self.adj[k] - dot);
        }
      }
    }
  });
}

template <class T>
BasicTensor<T> log_softmax(const BasicTensor<T>& a, std::size_t axis) {
  const auto sp = detail::split_axis<T>(a.shape(), axis);
  std::vector<T> out(a.numel());
  const auto x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) mx = std::max(mx, x[base + j * sp.inner]);
      T sum = T(0);
      for (std::size_t j = 0; j < sp.n; ++j) sum += std::exp(x[base + j * sp.inner] - mx);
      const T lse = mx + std::log(sum);
      for (std::size_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] = x[base + j * sp.inner] - lse;
    }
  }
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [sp](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        T gsum = T(0);
        for (std::size_t j = 0; j < sp.n; ++j) gsum += self.adj[base + j * sp.inner];
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t k = base + j * sp.inner;
          in.adj[k] += self.adj[k] - std::exp(self.value[k]) * gsum;
        }
      }
    }
  });
}

/// Row-wise layer normalization of x[n x d] with affine gain/bias[d].
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, T eps = T(1e-5)) {
  FEDSIS_CHECK_SHAPE(x.rank() == 2 && gain.rank() == 1 && bias.rank() == 1 &&
                      gain.extent(0) == x.extent(1) && bias.extent(0) == x.extent(1),
                  "layer_norm " + shape_str(x.shape()));
  const std::size_t n = x.extent(0), d = x.extent(1);
  std::vector<T> out(n * d), xhat(n * d), rstd(n);
  const auto xv = x.data();
  const auto g = gain.data();
  const auto b = bias.data();
  for (std::size_t i = 0; i < n; ++i) {
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += xv[i * d + j];
    mean /= T(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T c = xv[i * d + j] - mean;
      var += c * c;
    }
    var /= T(d);
    rstd[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xv[i * d + j] - mean) * rstd[i];
      out[i * d + j] = xhat[i * d + j] * g[j] + b[j];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gain, bias},
      [n, d, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node<T>& self) {
        auto& xin = *self.inputs[0];
        auto& gin = *self.inputs[1];
        auto& bin = *self.inputs[2];
        for (std::size_t i = 0; i < n; ++i) {
          const T* dy = self.adj.data() + i * d;
          const T* xh = xhat.data() + i * d;
          if (gin.active)
            for (std::size_t j = 0; j < d; ++j) gin.adj[j] += dy[j] * xh[j];
          if (bin.active)
            for (std::size_t j = 0; j < d; ++j) bin.adj[j] += dy[j];
          if (xin.active) {
            T m1 = T(0), m2 = T(0);
            for (std::size_t j = 0; j < d; ++j) {
              const T dxh = dy[j] * gin.value[j];
              m1 += dxh;
              m2 += dxh * xh[j];
            }
            m1 /= T(d);
            m2 /= T(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T dxh = dy[j] * gin.value[j];
              xin.adj[i * d + j] += rstd[i] * (dxh - m1 - xh[j] * m2);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions (all return rank-0 except sum_axis)

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  return detail::make_result<T>(Shape{}, std::vector<T>{s}, {a}, [](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    const T g = self.adj[0];
    for (auto& v : in.adj) v += g;
  });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  return scale(sum(a), T(1) / T(a.numel()));
}

template <class T>
BasicTensor<T> sq_l2_norm(const BasicTensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v * v;
  return detail::make_result<T>(Shape{}, std::vector<T>{s}, {a}, [](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    const T g = self.adj[0];
    for (std::size_t i = 0; i < in.adj.size(); ++i) in.adj[i] += T(2) * g * in.value[i];
  });
}

/// Sum over one axis; the axis is removed from the result shape.
template <class T>
BasicTensor<T> sum_axis(const BasicTensor<T>& a, std::size_t axis) {
  const auto sp = detail::split_axis<T>(a.shape(), axis);
  Shape s = a.shape();
  s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> out(sp.outer * sp.inner, T(0));
  const auto x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += x[(o * sp.n + j) * sp.inner + i];
  return detail::make_result<T>(std::move(s), std::move(out), {a}, [sp](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.n; ++j)
        for (std::size_t i = 0; i < sp.inner; ++i)
          in.adj[(o * sp.n + j) * sp.inner + i] += self.adj[o * sp.inner + i];
  });
}

/// <a, b> for equal-shaped tensors.
template <class T>
BasicTensor<T> dot(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  FEDSIS_CHECK_SHAPE(a.shape() == b.shape(), "dot " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return sum(mul(a, b));
}

// ---------------------------------------------------------------------------
// Layout

/// Concatenate along `axis`; all other extents must agree.
template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  FEDSIS_CHECK_SHAPE(!parts.empty(), "concat of nothing");
  Shape s = parts[0].shape();
  FEDSIS_CHECK_SHAPE(axis < s.size(), "concat axis out of range");
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape q = p.shape();
    FEDSIS_CHECK_SHAPE(q.size() == s.size(), "concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      FEDSIS_CHECK_SHAPE(i == axis || q[i] == s[i],
                      "concat " + shape_str(s) + " with " + shape_str(q));
    }
    widths.push_back(q[axis]);
    total += q[axis];
  }
  s[axis] = total;
  const auto sp = detail::split_axis<T>(s, axis);
  std::vector<T> out(shape_numel(s));
  std::vector<BasicTensor<T>> inputs(parts.begin(), parts.end());
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto x = parts[k].data();
    const std::size_t w = widths[k];
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t i = 0; i < sp.inner; ++i)
          out[(o * total + offset + j) * sp.inner + i] = x[(o * w + j) * sp.inner + i];
    offset += w;
  }
  return detail::make_result<T>(std::move(s), std::move(out), std::move(inputs),
                                [sp, widths, total](detail::Node<T>& self) {
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < widths.size(); ++k) {
                                    const std::size_t w = widths[k];
                                    if (self.wants(k)) {
                                      auto& in = *self.inputs[k];
                                      for (std::size_t o = 0; o < sp.outer; ++o)
                                        for (std::size_t j = 0; j < w; ++j)
                                          for (std::size_t i = 0; i < sp.inner; ++i)
                                            in.adj[(o * w + j) * sp.inner + i] +=
                                                self.adj[(o * total + off + j) * sp.inner + i];
                                    }
                                    off += w;
                                  }
                                });
}

/// Half-open range [begin, end) along `axis`.
template <class T>
BasicTensor<T> slice(const BasicTensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto sp = detail::split_axis<T>(a.shape(), axis);
  FEDSIS_CHECK_SHAPE(begin < end && end <= sp.n, "slice [" + std::to_string(begin) + "," +
                                                  std::to_string(end) + ") of " + shape_str(a.shape()));
  Shape s = a.shape();
  const std::size_t w = end - begin;
  s[axis] = w;
  std::vector<T> out(shape_numel(s));
  const auto x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[(o * w + j) * sp.inner + i] = x[(o * sp.n + begin + j) * sp.inner + i];
  return detail::make_result<T>(std::move(s), std::move(out), {a},
                                [sp, begin, w](detail::Node<T>& self) {
                                  auto& in = *self.inputs[0];
                                  for (std::size_t o = 0; o < sp.outer; ++o)
                                    for (std::size_t j = 0; j < w; ++j)
                                      for (std::size_t i = 0; i < sp.inner; ++i)
                                        in.adj[(o * sp.n + begin + j) * sp.inner + i] +=
                                            self.adj[(o * w + j) * sp.inner + i];
                                });
}

// ---------------------------------------------------------------------------
// Image ops. Feature maps are C x H x W.

struct ConvGeometry {
  std::size_t c_in, h, w, c_out, k, stride, pad, h_out, w_out;
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride, std::size_t pad) {
  FEDSIS_CHECK_SHAPE(x.size() == 3 && w.size() == 4, "conv2d " + shape_str(x) + " * " + shape_str(w));
  FEDSIS_CHECK_SHAPE(w[1] == x[0], "conv2d channel mismatch " + shape_str(x) + " * " + shape_str(w));
  FEDSIS_CHECK_SHAPE(w[2] == w[3] && w[2] % 2 == 1, "conv2d needs an odd square kernel, got " + shape_str(w));
  FEDSIS_CHECK_SHAPE(stride >= 1, "conv2d stride must be positive");
  ConvGeometry g{x[0], x[1], x[2], w[0], w[2], stride, pad, 0, 0};
  FEDSIS_CHECK_SHAPE(x[1] + 2 * pad >= g.k && x[2] + 2 * pad >= g.k, "conv2d kernel larger than padded input");
  g.h_out = (x[1] + 2 * pad - g.k) / stride + 1;
  g.w_out = (x[2] + 2 * pad - g.k) / stride + 1;
  return g;
}

namespace detail {

// cols[(c*k + ky)*k + kx][oy*w_out + ox]
template <class T>
std::vector<T> im2col(const T* x, const ConvGeometry& g) {
  const std::size_t hw = g.h_out * g.w_out;
  std::vector<T> cols(g.c_in * g.k * g.k * hw, T(0));
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = cols.data() + ((c * g.k + ky) * g.k + kx) * hw;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            row[oy * g.w_out + ox] = x[(c * g.h + static_cast<std::size_t>(iy)) * g.w +
                                       static_cast<std::size_t>(ix)];
          }
        }
      }
  return cols;
}

template <class T>
void col2im_add(const T* cols, T* dx, const ConvGeometry& g) {
  const std::size_t hw = g.h_out * g.w_out;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((c * g.k + ky) * g.k + kx) * hw;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            dx[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] +=
                row[oy * g.w_out + ox];
          }
        }
      }
}

}  // namespace detail

/// Cross-correlation of x[C_in x H x W] with w[C_out x C_in x k x k].
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, std::size_t stride = 1,
                      std::size_t pad = 0) {
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), stride, pad);
  const std::size_t r = g.c_in * g.k * g.k;
  const std::size_t hw = g.h_out * g.w_out;
  std::vector<T> cols = detail::im2col(x.data().data(), g);
  std::vector<T> out(g.c_out * hw, T(0));
  detail::gemm_nn(w.data().data(), cols.data(), out.data(), g.c_out, r, hw);
  const bool keep_cols = grad_mode_enabled() && w.requires_grad();
  return detail::make_result<T>(
      Shape{g.c_out, g.h_out, g.w_out}, std::move(out), {x, w},
      [g, r, hw, cols = keep_cols ? std::move(cols) : std::vector<T>{}](detail::Node<T>& self) {
        auto& xin = *self.inputs[0];
        auto& win = *self.inputs[1];
        if (win.active) detail::gemm_nt(self.adj.data(), cols.data(), win.adj.data(), g.c_out, r, hw);
        if (xin.active) {
          std::vector<T> dcols(r * hw, T(0));
          detail::gemm_tn(win.value.data(), self.adj.data(), dcols.data(), g.c_out, r, hw);
          detail::col2im_add(dcols.data(), xin.adj.data(), g);
        }
      });
}

/// x[C x H x W] + b[C] per channel.
template <class T>
BasicTensor<T> add_channel_bias(const BasicTensor<T>& x, const BasicTensor<T>& b) {
  FEDSIS_CHECK_SHAPE(x.rank() == 3 && b.rank() == 1 && b.extent(0) == x.extent(0),
                  "add_channel_bias " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  const std::size_t c = x.extent(0), hw = x.extent(1) * x.extent(2);
  std::vector<T> out(x.data().begin(), x.data().end());
  const auto bv = b.data();
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < hw; ++j) out[i * hw + j] += bv[i];
  return detail::make_result<T>(x.shape(), std::move(out), {x, b}, [c, hw](detail::Node<T>& self) {
    if (self.wants(0)) {
      auto& in = *self.inputs[0];
      for (std::size_t i = 0; i < self.adj.size(); ++i) in.adj[i] += self.adj[i];
    }
    if (self.wants(1)) {
      auto& bias = *self.inputs[1];
      for (std::size_t i = 0; i < c; ++i) {
        T s = T(0);
        for (std::size_t j = 0; j < hw; ++j) s += self.adj[i * hw + j];
        bias.adj[i] += s;
      }
    }
  });
}

/// Nearest-neighbour upsampling of a C x H x W map by an integer factor.
template <class T>
BasicTensor<T> upsample_nearest(const BasicTensor<T>& x, std::size_t factor) {
  FEDSIS_CHECK_SHAPE(x.rank() == 3 && factor >= 1, "upsample_nearest " + shape_str(x.shape()));
  const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
  const std::size_t ho = h * factor, wo = w * factor;
  std::vector<T> out(c * ho * wo);
  const auto xv = x.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx)
        out[(ch * ho + y) * wo + xx] = xv[(ch * h + y / factor) * w + xx / factor];
  return detail::make_result<T>(Shape{c, ho, wo}, std::move(out), {x},
                                [c, h, w, ho, wo, factor](detail::Node<T>& self) {
                                  auto& in = *self.inputs[0];
                                  for (std::size_t ch = 0; ch < c; ++ch)
                                    for (std::size_t y = 0; y < ho; ++y)
                                      for (std::size_t xx = 0; xx < wo; ++xx)
                                        in.adj[(ch * h + y / factor) * w + xx / factor] +=
                                            self.adj[(ch * ho + y) * wo + xx];
                                });
}

/// Non-overlapping p x p patches of a C x H x W image as rows of a
/// [(H/p)(W/p) x C p p] token matrix; tokens row-major over the patch grid,
/// features ordered (channel, dy, dx).
template <class T>
BasicTensor<T> patchify(const BasicTensor<T>& x, std::size_t p) {
  FEDSIS_CHECK_SHAPE(x.rank() == 3 && p >= 1 && x.extent(1) % p == 0 && x.extent(2) % p == 0,
                  "patchify " + shape_str(x.shape()) + " by " + std::to_string(p));
  const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
  const std::size_t gh = h / p, gw = w / p, f = c * p * p;
  std::vector<std::size_t> src(gh * gw * f);
  for (std::size_t ty = 0; ty < gh; ++ty)
    for (std::size_t tx = 0; tx < gw; ++tx)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            src[(ty * gw + tx) * f + (ch * p + dy) * p + dx] =
                (ch * h + ty * p + dy) * w + tx * p + dx;
  std::vector<T> out(src.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = xv[src[i]];
  return detail::make_result<T>(Shape{gh * gw, f}, std::move(out), {x},
                                [src = std::move(src)](detail::Node<T>& self) {
                                  auto& in = *self.inputs[0];
                                  for (std::size_t i = 0; i < src.size(); ++i) in.adj[src[i]] += self.adj[i];
                                });
}

}  // namespace fedsis
