#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "sfnmt/tensor.hpp"

namespace sfnmt {

// Attention mask over softmax entries. keep.size() is either cols (one mask
// shared by every row) or rows*cols (full per-entry mask, e.g. causal).
struct Mask {
  std::size_t cols = 0;
  std::vector<std::uint8_t> keep;

  bool per_entry(std::size_t rows) const { return keep.size() == rows * cols; }
  bool kept(std::size_t r, std::size_t c, std::size_t rows) const {
    return per_entry(rows) ? keep[r * cols + c] != 0 : keep[c] != 0;
  }
};

inline Mask key_mask(const std::vector<std::uint8_t>& valid) {
  return Mask{valid.size(), valid};
}

// causal mask intersected with a key validity mask
inline Mask causal_mask(std::size_t len, const std::vector<std::uint8_t>& valid) {
  Mask m;
  m.cols = len;
  m.keep.assign(len * len, 0);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j <= i; ++j)
      m.keep[i * len + j] = valid[j];
  return m;
}

namespace detail {

template <class T>
void raw_matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      T av = arow[t];
      if (av == T(0)) continue;
      const T* brow = b + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[k,m]^T · b[k,n]
template <class T>
void raw_matmul_at_b(const T* a, const T* b, T* c, std::size_t k, std::size_t m,
                     std::size_t n) {
  for (std::size_t t = 0; t < k; ++t) {
    const T* arow = a + t * m;
    const T* brow = b + t * n;
    for (std::size_t i = 0; i < m; ++i) {
      T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,k] += a[m,n] · b[k,n]^T
template <class T>
void raw_matmul_a_bt(const T* a, const T* b, T* c, std::size_t m, std::size_t n,
                     std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    T* crow = c + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const T* brow = b + t * n;
      T acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[t] += acc;
    }
  }
}

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  detail::raw_matmul(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  matmul_flop_counter() += 2ull * m * k * n;
  return Tensor<T>::make_result(
      {m, n}, std::move(out), {a, b},
      [a, b, m, k, n](TensorNode<T>& self) mutable {
        if (a.requires_grad()) {
          a.node()->ensure_grad();
          detail::raw_matmul_a_bt(self.grad.data(), b.data().data(),
                                  a.node()->grad.data(), m, n, k);
        }
        if (b.requires_grad()) {
          b.node()->ensure_grad();
          detail::raw_matmul_at_b(a.data().data(), self.grad.data(),
                                  b.node()->grad.data(), m, k, n);
        }
      });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.ndim() != 2) throw DimensionError("transpose: rank-2 only");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x.data()[i * n + j];
  return Tensor<T>::make_result({n, m}, std::move(out), {x},
                                [x, m, n](TensorNode<T>& self) mutable {
                                  if (!x.requires_grad()) return;
                                  x.node()->ensure_grad();
                                  auto& g = x.node()->grad;
                                  for (std::size_t i = 0; i < m; ++i)
                                    for (std::size_t j = 0; j < n; ++j)
                                      g[i * n + j] += self.grad[j * m + i];
                                });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b},
                                [a, b](TensorNode<T>& self) mutable {
                                  for (auto* p : {&a, &b}) {
                                    if (!p->requires_grad()) continue;
                                    p->node()->ensure_grad();
                                    auto& g = p->node()->grad;
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += self.grad[i];
                                  }
                                });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& self) mutable {
        if (a.requires_grad()) {
          a.node()->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            a.node()->grad[i] += self.grad[i];
        }
        if (b.requires_grad()) {
          b.node()->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            b.node()->grad[i] -= self.grad[i];
        }
      });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& self) mutable {
        if (a.requires_grad()) {
          a.node()->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            a.node()->grad[i] += self.grad[i] * b.data()[i];
        }
        if (b.requires_grad()) {
          b.node()->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            b.node()->grad[i] += self.grad[i] * a.data()[i];
        }
      });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c;
  return Tensor<T>::make_result(x.shape(), std::move(out), {x},
                                [x, c](TensorNode<T>& self) mutable {
                                  if (!x.requires_grad()) return;
                                  x.node()->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    x.node()->grad[i] += self.grad[i] * c;
                                });
}

// x[R,H] + b[H] broadcast over rows
template <class T>
Tensor<T> add_rowwise(const Tensor<T>& x, const Tensor<T>& b) {
  const std::size_t h = x.shape().back();
  if (b.ndim() != 1 || b.dim(0) != h)
    throw DimensionError("add_rowwise: bias shape " + shape_str(b.shape()) +
                         " vs last dim " + std::to_string(h));
  const std::size_t rows = x.numel() / h;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < h; ++j)
      out[r * h + j] = x.data()[r * h + j] + b.data()[j];
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x, b},
      [x, b, rows, h](TensorNode<T>& self) mutable {
        if (x.requires_grad()) {
          x.node()->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            x.node()->grad[i] += self.grad[i];
        }
        if (b.requires_grad()) {
          b.node()->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < h; ++j)
              b.node()->grad[j] += self.grad[r * h + j];
        }
      });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
  return Tensor<T>::make_result(x.shape(), std::move(out), {x},
                                [x](TensorNode<T>& self) mutable {
                                  if (!x.requires_grad()) return;
                                  x.node()->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    if (x.data()[i] > T(0))
                                      x.node()->grad[i] += self.grad[i];
                                });
}

template <class T>
Tensor<T> logistic(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T(1) / (T(1) + std::exp(-x.data()[i]));
  Tensor<T> result = Tensor<T>::make_result(
      x.shape(), std::move(out), {x}, [x](TensorNode<T>& self) mutable {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          T y = self.data[i];
          x.node()->grad[i] += self.grad[i] * y * (T(1) - y);
        }
      });
  return result;
}

// Row-wise softmax over the last dimension, numerically stabilized by
// row-max subtraction. Masked entries are exactly 0 in the output.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x, const Mask* mask = nullptr) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  if (mask && mask->cols != n)
    throw DimensionError("softmax_rows: mask width mismatch");
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * n;
    T* yr = out.data() + r * n;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!mask || mask->kept(r, j, rows))
        mx = std::max(mx, xr[j]);
    if (mx == -std::numeric_limits<T>::infinity())
      throw DegenerateError("softmax_rows: fully masked row " + std::to_string(r));
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask || mask->kept(r, j, rows)) {
        yr[j] = std::exp(xr[j] - mx);
        sum += yr[j];
      } else {
        yr[j] = T(0);
      }
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= sum;
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x},
      [x, rows, n](TensorNode<T>& self) mutable {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* y = self.data.data() + r * n;
          const T* dy = self.grad.data() + r * n;
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
          T* dx = x.node()->grad.data() + r * n;
          for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
      });
}

// gamma ⊙ (x − mean)/sqrt(var + eps) + beta over the last dimension,
// population variance.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t h = x.shape().back();
  if (gamma.numel() != h || beta.numel() != h)
    throw DimensionError("layer_norm: gamma/beta size mismatch");
  const std::size_t rows = x.numel() / h;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * h;
    T mean = 0;
    for (std::size_t j = 0; j < h; ++j) mean += xr[j];
    mean /= static_cast<T>(h);
    T var = 0;
    for (std::size_t j = 0; j < h; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(h);
    T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < h; ++j) {
      T xh = (xr[j] - mean) * is;
      xhat[r * h + j] = xh;
      out[r * h + j] = gamma.data()[j] * xh + beta.data()[j];
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, rows, h, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](TensorNode<T>& self) mutable {
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dy = self.grad.data() + r * h;
          const T* xh = xhat.data() + r * h;
          if (gamma.requires_grad()) {
            gamma.node()->ensure_grad();
            for (std::size_t j = 0; j < h; ++j)
              gamma.node()->grad[j] += dy[j] * xh[j];
          }
          if (beta.requires_grad()) {
            beta.node()->ensure_grad();
            for (std::size_t j = 0; j < h; ++j) beta.node()->grad[j] += dy[j];
          }
          if (x.requires_grad()) {
            x.node()->ensure_grad();
            T* dx = x.node()->grad.data() + r * h;
            T mean_dxh = 0, mean_dxh_xh = 0;
            for (std::size_t j = 0; j < h; ++j) {
              T dxh = dy[j] * gamma.data()[j];
              mean_dxh += dxh;
              mean_dxh_xh += dxh * xh[j];
            }
            mean_dxh /= static_cast<T>(h);
            mean_dxh_xh /= static_cast<T>(h);
            for (std::size_t j = 0; j < h; ++j) {
              T dxh = dy[j] * gamma.data()[j];
              dx[j] += inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
            }
          }
        }
      });
}

// Inverted dropout: survivors scaled by 1/(1-p) at train time, identity in
// eval mode.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0)
    throw ConfigError("dropout: p must be in [0,1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<std::uint8_t> keep(x.numel());
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    keep[i] = rng.next_uniform() >= p;
    out[i] = keep[i] ? x.data()[i] * keep_scale : T(0);
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x},
      [x, keep = std::move(keep), keep_scale](TensorNode<T>& self) mutable {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          if (keep[i]) x.node()->grad[i] += self.grad[i] * keep_scale;
      });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t len) {
  if (x.ndim() != 2 || start + len > x.dim(1))
    throw DimensionError("slice_cols: out of range");
  const std::size_t rows = x.dim(0), w = x.dim(1);
  std::vector<T> out(rows * len);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < len; ++j)
      out[r * len + j] = x.data()[r * w + start + j];
  return Tensor<T>::make_result(
      {rows, len}, std::move(out), {x},
      [x, start, len, rows, w](TensorNode<T>& self) mutable {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < len; ++j)
            x.node()->grad[r * w + start + j] += self.grad[r * len + j];
      });
}

template <class T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != b.dim(0))
    throw DimensionError("concat_cols: row mismatch");
  const std::size_t rows = a.dim(0), wa = a.dim(1), wb = b.dim(1);
  std::vector<T> out(rows * (wa + wb));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < wa; ++j) out[r * (wa + wb) + j] = a.data()[r * wa + j];
    for (std::size_t j = 0; j < wb; ++j)
      out[r * (wa + wb) + wa + j] = b.data()[r * wb + j];
  }
  return Tensor<T>::make_result(
      {rows, wa + wb}, std::move(out), {a, b},
      [a, b, rows, wa, wb](TensorNode<T>& self) mutable {
        if (a.requires_grad()) {
          a.node()->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < wa; ++j)
              a.node()->grad[r * wa + j] += self.grad[r * (wa + wb) + j];
        }
        if (b.requires_grad()) {
          b.node()->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < wb; ++j)
              b.node()->grad[r * wb + j] += self.grad[r * (wa + wb) + wa + j];
        }
      });
}

// Row gather: out[i] = table[ids[i]]. Backward scatter-adds.
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) throw DimensionError("embedding: table must be rank 2");
  const std::size_t v = table.dim(0), h = table.dim(1);
  std::vector<T> out(ids.size() * h);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw DimensionError("embedding: id out of range: " + std::to_string(ids[i]));
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * h, h,
                out.data() + i * h);
  }
  return Tensor<T>::make_result(
      {ids.size(), h}, std::move(out), {table},
      [table, ids, h](TensorNode<T>& self) mutable {
        if (!table.requires_grad()) return;
        table.node()->ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i) {
          T* dst = table.node()->grad.data() + static_cast<std::size_t>(ids[i]) * h;
          const T* src = self.grad.data() + i * h;
          for (std::size_t j = 0; j < h; ++j) dst[j] += src[j];
        }
      });
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return Tensor<T>::make_result({1}, {s}, {x}, [x](TensorNode<T>& self) mutable {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    for (auto& g : x.node()->grad) g += self.grad[0];
  });
}

// Shaw-style relative-position bias for one attention head:
// bias[i,j] = q[i] · table[idx[i*L2+j]], where idx < 0 (the OUT sentinel)
// contributes a fixed zero vector and receives no gradient.
template <class T>
Tensor<T> relpos_bias(const Tensor<T>& q, const Tensor<T>& table,
                      const std::vector<int>& idx, std::size_t keys) {
  if (q.ndim() != 2 || table.ndim() != 2 || q.dim(1) != table.dim(1))
    throw DimensionError("relpos_bias: shape mismatch");
  const std::size_t L = q.dim(0), d = q.dim(1);
  if (idx.size() != L * keys) throw DimensionError("relpos_bias: index size");
  std::vector<T> out(L * keys, T(0));
  for (std::size_t i = 0; i < L; ++i) {
    const T* qi = q.data().data() + i * d;
    for (std::size_t j = 0; j < keys; ++j) {
      int r = idx[i * keys + j];
      if (r < 0) continue;
      const T* tr = table.data().data() + static_cast<std::size_t>(r) * d;
      T acc = 0;
      for (std::size_t t = 0; t < d; ++t) acc += qi[t] * tr[t];
      out[i * keys + j] = acc;
    }
  }
  return Tensor<T>::make_result(
      {L, keys}, std::move(out), {q, table},
      [q, table, idx, L, d, keys](TensorNode<T>& self) mutable {
        for (std::size_t i = 0; i < L; ++i) {
          for (std::size_t j = 0; j < keys; ++j) {
            int r = idx[i * keys + j];
            if (r < 0) continue;
            T g = self.grad[i * keys + j];
            if (g == T(0)) continue;
            if (q.requires_grad()) {
              q.node()->ensure_grad();
              T* dq = q.node()->grad.data() + i * d;
              const T* tr = table.data().data() + static_cast<std::size_t>(r) * d;
              for (std::size_t t = 0; t < d; ++t) dq[t] += g * tr[t];
            }
            if (table.requires_grad()) {
              table.node()->ensure_grad();
              T* dt = table.node()->grad.data() + static_cast<std::size_t>(r) * d;
              const T* qi = q.data().data() + i * d;
              for (std::size_t t = 0; t < d; ++t) dt[t] += g * qi[t];
            }
          }
        }
      });
}

// Mean over rows sharing a group id: out[g] = mean of x rows with group[i]==g.
template <class T>
Tensor<T> pool_rows_mean(const Tensor<T>& x, const std::vector<int>& group,
                         std::size_t n_groups, bool allow_empty = false) {
  if (x.ndim() != 2 || group.size() != x.dim(0))
    throw DimensionError("pool_rows_mean: group size mismatch");
  const std::size_t h = x.dim(1);
  std::vector<T> out(n_groups * h, T(0));
  std::vector<std::size_t> count(n_groups, 0);
  for (std::size_t i = 0; i < group.size(); ++i) {
    std::size_t g = static_cast<std::size_t>(group[i]);
    if (g >= n_groups) throw DimensionError("pool_rows_mean: group id out of range");
    ++count[g];
    for (std::size_t j = 0; j < h; ++j) out[g * h + j] += x.data()[i * h + j];
  }
  for (std::size_t g = 0; g < n_groups; ++g) {
    if (count[g] == 0) {
      if (!allow_empty) throw DegenerateError("pool_rows_mean: empty group");
      continue;  // zero row
    }
    for (std::size_t j = 0; j < h; ++j) out[g * h + j] /= static_cast<T>(count[g]);
  }
  return Tensor<T>::make_result(
      {n_groups, h}, std::move(out), {x},
      [x, group, count = std::move(count), h](TensorNode<T>& self) mutable {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        for (std::size_t i = 0; i < group.size(); ++i) {
          std::size_t g = static_cast<std::size_t>(group[i]);
          for (std::size_t j = 0; j < h; ++j)
            x.node()->grad[i * h + j] +=
                self.grad[g * h + j] / static_cast<T>(count[g]);
        }
      });
}

// out[i] = x[map[i]]; inverse of pooling, distributing group rows back out.
template <class T>
Tensor<T> expand_rows(const Tensor<T>& x, const std::vector<int>& map) {
  if (x.ndim() != 2) throw DimensionError("expand_rows: rank-2 only");
  const std::size_t h = x.dim(1);
  std::vector<T> out(map.size() * h);
  for (std::size_t i = 0; i < map.size(); ++i) {
    std::size_t g = static_cast<std::size_t>(map[i]);
    if (g >= x.dim(0)) throw DimensionError("expand_rows: map out of range");
    std::copy_n(x.data().data() + g * h, h, out.data() + i * h);
  }
  return Tensor<T>::make_result(
      {map.size(), h}, std::move(out), {x},
      [x, map, h](TensorNode<T>& self) mutable {
        if (!x.requires_grad()) return;
        x.node()->ensure_grad();
        for (std::size_t i = 0; i < map.size(); ++i) {
          T* dst = x.node()->grad.data() + static_cast<std::size_t>(map[i]) * h;
          for (std::size_t j = 0; j < h; ++j) dst[j] += self.grad[i * h + j];
        }
      });
}

enum class Reduction { Mean, Sum };

// KL(q || softmax(logits)) with q = (1-smoothing)·onehot + smoothing·uniform,
// averaged (or summed) over non-pad positions. Pad positions contribute 0.
template <class T>
Tensor<T> cross_entropy_label_smoothed(const Tensor<T>& logits,
                                       const std::vector<int>& targets,
                                       int pad_id, double smoothing,
                                       Reduction reduction = Reduction::Mean,
                                       std::size_t* n_tokens_out = nullptr) {
  if (logits.ndim() != 2 || targets.size() != logits.dim(0))
    throw DimensionError("cross_entropy: logits/targets mismatch");
  if (smoothing < 0.0 || smoothing >= 1.0)
    throw ConfigError("cross_entropy: smoothing must be in [0,1)");
  const std::size_t tlen = logits.dim(0), v = logits.dim(1);
  std::size_t n_tokens = 0;
  for (int t : targets) {
    if (t != pad_id && (t < 0 || static_cast<std::size_t>(t) >= v))
      throw DimensionError("cross_entropy: target id out of range");
    if (t != pad_id) ++n_tokens;
  }
  if (n_tokens == 0) throw DegenerateError("cross_entropy: all positions are pad");
  if (n_tokens_out) *n_tokens_out = n_tokens;

  const T q_true = static_cast<T>(1.0 - smoothing + smoothing / static_cast<double>(v));
  const T q_rest = static_cast<T>(smoothing / static_cast<double>(v));
  // constant -H(q) term of the KL
  double neg_entropy = 0.0;
  if (q_true > 0) neg_entropy += static_cast<double>(q_true) * std::log(static_cast<double>(q_true));
  if (q_rest > 0)
    neg_entropy += static_cast<double>(v - 1) * static_cast<double>(q_rest) *
                   std::log(static_cast<double>(q_rest));

  std::vector<T> probs(tlen * v);
  double total = 0.0;
  for (std::size_t i = 0; i < tlen; ++i) {
    if (targets[i] == pad_id) continue;
    const T* row = logits.data().data() + i * v;
    T mx = *std::max_element(row, row + v);
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    double log_z = std::log(sum) + static_cast<double>(mx);
    double row_ce = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      double logp = static_cast<double>(row[j]) - log_z;
      probs[i * v + j] = static_cast<T>(std::exp(logp));
      T q = (static_cast<std::size_t>(targets[i]) == j) ? q_true : q_rest;
      row_ce -= static_cast<double>(q) * logp;
    }
    total += row_ce + neg_entropy;
  }
  const T norm = reduction == Reduction::Mean ? static_cast<T>(n_tokens) : T(1);
  T loss = static_cast<T>(total) / norm;
  return Tensor<T>::make_result(
      {1}, {loss}, {logits},
      [logits, targets, pad_id, q_true, q_rest, probs = std::move(probs), norm,
       tlen, v](TensorNode<T>& self) mutable {
        if (!logits.requires_grad()) return;
        logits.node()->ensure_grad();
        const T g = self.grad[0] / norm;
        for (std::size_t i = 0; i < tlen; ++i) {
          if (targets[i] == pad_id) continue;
          T* dl = logits.node()->grad.data() + i * v;
          for (std::size_t j = 0; j < v; ++j) {
            T q = (static_cast<std::size_t>(targets[i]) == j) ? q_true : q_rest;
            dl[j] += g * (probs[i * v + j] - q);
          }
        }
      });
}

template <class T>
void assert_all_finite(const Tensor<T>& x, const char* what) {
  if (!x.all_finite())
    throw NumericError(std::string("non-finite values in ") + what);
}

}  // namespace sfnmt
