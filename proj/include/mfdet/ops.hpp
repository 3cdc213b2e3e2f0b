#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>

#include "mfdet/tensor.hpp"

namespace mfdet {

// (name, tensor) pairs in a stable order; the single source for both
// optimizer parameter lists and checkpoint manifests
template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>*>>;

namespace detail {

template <typename T>
std::vector<Tensor<T>*> strip_names(const NamedParams<T>& named) {
  std::vector<Tensor<T>*> out;
  out.reserve(named.size());
  for (const auto& kv : named) out.push_back(kv.second);
  return out;
}

}  // namespace detail

namespace detail {

template <typename T>
inline bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (!GradTape<T>::active()) return false;
  for (const Tensor<T>* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <typename T>
inline Tensor<T> make_out(std::vector<int> shape, bool rec) {
  Tensor<T> out(std::move(shape));
  if (rec) out.set_requires_grad(true);
  return out;
}

template <typename T>
inline void record(const char* op, Tensor<T>& out, std::function<void()> fn) {
  GradTape<T>::active()->record(op, out.grad_handle(), std::move(fn));
}

template <typename T>
inline void add_into(std::vector<T>& dst, const std::vector<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
inline void gemm(int m, int k, int n, const T* a, const T* b, T* c) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = a[static_cast<std::size_t>(i) * k + p];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
inline void gemm_nt(int m, int k, int n, const T* a, const T* b, T* c) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[static_cast<std::size_t>(i) * n + j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <typename T>
inline void gemm_tn(int m, int k, int n, const T* a, const T* b, T* c) {
  for (int p = 0; p < k; ++p) {
    const T* arow = a + static_cast<std::size_t>(p) * m;
    const T* brow = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// cols[(c,u,v), (oh,ow)] = x[c, oh*stride+u-pad, ow*stride+v-pad], zero outside.
template <typename T>
inline void im2col(const T* x, int c_in, int h, int w, int kh, int kw, int stride, int pad,
                   int ho, int wo, T* cols) {
  const int spatial = ho * wo;
  for (int c = 0; c < c_in; ++c) {
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v) {
        T* row = cols + static_cast<std::size_t>((c * kh + u) * kw + v) * spatial;
        for (int oh = 0; oh < ho; ++oh) {
          const int iy = oh * stride + u - pad;
          if (iy < 0 || iy >= h) {
            for (int ow = 0; ow < wo; ++ow) row[oh * wo + ow] = T(0);
            continue;
          }
          const T* xrow = x + (static_cast<std::size_t>(c) * h + iy) * w;
          for (int ow = 0; ow < wo; ++ow) {
            const int ix = ow * stride + v - pad;
            row[oh * wo + ow] = (ix >= 0 && ix < w) ? xrow[ix] : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds cols back into y[c, oh*stride+u-pad, ...].
template <typename T>
inline void col2im(const T* cols, int c_in, int hy, int wy, int kh, int kw, int stride, int pad,
                   int ho, int wo, T* y) {
  const int spatial = ho * wo;
  for (int c = 0; c < c_in; ++c) {
    for (int u = 0; u < kh; ++u) {
      for (int v = 0; v < kw; ++v) {
        const T* row = cols + static_cast<std::size_t>((c * kh + u) * kw + v) * spatial;
        for (int oh = 0; oh < ho; ++oh) {
          const int iy = oh * stride + u - pad;
          if (iy < 0 || iy >= hy) continue;
          T* yrow = y + (static_cast<std::size_t>(c) * hy + iy) * wy;
          for (int ow = 0; ow < wo; ++ow) {
            const int ix = ow * stride + v - pad;
            if (ix >= 0 && ix < wy) yrow[ix] += row[oh * wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const bool rec = detail::recording<T>({&a, &b});
  Tensor<T> out = detail::make_out<T>(a.shape(), rec);
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (int i = 0; i < out.numel(); ++i) ov[i] = av[i] + bv[i];
  if (rec) {
    Tensor<T> ta = a, tb = b, to = out;
    detail::record<T>("add", out, [ta, tb, to]() mutable {
      const auto& g = to.grad();
      if (ta.requires_grad()) detail::add_into(ta.grad(), g);
      if (tb.requires_grad()) detail::add_into(tb.grad(), g);
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const bool rec = detail::recording<T>({&a, &b});
  Tensor<T> out = detail::make_out<T>(a.shape(), rec);
  for (int i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (rec) {
    Tensor<T> ta = a, tb = b, to = out;
    detail::record<T>("sub", out, [ta, tb, to]() mutable {
      const auto& g = to.grad();
      if (ta.requires_grad()) detail::add_into(ta.grad(), g);
      if (tb.requires_grad()) {
        auto& gb = tb.grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const bool rec = detail::recording<T>({&a, &b});
  Tensor<T> out = detail::make_out<T>(a.shape(), rec);
  for (int i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (rec) {
    Tensor<T> ta = a, tb = b, to = out;
    detail::record<T>("mul", out, [ta, tb, to]() mutable {
      const auto& g = to.grad();
      if (ta.requires_grad()) {
        auto& ga = ta.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * tb.data()[i];
      }
      if (tb.requires_grad()) {
        auto& gb = tb.grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * ta.data()[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  const bool rec = detail::recording<T>({&a});
  Tensor<T> out = detail::make_out<T>(a.shape(), rec);
  for (int i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * c;
  if (rec) {
    Tensor<T> ta = a, to = out;
    detail::record<T>("scale", out, [ta, to, c]() mutable {
      if (!ta.requires_grad()) return;
      auto& ga = ta.grad();
      const auto& g = to.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

// mat[M,N] + vec[N] broadcast over rows; the usual bias add.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& mat, const Tensor<T>& vec) {
  if (mat.ndim() != 2 || vec.ndim() != 1 || mat.dim(1) != vec.dim(0))
    throw ShapeError("add_rowvec: " + shape_str(mat.shape()) + " + " + shape_str(vec.shape()));
  const int m = mat.dim(0), n = mat.dim(1);
  const bool rec = detail::recording<T>({&mat, &vec});
  Tensor<T> out = detail::make_out<T>(mat.shape(), rec);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data()[i * n + j] = mat.data()[i * n + j] + vec.data()[j];
  if (rec) {
    Tensor<T> tm = mat, tv = vec, to = out;
    detail::record<T>("add_rowvec", out, [tm, tv, to, m, n]() mutable {
      const auto& g = to.grad();
      if (tm.requires_grad()) detail::add_into(tm.grad(), g);
      if (tv.requires_grad()) {
        auto& gv = tv.grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) gv[j] += g[i * n + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                     shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool rec = detail::recording<T>({&a, &b});
  Tensor<T> out = detail::make_out<T>({m, n}, rec);
  detail::gemm(m, k, n, a.data().data(), b.data().data(), out.data().data());
  if (rec) {
    Tensor<T> ta = a, tb = b, to = out;
    detail::record<T>("matmul", out, [ta, tb, to, m, k, n]() mutable {
      const T* g = to.grad().data();
      if (ta.requires_grad())
        detail::gemm_nt(m, n, k, g, tb.data().data(), ta.grad().data());
      if (tb.requires_grad())
        detail::gemm_tn(k, m, n, ta.data().data(), g, tb.grad().data());  // dB = A^T * dC
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  if (a.ndim() != 2) throw ShapeError("transpose2d: need a matrix, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  const bool rec = detail::recording<T>({&a});
  Tensor<T> out = detail::make_out<T>({n, m}, rec);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
  if (rec) {
    Tensor<T> ta = a, to = out;
    detail::record<T>("transpose2d", out, [ta, to, m, n]() mutable {
      if (!ta.requires_grad()) return;
      auto& ga = ta.grad();
      const auto& g = to.grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& mat, int start, int len) {
  if (mat.ndim() != 2) throw ShapeError("slice_cols: need a matrix, got " + shape_str(mat.shape()));
  const int m = mat.dim(0), n = mat.dim(1);
  if (start < 0 || len <= 0 || start + len > n)
    throw ShapeError("slice_cols: columns [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of " + shape_str(mat.shape()));
  const bool rec = detail::recording<T>({&mat});
  Tensor<T> out = detail::make_out<T>({m, len}, rec);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < len; ++j) out.data()[i * len + j] = mat.data()[i * n + start + j];
  if (rec) {
    Tensor<T> tm = mat, to = out;
    detail::record<T>("slice_cols", out, [tm, to, m, n, start, len]() mutable {
      if (!tm.requires_grad()) return;
      auto& g = tm.grad();
      const auto& go = to.grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < len; ++j) g[i * n + start + j] += go[i * len + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty input list");
  const int m = parts[0].dim(0);
  int n = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != m)
      throw ShapeError("concat_cols: row mismatch at " + shape_str(p.shape()));
    n += p.dim(1);
  }
  bool rec = false;
  if (GradTape<T>::active())
    for (const auto& p : parts)
      if (p.requires_grad()) rec = true;
  Tensor<T> out = detail::make_out<T>({m, n}, rec);
  int off = 0;
  for (const auto& p : parts) {
    const int pn = p.dim(1);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < pn; ++j) out.data()[i * n + off + j] = p.data()[i * pn + j];
    off += pn;
  }
  if (rec) {
    std::vector<Tensor<T>> tp = parts;
    Tensor<T> to = out;
    detail::record<T>("concat_cols", out, [tp, to, m, n]() mutable {
      const auto& g = to.grad();
      int off = 0;
      for (auto& p : tp) {
        const int pn = p.dim(1);
        if (p.requires_grad()) {
          auto& gp = p.grad();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < pn; ++j) gp[i * pn + j] += g[i * n + off + j];
        }
        off += pn;
      }
    });
  }
  return out;
}

// Concatenates [C_i,H,W] maps along the channel axis.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& maps) {
  if (maps.empty()) throw ShapeError("concat_channels: empty input list");
  const int h = maps[0].dim(1), w = maps[0].dim(2);
  int c = 0;
  for (const auto& m : maps) {
    if (m.ndim() != 3 || m.dim(1) != h || m.dim(2) != w)
      throw ShapeError("concat_channels: spatial mismatch at " + shape_str(m.shape()));
    c += m.dim(0);
  }
  bool rec = false;
  if (GradTape<T>::active())
    for (const auto& m : maps)
      if (m.requires_grad()) rec = true;
  Tensor<T> out = detail::make_out<T>({c, h, w}, rec);
  std::size_t off = 0;
  for (const auto& m : maps) {
    std::copy(m.data().begin(), m.data().end(), out.data().begin() + off);
    off += m.data().size();
  }
  if (rec) {
    std::vector<Tensor<T>> tm = maps;
    Tensor<T> to = out;
    detail::record<T>("concat_channels", out, [tm, to]() mutable {
      const auto& g = to.grad();
      std::size_t off = 0;
      for (auto& m : tm) {
        if (m.requires_grad()) {
          auto& gm = m.grad();
          for (std::size_t i = 0; i < gm.size(); ++i) gm[i] += g[off + i];
        }
        off += m.data().size();
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// map cell access

// Picks all channels at the given flat cells of a [C,H,W] map -> [M,C].
template <typename T>
Tensor<T> gather_cells(const Tensor<T>& map, const std::vector<int>& cells) {
  if (map.ndim() != 3) throw ShapeError("gather_cells: need [C,H,W], got " + shape_str(map.shape()));
  const int c = map.dim(0), spatial = map.dim(1) * map.dim(2);
  for (int idx : cells)
    if (idx < 0 || idx >= spatial)
      throw ShapeError("gather_cells: cell " + std::to_string(idx) + " outside " +
                       shape_str(map.shape()));
  const int m = static_cast<int>(cells.size());
  const bool rec = detail::recording<T>({&map});
  Tensor<T> out = detail::make_out<T>({m, c}, rec);
  for (int i = 0; i < m; ++i)
    for (int ch = 0; ch < c; ++ch)
      out.data()[i * c + ch] = map.data()[static_cast<std::size_t>(ch) * spatial + cells[i]];
  if (rec) {
    Tensor<T> tmap = map, to = out;
    std::vector<int> idx = cells;
    detail::record<T>("gather_cells", out, [tmap, to, idx, c, spatial]() mutable {
      if (!tmap.requires_grad()) return;
      auto& g = tmap.grad();
      const auto& go = to.grad();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (int ch = 0; ch < c; ++ch)
          g[static_cast<std::size_t>(ch) * spatial + idx[i]] += go[i * c + ch];
    });
  }
  return out;
}

// Copy of base with rows[M,C] written into the given cells; all other cells
// keep the base values exactly.
template <typename T>
Tensor<T> scatter_cells(const Tensor<T>& base, const Tensor<T>& rows,
                        const std::vector<int>& cells) {
  if (base.ndim() != 3) throw ShapeError("scatter_cells: need [C,H,W], got " + shape_str(base.shape()));
  const int c = base.dim(0), spatial = base.dim(1) * base.dim(2);
  if (rows.ndim() != 2 || rows.dim(0) != static_cast<int>(cells.size()) || rows.dim(1) != c)
    throw ShapeError("scatter_cells: rows " + shape_str(rows.shape()) + " do not fit " +
                     std::to_string(cells.size()) + " cells of " + shape_str(base.shape()));
  for (int idx : cells)
    if (idx < 0 || idx >= spatial)
      throw ShapeError("scatter_cells: cell " + std::to_string(idx) + " outside " +
                       shape_str(base.shape()));
  const bool rec = detail::recording<T>({&base, &rows});
  Tensor<T> out = detail::make_out<T>(base.shape(), rec);
  std::copy(base.data().begin(), base.data().end(), out.data().begin());
  for (std::size_t i = 0; i < cells.size(); ++i)
    for (int ch = 0; ch < c; ++ch)
      out.data()[static_cast<std::size_t>(ch) * spatial + cells[i]] = rows.data()[i * c + ch];
  if (rec) {
    Tensor<T> tb = base, tr = rows, to = out;
    std::vector<int> idx = cells;
    detail::record<T>("scatter_cells", out, [tb, tr, to, idx, c, spatial]() mutable {
      const auto& g = to.grad();
      if (tb.requires_grad()) {
        auto& gb = tb.grad();
        std::vector<char> hit(spatial, 0);
        for (int i : idx) hit[i] = 1;
        for (int ch = 0; ch < c; ++ch)
          for (int s = 0; s < spatial; ++s)
            if (!hit[s]) gb[static_cast<std::size_t>(ch) * spatial + s] +=
                g[static_cast<std::size_t>(ch) * spatial + s];
      }
      if (tr.requires_grad()) {
        auto& gr = tr.grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (int ch = 0; ch < c; ++ch)
            gr[i * c + ch] += g[static_cast<std::size_t>(ch) * spatial + idx[i]];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// attention kernels

// out[i,k] = dot(q[i,:], kk[i*K+k,:]) for per-query key blocks.
template <typename T>
Tensor<T> block_dot(const Tensor<T>& q, const Tensor<T>& kk, int k_per_query) {
  if (q.ndim() != 2 || kk.ndim() != 2 || kk.dim(1) != q.dim(1) ||
      kk.dim(0) != q.dim(0) * k_per_query)
    throw ShapeError("block_dot: " + shape_str(q.shape()) + " against " + shape_str(kk.shape()) +
                     " with K=" + std::to_string(k_per_query));
  const int m = q.dim(0), d = q.dim(1), kq = k_per_query;
  const bool rec = detail::recording<T>({&q, &kk});
  Tensor<T> out = detail::make_out<T>({m, kq}, rec);
  for (int i = 0; i < m; ++i)
    for (int k = 0; k < kq; ++k) {
      T acc = T(0);
      const T* qa = q.data().data() + static_cast<std::size_t>(i) * d;
      const T* ka = kk.data().data() + static_cast<std::size_t>(i * kq + k) * d;
      for (int c = 0; c < d; ++c) acc += qa[c] * ka[c];
      out.data()[i * kq + k] = acc;
    }
  if (rec) {
    Tensor<T> tq = q, tk = kk, to = out;
    detail::record<T>("block_dot", out, [tq, tk, to, m, d, kq]() mutable {
      const auto& g = to.grad();
      for (int i = 0; i < m; ++i)
        for (int k = 0; k < kq; ++k) {
          const T gv = g[i * kq + k];
          if (gv == T(0)) continue;
          if (tq.requires_grad()) {
            auto& gq = tq.grad();
            for (int c = 0; c < d; ++c)
              gq[i * d + c] += gv * tk.data()[static_cast<std::size_t>(i * kq + k) * d + c];
          }
          if (tk.requires_grad()) {
            auto& gk = tk.grad();
            for (int c = 0; c < d; ++c)
              gk[static_cast<std::size_t>(i * kq + k) * d + c] += gv * tq.data()[i * d + c];
          }
        }
    });
  }
  return out;
}

// out[i,:] = sum_k w[i,k] * v[i*K+k,:], the weighted mix matching block_dot.
template <typename T>
Tensor<T> block_mix(const Tensor<T>& w, const Tensor<T>& v) {
  if (w.ndim() != 2 || v.ndim() != 2 || v.dim(0) % w.dim(0) != 0 ||
      v.dim(0) != w.dim(0) * w.dim(1))
    throw ShapeError("block_mix: " + shape_str(w.shape()) + " against " + shape_str(v.shape()));
  const int m = w.dim(0), kq = w.dim(1), d = v.dim(1);
  const bool rec = detail::recording<T>({&w, &v});
  Tensor<T> out = detail::make_out<T>({m, d}, rec);
  for (int i = 0; i < m; ++i) {
    T* orow = out.data().data() + static_cast<std::size_t>(i) * d;
    for (int k = 0; k < kq; ++k) {
      const T wv = w.data()[i * kq + k];
      if (wv == T(0)) continue;
      const T* vrow = v.data().data() + static_cast<std::size_t>(i * kq + k) * d;
      for (int c = 0; c < d; ++c) orow[c] += wv * vrow[c];
    }
  }
  if (rec) {
    Tensor<T> tw = w, tv = v, to = out;
    detail::record<T>("block_mix", out, [tw, tv, to, m, kq, d]() mutable {
      const auto& g = to.grad();
      for (int i = 0; i < m; ++i)
        for (int k = 0; k < kq; ++k) {
          if (tw.requires_grad()) {
            T acc = T(0);
            for (int c = 0; c < d; ++c)
              acc += g[i * d + c] * tv.data()[static_cast<std::size_t>(i * kq + k) * d + c];
            tw.grad()[i * kq + k] += acc;
          }
          if (tv.requires_grad()) {
            const T wv = tw.data()[i * kq + k];
            if (wv == T(0)) continue;
            auto& gv = tv.grad();
            for (int c = 0; c < d; ++c)
              gv[static_cast<std::size_t>(i * kq + k) * d + c] += wv * g[i * d + c];
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// nonlinearities and normalization

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  const bool rec = detail::recording<T>({&x});
  Tensor<T> out = detail::make_out<T>(x.shape(), rec);
  for (int i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
  if (rec) {
    Tensor<T> tx = x, to = out;
    detail::record<T>("relu", out, [tx, to]() mutable {
      if (!tx.requires_grad()) return;
      auto& g = tx.grad();
      const auto& go = to.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (tx.data()[i] > T(0)) g[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  const bool rec = detail::recording<T>({&x});
  Tensor<T> out = detail::make_out<T>(x.shape(), rec);
  for (int i = 0; i < x.numel(); ++i) out.data()[i] = T(1) / (T(1) + std::exp(-x.data()[i]));
  if (rec) {
    Tensor<T> tx = x, to = out;
    detail::record<T>("sigmoid", out, [tx, to]() mutable {
      if (!tx.requires_grad()) return;
      auto& g = tx.grad();
      const auto& go = to.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T s = to.data()[i];
        g[i] += go[i] * s * (T(1) - s);
      }
    });
  }
  return out;
}

// Max-stabilized softmax along one axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int nd = x.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd)
    throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
  int outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  const int n = x.dim(axis);
  for (int i = axis + 1; i < nd; ++i) inner *= x.dim(i);
  const bool rec = detail::recording<T>({&x});
  Tensor<T> out = detail::make_out<T>(x.shape(), rec);
  for (int o = 0; o < outer; ++o)
    for (int in = 0; in < inner; ++in) {
      const std::size_t base = static_cast<std::size_t>(o) * n * inner + in;
      T mx = x.data()[base];
      for (int i = 1; i < n; ++i)
        mx = std::max(mx, x.data()[base + static_cast<std::size_t>(i) * inner]);
      T sum = T(0);
      for (int i = 0; i < n; ++i) {
        const T e = std::exp(x.data()[base + static_cast<std::size_t>(i) * inner] - mx);
        out.data()[base + static_cast<std::size_t>(i) * inner] = e;
        sum += e;
      }
      for (int i = 0; i < n; ++i) out.data()[base + static_cast<std::size_t>(i) * inner] /= sum;
    }
  if (rec) {
    Tensor<T> tx = x, to = out;
    detail::record<T>("softmax", out, [tx, to, outer, n, inner]() mutable {
      if (!tx.requires_grad()) return;
      auto& g = tx.grad();
      const auto& go = to.grad();
      const auto& s = to.data();
      for (int o = 0; o < outer; ++o)
        for (int in = 0; in < inner; ++in) {
          const std::size_t base = static_cast<std::size_t>(o) * n * inner + in;
          T dot = T(0);
          for (int i = 0; i < n; ++i) {
            const std::size_t at = base + static_cast<std::size_t>(i) * inner;
            dot += go[at] * s[at];
          }
          for (int i = 0; i < n; ++i) {
            const std::size_t at = base + static_cast<std::size_t>(i) * inner;
            g[at] += s[at] * (go[at] - dot);
          }
        }
    });
  }
  return out;
}

// Row-wise layer normalization over the last axis of [M,N].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = static_cast<T>(1e-5)) {
  if (x.ndim() != 2 || gamma.ndim() != 1 || beta.ndim() != 1 || gamma.dim(0) != x.dim(1) ||
      beta.dim(0) != x.dim(1))
    throw ShapeError("layer_norm: " + shape_str(x.shape()) + " with gamma " +
                     shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  const int m = x.dim(0), n = x.dim(1);
  const bool rec = detail::recording<T>({&x, &gamma, &beta});
  Tensor<T> out = detail::make_out<T>(x.shape(), rec);
  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(m) * n);
  auto istd = std::make_shared<std::vector<T>>(m);
  for (int i = 0; i < m; ++i) {
    T mean = T(0);
    for (int j = 0; j < n; ++j) mean += x.data()[i * n + j];
    mean /= T(n);
    T var = T(0);
    for (int j = 0; j < n; ++j) {
      const T d = x.data()[i * n + j] - mean;
      var += d * d;
    }
    var /= T(n);
    const T is = T(1) / std::sqrt(var + eps);
    (*istd)[i] = is;
    for (int j = 0; j < n; ++j) {
      const T h = (x.data()[i * n + j] - mean) * is;
      (*xhat)[i * n + j] = h;
      out.data()[i * n + j] = gamma.data()[j] * h + beta.data()[j];
    }
  }
  if (rec) {
    Tensor<T> tx = x, tg = gamma, tb = beta, to = out;
    detail::record<T>("layer_norm", out, [tx, tg, tb, to, xhat, istd, m, n]() mutable {
      const auto& g = to.grad();
      if (tg.requires_grad() || tb.requires_grad()) {
        for (int j = 0; j < n; ++j) {
          T dg = T(0), db = T(0);
          for (int i = 0; i < m; ++i) {
            dg += g[i * n + j] * (*xhat)[i * n + j];
            db += g[i * n + j];
          }
          if (tg.requires_grad()) tg.grad()[j] += dg;
          if (tb.requires_grad()) tb.grad()[j] += db;
        }
      }
      if (tx.requires_grad()) {
        auto& gx = tx.grad();
        for (int i = 0; i < m; ++i) {
          T sum_dh = T(0), sum_dh_h = T(0);
          for (int j = 0; j < n; ++j) {
            const T dh = g[i * n + j] * tg.data()[j];
            sum_dh += dh;
            sum_dh_h += dh * (*xhat)[i * n + j];
          }
          for (int j = 0; j < n; ++j) {
            const T dh = g[i * n + j] * tg.data()[j];
            gx[i * n + j] += (*istd)[i] * (dh - sum_dh / T(n) - (*xhat)[i * n + j] * sum_dh_h / T(n));
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions

// Max over one axis; gradient routes to the first maximal element.
template <typename T>
Tensor<T> reduce_max(const Tensor<T>& x, int axis) {
  const int nd = x.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd)
    throw ShapeError("reduce_max: axis out of range for " + shape_str(x.shape()));
  if (x.dim(axis) == 0) throw ShapeError("reduce_max: empty axis in " + shape_str(x.shape()));
  int outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  const int n = x.dim(axis);
  for (int i = axis + 1; i < nd; ++i) inner *= x.dim(i);
  std::vector<int> oshape;
  for (int i = 0; i < nd; ++i)
    if (i != axis) oshape.push_back(x.dim(i));
  if (oshape.empty()) oshape.push_back(1);
  const bool rec = detail::recording<T>({&x});
  Tensor<T> out = detail::make_out<T>(oshape, rec);
  auto arg = std::make_shared<std::vector<int>>(static_cast<std::size_t>(outer) * inner);
  for (int o = 0; o < outer; ++o)
    for (int in = 0; in < inner; ++in) {
      const std::size_t base = static_cast<std::size_t>(o) * n * inner + in;
      T mx = x.data()[base];
      int mi = 0;
      for (int i = 1; i < n; ++i) {
        const T v = x.data()[base + static_cast<std::size_t>(i) * inner];
        if (v > mx) {
          mx = v;
          mi = i;
        }
      }
      out.data()[o * inner + in] = mx;
      (*arg)[o * inner + in] = mi;
    }
  if (rec) {
    Tensor<T> tx = x, to = out;
    detail::record<T>("reduce_max", out, [tx, to, arg, outer, n, inner]() mutable {
      if (!tx.requires_grad()) return;
      auto& g = tx.grad();
      const auto& go = to.grad();
      for (int o = 0; o < outer; ++o)
        for (int in = 0; in < inner; ++in) {
          const int mi = (*arg)[o * inner + in];
          g[static_cast<std::size_t>(o) * n * inner + static_cast<std::size_t>(mi) * inner + in] +=
              go[o * inner + in];
        }
    });
  }
  return out;
}

// Per-segment max over rows of [N,C]; segments are [offsets[p], offsets[p+1]).
template <typename T>
Tensor<T> segment_max(const Tensor<T>& x, const std::vector<int>& offsets) {
  if (x.ndim() != 2) throw ShapeError("segment_max: need [N,C], got " + shape_str(x.shape()));
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != x.dim(0))
    throw ShapeError("segment_max: bad offsets for " + shape_str(x.shape()));
  const int p = static_cast<int>(offsets.size()) - 1;
  const int c = x.dim(1);
  for (int s = 0; s < p; ++s)
    if (offsets[s + 1] <= offsets[s])
      throw ShapeError("segment_max: empty segment " + std::to_string(s));
  const bool rec = detail::recording<T>({&x});
  Tensor<T> out = detail::make_out<T>({p, c}, rec);
  auto arg = std::make_shared<std::vector<int>>(static_cast<std::size_t>(p) * c);
  for (int s = 0; s < p; ++s)
    for (int ch = 0; ch < c; ++ch) {
      T mx = x.data()[static_cast<std::size_t>(offsets[s]) * c + ch];
      int mi = offsets[s];
      for (int r = offsets[s] + 1; r < offsets[s + 1]; ++r) {
        const T v = x.data()[static_cast<std::size_t>(r) * c + ch];
        if (v > mx) {
          mx = v;
          mi = r;
        }
      }
      out.data()[s * c + ch] = mx;
      (*arg)[s * c + ch] = mi;
    }
  if (rec) {
    Tensor<T> tx = x, to = out;
    detail::record<T>("segment_max", out, [tx, to, arg, p, c]() mutable {
      if (!tx.requires_grad()) return;
      auto& g = tx.grad();
      const auto& go = to.grad();
      for (int s = 0; s < p; ++s)
        for (int ch = 0; ch < c; ++ch)
          g[static_cast<std::size_t>((*arg)[s * c + ch]) * c + ch] += go[s * c + ch];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x) {
  const bool rec = detail::recording<T>({&x});
  Tensor<T> out = detail::make_out<T>({1}, rec);
  T acc = T(0);
  for (int i = 0; i < x.numel(); ++i) acc += x.data()[i];
  out.data()[0] = acc;
  if (rec) {
    Tensor<T> tx = x, to = out;
    detail::record<T>("reduce_sum", out, [tx, to]() mutable {
      if (!tx.requires_grad()) return;
      auto& g = tx.grad();
      const T go = to.grad()[0];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean_all: empty tensor");
  return scale(reduce_sum(x), T(1) / T(x.numel()));
}

// ---------------------------------------------------------------------------
// convolution

// Cross-correlation of [C_in,H,W] with [C_out,C_in,kh,kw]; optional bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
  if (x.ndim() != 3 || w.ndim() != 4 || w.dim(1) != x.dim(0))
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " with kernel " +
                     shape_str(w.shape()));
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != w.dim(0)))
    throw ShapeError("conv2d: bias " + shape_str(b.shape()) + " for kernel " + shape_str(w.shape()));
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: bad stride/padding");
  const int ci = x.dim(0), h = x.dim(1), ww = x.dim(2);
  const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (ww + 2 * pad - kw) / stride + 1;
  if (h + 2 * pad < kh || ww + 2 * pad < kw || ho <= 0 || wo <= 0)
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " too small for kernel " +
                     shape_str(w.shape()) + " stride " + std::to_string(stride) + " pad " +
                     std::to_string(pad));
  const int ckk = ci * kh * kw, spatial = ho * wo;
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(ckk) * spatial);
  detail::im2col(x.data().data(), ci, h, ww, kh, kw, stride, pad, ho, wo, cols->data());
  const bool rec = detail::recording<T>({&x, &w, &b});
  Tensor<T> out = detail::make_out<T>({co, ho, wo}, rec);
  detail::gemm(co, ckk, spatial, w.data().data(), cols->data(), out.data().data());
  if (b.defined())
    for (int c = 0; c < co; ++c)
      for (int s = 0; s < spatial; ++s) out.data()[static_cast<std::size_t>(c) * spatial + s] += b.data()[c];
  if (rec) {
    Tensor<T> tx = x, tw = w, tb = b, to = out;
    detail::record<T>("conv2d", out,
                      [tx, tw, tb, to, cols, ci, h, ww, co, kh, kw, stride, pad, ho, wo, ckk,
                       spatial]() mutable {
      const T* g = to.grad().data();
      if (tw.requires_grad())
        detail::gemm_nt(co, spatial, ckk, g, cols->data(), tw.grad().data());
      if (tb.defined() && tb.requires_grad()) {
        auto& gb = tb.grad();
        for (int c = 0; c < co; ++c) {
          T acc = T(0);
          for (int s = 0; s < spatial; ++s) acc += g[static_cast<std::size_t>(c) * spatial + s];
          gb[c] += acc;
        }
      }
      if (tx.requires_grad()) {
        std::vector<T> dcols(static_cast<std::size_t>(ckk) * spatial, T(0));
        detail::gemm_tn(ckk, co, spatial, tw.data().data(), g, dcols.data());
        detail::col2im(dcols.data(), ci, h, ww, kh, kw, stride, pad, ho, wo, tx.grad().data());
      }
    });
  }
  return out;
}

// Adjoint of conv2d: maps [C_in,H,W] through kernel [C_in,C_out,kh,kw] to
// [C_out,(H-1)*stride+kh-2*pad, ...]. With kh = kw = stride and pad 0 this is
// the exact x stride upsampling.
template <typename T>
Tensor<T> transpose_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                           int pad) {
  if (x.ndim() != 3 || w.ndim() != 4 || w.dim(0) != x.dim(0))
    throw ShapeError("transpose_conv2d: input " + shape_str(x.shape()) + " with kernel " +
                     shape_str(w.shape()));
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != w.dim(1)))
    throw ShapeError("transpose_conv2d: bias " + shape_str(b.shape()) + " for kernel " +
                     shape_str(w.shape()));
  if (stride < 1 || pad < 0) throw ShapeError("transpose_conv2d: bad stride/padding");
  const int ci = x.dim(0), h = x.dim(1), ww = x.dim(2);
  const int co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int ho = (h - 1) * stride + kh - 2 * pad;
  const int wo = (ww - 1) * stride + kw - 2 * pad;
  if (ho <= 0 || wo <= 0)
    throw ShapeError("transpose_conv2d: empty output for input " + shape_str(x.shape()));
  const int ckk = co * kh * kw, positions = h * ww;
  const bool rec = detail::recording<T>({&x, &w, &b});
  Tensor<T> out = detail::make_out<T>({co, ho, wo}, rec);
  {
    std::vector<T> cols(static_cast<std::size_t>(ckk) * positions, T(0));
    detail::gemm_tn(ckk, ci, positions, w.data().data(), x.data().data(), cols.data());
    detail::col2im(cols.data(), co, ho, wo, kh, kw, stride, pad, h, ww, out.data().data());
  }
  if (b.defined())
    for (int c = 0; c < co; ++c)
      for (int s = 0; s < ho * wo; ++s)
        out.data()[static_cast<std::size_t>(c) * ho * wo + s] += b.data()[c];
  if (rec) {
    Tensor<T> tx = x, tw = w, tb = b, to = out;
    detail::record<T>("transpose_conv2d", out,
                      [tx, tw, tb, to, ci, h, ww, co, kh, kw, stride, pad, ho, wo, ckk,
                       positions]() mutable {
      const T* g = to.grad().data();
      std::vector<T> gcols(static_cast<std::size_t>(ckk) * positions);
      detail::im2col(g, co, ho, wo, kh, kw, stride, pad, h, ww, gcols.data());
      if (tx.requires_grad())
        detail::gemm(ci, ckk, positions, tw.data().data(), gcols.data(), tx.grad().data());
      if (tw.requires_grad())
        detail::gemm_nt(ci, positions, ckk, tx.data().data(), gcols.data(), tw.grad().data());
      if (tb.defined() && tb.requires_grad()) {
        auto& gb = tb.grad();
        for (int c = 0; c < co; ++c) {
          T acc = T(0);
          for (int s = 0; s < ho * wo; ++s) acc += g[static_cast<std::size_t>(c) * ho * wo + s];
          gb[c] += acc;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// sampling

// Samples a [C,H,W] map at P continuous (x,y) locations, x along width.
// Coordinates clamp to the border; integer locations hit cells exactly.
// Differentiable in both the map and the locations.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& map, const Tensor<T>& locs) {
  if (map.ndim() != 3 || locs.ndim() != 2 || locs.dim(1) != 2)
    throw ShapeError("bilinear_sample: map " + shape_str(map.shape()) + " at " +
                     shape_str(locs.shape()));
  const int c = map.dim(0), h = map.dim(1), w = map.dim(2);
  if (h < 2 || w < 2)
    throw ShapeError("bilinear_sample: map too small " + shape_str(map.shape()));
  const int p = locs.dim(0);
  const bool rec = detail::recording<T>({&map, &locs});
  Tensor<T> out = detail::make_out<T>({p, c}, rec);
  const int spatial = h * w;
  for (int i = 0; i < p; ++i) {
    T lx = locs.data()[i * 2 + 0];
    T ly = locs.data()[i * 2 + 1];
    // non-finite locations pin to the border so diverging weights cannot
    // index out of bounds before the loss check catches them
    if (!std::isfinite(static_cast<double>(lx))) lx = T(0);
    if (!std::isfinite(static_cast<double>(ly))) ly = T(0);
    const T cx = std::min(std::max(lx, T(0)), T(w - 1));
    const T cy = std::min(std::max(ly, T(0)), T(h - 1));
    int x0 = static_cast<int>(std::floor(cx));
    int y0 = static_cast<int>(std::floor(cy));
    x0 = std::min(x0, w - 2);
    y0 = std::min(y0, h - 2);
    const T fx = cx - T(x0), fy = cy - T(y0);
    for (int ch = 0; ch < c; ++ch) {
      const T* m = map.data().data() + static_cast<std::size_t>(ch) * spatial;
      const T v00 = m[y0 * w + x0], v01 = m[y0 * w + x0 + 1];
      const T v10 = m[(y0 + 1) * w + x0], v11 = m[(y0 + 1) * w + x0 + 1];
      out.data()[i * c + ch] = (T(1) - fy) * ((T(1) - fx) * v00 + fx * v01) +
                               fy * ((T(1) - fx) * v10 + fx * v11);
    }
  }
  if (rec) {
    Tensor<T> tm = map, tl = locs, to = out;
    detail::record<T>("bilinear_sample", out, [tm, tl, to, c, h, w, p, spatial]() mutable {
      const auto& g = to.grad();
      for (int i = 0; i < p; ++i) {
        const T lx = tl.data()[i * 2 + 0];
        const T ly = tl.data()[i * 2 + 1];
        const bool in_x = lx > T(0) && lx < T(w - 1);
        const bool in_y = ly > T(0) && ly < T(h - 1);
        const T cx = std::min(std::max(lx, T(0)), T(w - 1));
        const T cy = std::min(std::max(ly, T(0)), T(h - 1));
        int x0 = static_cast<int>(std::floor(cx));
        int y0 = static_cast<int>(std::floor(cy));
        x0 = std::min(x0, w - 2);
        y0 = std::min(y0, h - 2);
        const T fx = cx - T(x0), fy = cy - T(y0);
        T dx = T(0), dy = T(0);
        for (int ch = 0; ch < c; ++ch) {
          const T go = g[i * c + ch];
          if (go == T(0)) continue;
          const std::size_t base = static_cast<std::size_t>(ch) * spatial;
          const std::size_t i00 = base + y0 * w + x0, i01 = i00 + 1;
          const std::size_t i10 = base + (y0 + 1) * w + x0, i11 = i10 + 1;
          if (tm.requires_grad()) {
            auto& gm = tm.grad();
            gm[i00] += go * (T(1) - fy) * (T(1) - fx);
            gm[i01] += go * (T(1) - fy) * fx;
            gm[i10] += go * fy * (T(1) - fx);
            gm[i11] += go * fy * fx;
          }
          if (tl.requires_grad()) {
            const auto& m = tm.data();
            dx += go * ((T(1) - fy) * (m[i01] - m[i00]) + fy * (m[i11] - m[i10]));
            dy += go * ((T(1) - fx) * (m[i10] - m[i00]) + fx * (m[i11] - m[i01]));
          }
        }
        if (tl.requires_grad()) {
          auto& gl = tl.grad();
          if (in_x) gl[i * 2 + 0] += dx;
          if (in_y) gl[i * 2 + 1] += dy;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses (elementwise or row-wise; reductions are composed outside)

// Huber penalty on pred - target; target carries no gradient.
template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& pred, const Tensor<T>& target, T beta) {
  if (pred.shape() != target.shape())
    throw ShapeError("smooth_l1: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  if (beta <= T(0)) throw ShapeError("smooth_l1: beta must be positive");
  const bool rec = detail::recording<T>({&pred});
  Tensor<T> out = detail::make_out<T>(pred.shape(), rec);
  for (int i = 0; i < pred.numel(); ++i) {
    const T d = pred.data()[i] - target.data()[i];
    const T a = std::abs(d);
    out.data()[i] = a < beta ? T(0.5) * d * d / beta : a - T(0.5) * beta;
  }
  if (rec) {
    Tensor<T> tp = pred, tt = target, to = out;
    detail::record<T>("smooth_l1", out, [tp, tt, to, beta]() mutable {
      if (!tp.requires_grad()) return;
      auto& g = tp.grad();
      const auto& go = to.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T d = tp.data()[i] - tt.data()[i];
        const T slope = d < -beta ? T(-1) : (d > beta ? T(1) : d / beta);
        g[i] += go[i] * slope;
      }
    });
  }
  return out;
}

// Focal binary cross-entropy on logits; targets are 0/1 constants.
template <typename T>
Tensor<T> focal_bce_logits(const Tensor<T>& logits, const Tensor<T>& targets, T alpha, T gamma) {
  if (logits.shape() != targets.shape())
    throw ShapeError("focal_bce_logits: shape mismatch " + shape_str(logits.shape()) + " vs " +
                     shape_str(targets.shape()));
  auto softplus = [](T v) { return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); };
  const bool rec = detail::recording<T>({&logits});
  Tensor<T> out = detail::make_out<T>(logits.shape(), rec);
  for (int i = 0; i < logits.numel(); ++i) {
    const T x = logits.data()[i];
    const T s = T(1) / (T(1) + std::exp(-x));
    if (targets.data()[i] > T(0.5)) {
      const T log_p = -softplus(-x);
      out.data()[i] = -alpha * std::pow(T(1) - s, gamma) * log_p;
    } else {
      const T log_q = -softplus(x);
      out.data()[i] = -(T(1) - alpha) * std::pow(s, gamma) * log_q;
    }
  }
  if (rec) {
    Tensor<T> tl = logits, tt = targets, to = out;
    detail::record<T>("focal_bce_logits", out, [tl, tt, to, alpha, gamma, softplus]() mutable {
      if (!tl.requires_grad()) return;
      auto& g = tl.grad();
      const auto& go = to.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T x = tl.data()[i];
        const T s = T(1) / (T(1) + std::exp(-x));
        const T u = T(1) - s;
        T d;
        if (tt.data()[i] > T(0.5)) {
          const T log_p = -softplus(-x);
          d = -alpha * (-gamma * s * std::pow(u, gamma) * log_p + std::pow(u, gamma + T(1)));
        } else {
          const T log_q = -softplus(x);
          d = -(T(1) - alpha) * (gamma * std::pow(s, gamma) * u * log_q - std::pow(s, gamma + T(1)));
        }
        g[i] += go[i] * d;
      }
    });
  }
  return out;
}

// Per-row cross-entropy of [M,C] logits against integer class targets -> [M].
template <typename T>
Tensor<T> softmax_xent_rows(const Tensor<T>& logits, const std::vector<int>& targets) {
  if (logits.ndim() != 2 || logits.dim(0) != static_cast<int>(targets.size()))
    throw ShapeError("softmax_xent_rows: logits " + shape_str(logits.shape()) + " with " +
                     std::to_string(targets.size()) + " targets");
  const int m = logits.dim(0), c = logits.dim(1);
  for (int t : targets)
    if (t < 0 || t >= c) throw ShapeError("softmax_xent_rows: target class out of range");
  const bool rec = detail::recording<T>({&logits});
  Tensor<T> out = detail::make_out<T>({m}, rec);
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(m) * c);
  for (int i = 0; i < m; ++i) {
    T mx = logits.data()[i * c];
    for (int j = 1; j < c; ++j) mx = std::max(mx, logits.data()[i * c + j]);
    T sum = T(0);
    for (int j = 0; j < c; ++j) {
      const T e = std::exp(logits.data()[i * c + j] - mx);
      (*probs)[i * c + j] = e;
      sum += e;
    }
    for (int j = 0; j < c; ++j) (*probs)[i * c + j] /= sum;
    out.data()[i] = std::log(sum) + mx - logits.data()[i * c + targets[i]];
  }
  if (rec) {
    Tensor<T> tl = logits, to = out;
    std::vector<int> tg = targets;
    detail::record<T>("softmax_xent_rows", out, [tl, to, tg, probs, m, c]() mutable {
      if (!tl.requires_grad()) return;
      auto& g = tl.grad();
      const auto& go = to.grad();
      for (int i = 0; i < m; ++i) {
        const T gv = go[i];
        if (gv == T(0)) continue;
        for (int j = 0; j < c; ++j) g[i * c + j] += gv * (*probs)[i * c + j];
        g[i * c + tg[i]] -= gv;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// initialization

template <typename T>
void fill_uniform(Tensor<T>& t, std::mt19937_64& rng, double lo, double hi) {
  for (int i = 0; i < t.numel(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    t.data()[i] = static_cast<T>(lo + (hi - lo) * u);
  }
}

}  // namespace mfdet
