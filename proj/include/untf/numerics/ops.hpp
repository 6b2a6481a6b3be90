#pragma once

// Differentiable primitive suite. Every op validates shapes, computes the
// forward value with a fixed sequential reduction order and, when recording,
// registers an adjoint that accumulates into its inputs' gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "untf/numerics/tensor.hpp"

namespace untf {

inline constexpr double kNormEpsilon = 1e-5;

namespace detail {

template <class T>
using NodeP = std::shared_ptr<Node<T>>;

// Gradient buffer of an input, or nullptr when it does not need one.
template <class T>
T* gbuf(const NodeP<T>& n) {
    return n->requires_grad ? n->ensure_grad().data() : nullptr;
}

inline std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

/// a + b where b has a's shape, is a scalar, or is a trailing-axis bias.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const auto n = a.size();
    enum { Same, Scalar, Bias } mode;
    if (a.shape() == b.shape())
        mode = Same;
    else if (b.size() == 1)
        mode = Scalar;
    else if (b.rank() == 1 && b.size() == a.shape().back())
        mode = Bias;
    else
        shape_error("add", a.shape(), b.shape());
    const std::size_t m = b.size();
    std::vector<T> out(n);
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < n; ++i)
        out[i] = av[i] + (mode == Same ? bv[i] : mode == Scalar ? bv[0] : bv[i % m]);
    return make_result<T>("add", a.shape(), std::move(out), {a.node(), b.node()},
                          [mode, m](detail::Node<T>& self) {
                              const auto& g = self.grad;
                              if (T* ga = detail::gbuf(self.inputs[0]))
                                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                              if (T* gb = detail::gbuf(self.inputs[1])) {
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                      if (mode == Same)
                                          gb[i] += g[i];
                                      else if (mode == Scalar)
                                          gb[0] += g[i];
                                      else
                                          gb[i % m] += g[i];
                                  }
                              }
                          });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return make_result<T>("sub", a.shape(), std::move(out), {a.node(), b.node()},
                          [](detail::Node<T>& self) {
                              const auto& g = self.grad;
                              if (T* ga = detail::gbuf(self.inputs[0]))
                                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                              if (T* gb = detail::gbuf(self.inputs[1]))
                                  for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                          });
}

/// Elementwise product; b may also be a scalar.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    const bool scalar = b.size() == 1 && a.shape() != b.shape();
    if (!scalar && a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * (scalar ? b[0] : b[i]);
    return make_result<T>("mul", a.shape(), std::move(out), {a.node(), b.node()},
                          [scalar](detail::Node<T>& self) {
                              const auto& g = self.grad;
                              const auto& av = self.inputs[0]->value;
                              const auto& bv = self.inputs[1]->value;
                              if (T* ga = detail::gbuf(self.inputs[0]))
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                      ga[i] += g[i] * (scalar ? bv[0] : bv[i]);
                              if (T* gb = detail::gbuf(self.inputs[1]))
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                      gb[scalar ? 0 : i] += g[i] * av[i];
                          });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    return make_result<T>("scale", a.shape(), std::move(out), {a.node()},
                          [s](detail::Node<T>& self) {
                              T* ga = detail::gbuf(self.inputs[0]);
                              for (std::size_t i = 0; i < self.grad.size(); ++i)
                                  ga[i] += self.grad[i] * s;
                          });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
    return make_result<T>("relu", a.shape(), std::move(out), {a.node()},
                          [](detail::Node<T>& self) {
                              T* ga = detail::gbuf(self.inputs[0]);
                              const auto& x = self.inputs[0]->value;
                              for (std::size_t i = 0; i < self.grad.size(); ++i)
                                  if (x[i] > T(0)) ga[i] += self.grad[i];
                          });
}

template <class T>
Tensor<T> log1p(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (a[i] <= T(-1)) throw NumericFault("log1p: argument <= -1");
        out[i] = std::log1p(a[i]);
    }
    return make_result<T>("log1p", a.shape(), std::move(out), {a.node()},
                          [](detail::Node<T>& self) {
                              T* ga = detail::gbuf(self.inputs[0]);
                              const auto& x = self.inputs[0]->value;
                              for (std::size_t i = 0; i < self.grad.size(); ++i)
                                  ga[i] += self.grad[i] / (T(1) + x[i]);
                          });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    double s = 0;
    for (T v : a.values()) s += v;
    return make_result<T>("sum", {1}, {static_cast<T>(s)}, {a.node()},
                          [](detail::Node<T>& self) {
                              T* ga = detail::gbuf(self.inputs[0]);
                              const T g = self.grad[0];
                              for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i)
                                  ga[i] += g;
                          });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

/// Mean over the last axis: [..., n] -> [...] (rank-1 input gives [1]).
template <class T>
Tensor<T> mean_last(const Tensor<T>& a) {
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.size() / n;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    if (out_shape.empty()) out_shape = {1};
    std::vector<T> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < n; ++j) s += a[r * n + j];
        out[r] = static_cast<T>(s / static_cast<double>(n));
    }
    return make_result<T>("mean_last", out_shape, std::move(out), {a.node()},
                          [n, rows](detail::Node<T>& self) {
                              T* ga = detail::gbuf(self.inputs[0]);
                              const T inv = T(1) / static_cast<T>(n);
                              for (std::size_t r = 0; r < rows; ++r)
                                  for (std::size_t j = 0; j < n; ++j)
                                      ga[r * n + j] += self.grad[r] * inv;
                          });
}

/// Mean over valid rows: H [B, L, D], valid (B*L flags) -> [B, D].
template <class T>
Tensor<T> masked_mean_rows(const Tensor<T>& h, std::span<const std::uint8_t> valid) {
    if (h.rank() != 3) shape_error("masked_mean_rows", "expected rank 3, got " + to_string(h.shape()));
    const std::size_t B = h.dim(0), L = h.dim(1), D = h.dim(2);
    if (valid.size() != B * L)
        shape_error("masked_mean_rows", "mask holds " + std::to_string(valid.size()) +
                                            " flags for " + std::to_string(B * L) + " rows");
    std::vector<T> out(B * D, T(0));
    std::vector<T> inv(B);
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t count = 0;
        for (std::size_t l = 0; l < L; ++l) count += valid[b * L + l] ? 1 : 0;
        if (count == 0) throw ValidationError("masked_mean_rows: sample has no valid rows");
        inv[b] = T(1) / static_cast<T>(count);
        for (std::size_t l = 0; l < L; ++l)
            if (valid[b * L + l])
                for (std::size_t d = 0; d < D; ++d) out[b * D + d] += h[(b * L + l) * D + d];
        for (std::size_t d = 0; d < D; ++d) out[b * D + d] *= inv[b];
    }
    std::vector<std::uint8_t> mask(valid.begin(), valid.end());
    return make_result<T>("masked_mean_rows", {B, D}, std::move(out), {h.node()},
                          [B, L, D, inv, mask](detail::Node<T>& self) {
                              T* gh = detail::gbuf(self.inputs[0]);
                              for (std::size_t b = 0; b < B; ++b)
                                  for (std::size_t l = 0; l < L; ++l)
                                      if (mask[b * L + l])
                                          for (std::size_t d = 0; d < D; ++d)
                                              gh[(b * L + l) * D + d] +=
                                                  self.grad[b * D + d] * inv[b];
                          });
}

/// Sum of squared differences against a constant target.
template <class T>
Tensor<T> squared_error_sum(const Tensor<T>& pred, std::span<const T> target) {
    if (pred.size() != target.size())
        shape_error("squared_error", "prediction holds " + std::to_string(pred.size()) +
                                         " values, target " + std::to_string(target.size()));
    double s = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
        s += d * d;
    }
    std::vector<T> tgt(target.begin(), target.end());
    return make_result<T>("squared_error", {1}, {static_cast<T>(s)}, {pred.node()},
                          [tgt](detail::Node<T>& self) {
                              T* gp = detail::gbuf(self.inputs[0]);
                              const auto& p = self.inputs[0]->value;
                              const T g = self.grad[0];
                              for (std::size_t i = 0; i < p.size(); ++i)
                                  gp[i] += T(2) * (p[i] - tgt[i]) * g;
                          });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// a [..., K] x b [K, N] -> [..., N].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (b.rank() != 2 || a.shape().back() != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
    const std::size_t K = b.dim(0), N = b.dim(1), M = a.size() / K;
    Shape out_shape = a.shape();
    out_shape.back() = N;
    std::vector<T> out(M * N, T(0));
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t m = 0; m < M; ++m) {
        T* row = out.data() + m * N;
        for (std::size_t k = 0; k < K; ++k) {
            const T x = av[m * K + k];
            const T* brow = bv.data() + k * N;
            for (std::size_t n = 0; n < N; ++n) row[n] += x * brow[n];
        }
    }
    return make_result<T>("matmul", out_shape, std::move(out), {a.node(), b.node()},
                          [M, K, N](detail::Node<T>& self) {
                              const auto& g = self.grad;
                              const auto& A = self.inputs[0]->value;
                              const auto& Bm = self.inputs[1]->value;
                              if (T* ga = detail::gbuf(self.inputs[0]))
                                  for (std::size_t m = 0; m < M; ++m)
                                      for (std::size_t k = 0; k < K; ++k) {
                                          T s = 0;
                                          for (std::size_t n = 0; n < N; ++n)
                                              s += g[m * N + n] * Bm[k * N + n];
                                          ga[m * K + k] += s;
                                      }
                              if (T* gb = detail::gbuf(self.inputs[1]))
                                  for (std::size_t m = 0; m < M; ++m)
                                      for (std::size_t k = 0; k < K; ++k) {
                                          const T x = A[m * K + k];
                                          for (std::size_t n = 0; n < N; ++n)
                                              gb[k * N + n] += x * g[m * N + n];
                                      }
                          });
}

/// Batched product over matching leading axes: [..., M, K] x [..., K, N].
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 3 || a.rank() != b.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()) ||
        a.shape()[a.rank() - 1] != b.shape()[b.rank() - 2])
        shape_error("bmm", a.shape(), b.shape());
    const std::size_t M = a.shape()[a.rank() - 2], K = a.shape().back(), N = b.shape().back();
    const std::size_t G = a.size() / (M * K);
    Shape out_shape = a.shape();
    out_shape.back() = N;
    std::vector<T> out(G * M * N, T(0));
    for (std::size_t g = 0; g < G; ++g)
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t k = 0; k < K; ++k) {
                const T x = a[(g * M + m) * K + k];
                for (std::size_t n = 0; n < N; ++n)
                    out[(g * M + m) * N + n] += x * b[(g * K + k) * N + n];
            }
    return make_result<T>("bmm", out_shape, std::move(out), {a.node(), b.node()},
                          [G, M, K, N](detail::Node<T>& self) {
                              const auto& gr = self.grad;
                              const auto& A = self.inputs[0]->value;
                              const auto& Bm = self.inputs[1]->value;
                              T* ga = detail::gbuf(self.inputs[0]);
                              T* gb = detail::gbuf(self.inputs[1]);
                              for (std::size_t g = 0; g < G; ++g)
                                  for (std::size_t m = 0; m < M; ++m)
                                      for (std::size_t k = 0; k < K; ++k) {
                                          T s = 0;
                                          const T x = A[(g * M + m) * K + k];
                                          for (std::size_t n = 0; n < N; ++n) {
                                              const T go = gr[(g * M + m) * N + n];
                                              s += go * Bm[(g * K + k) * N + n];
                                              if (gb) gb[(g * K + k) * N + n] += x * go;
                                          }
                                          if (ga) ga[(g * M + m) * K + k] += s;
                                      }
                          });
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel(shape) != a.size()) shape_error("reshape", a.shape(), shape);
    std::vector<T> out(a.values().begin(), a.values().end());
    return make_result<T>("reshape", std::move(shape), std::move(out), {a.node()},
                          [](detail::Node<T>& self) {
                              T* ga = detail::gbuf(self.inputs[0]);
                              for (std::size_t i = 0; i < self.grad.size(); ++i)
                                  ga[i] += self.grad[i];
                          });
}

/// out axis i takes input axis axes[i].
template <class T>
Tensor<T> permute(const Tensor<T>& a, std::vector<std::size_t> axes) {
    const std::size_t r = a.rank();
    std::vector<std::size_t> sorted = axes;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i)
        if (sorted.size() != r || sorted[i] != i)
            shape_error("permute", "axes are not a permutation of rank " + std::to_string(r));
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.dim(axes[i]);
    const auto in_st = detail::strides_of(a.shape());
    // src[i] = flat input index of flat output index i.
    std::vector<std::size_t> src(a.size());
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t o = 0; o < src.size(); ++o) {
        std::size_t s = 0;
        for (std::size_t d = 0; d < r; ++d) s += idx[d] * in_st[axes[d]];
        src[o] = s;
        for (std::size_t d = r; d-- > 0;) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    std::vector<T> out(a.size());
    for (std::size_t o = 0; o < out.size(); ++o) out[o] = a[src[o]];
    return make_result<T>("permute", out_shape, std::move(out), {a.node()},
                          [src = std::move(src)](detail::Node<T>& self) {
                              T* ga = detail::gbuf(self.inputs[0]);
                              for (std::size_t o = 0; o < src.size(); ++o)
                                  ga[src[o]] += self.grad[o];
                          });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a, std::size_t i, std::size_t j) {
    std::vector<std::size_t> axes(a.rank());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    if (i >= axes.size() || j >= axes.size()) shape_error("transpose", "axis out of range");
    std::swap(axes[i], axes[j]);
    return permute(a, std::move(axes));
}

/// Concatenate along the last axis; leading extents must match.
template <class T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != b.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin()))
        shape_error("concat", a.shape(), b.shape());
    const std::size_t na = a.shape().back(), nb = b.shape().back(), rows = a.size() / na;
    Shape out_shape = a.shape();
    out_shape.back() = na + nb;
    std::vector<T> out(rows * (na + nb));
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(a.values().data() + r * na, na, out.data() + r * (na + nb));
        std::copy_n(b.values().data() + r * nb, nb, out.data() + r * (na + nb) + na);
    }
    return make_result<T>("concat", out_shape, std::move(out), {a.node(), b.node()},
                          [na, nb, rows](detail::Node<T>& self) {
                              T* ga = detail::gbuf(self.inputs[0]);
                              T* gb = detail::gbuf(self.inputs[1]);
                              for (std::size_t r = 0; r < rows; ++r) {
                                  const T* g = self.grad.data() + r * (na + nb);
                                  if (ga)
                                      for (std::size_t j = 0; j < na; ++j) ga[r * na + j] += g[j];
                                  if (gb)
                                      for (std::size_t j = 0; j < nb; ++j)
                                          gb[r * nb + j] += g[na + j];
                              }
                          });
}

/// Contiguous range [start, start+len) along one axis.
template <class T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
    if (axis >= a.rank() || len == 0 || start + len > a.dim(axis))
        shape_error("slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                                 ") on axis " + std::to_string(axis) + " of " + to_string(a.shape()));
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= a.dim(d);
    for (std::size_t d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
    const std::size_t ext = a.dim(axis);
    Shape out_shape = a.shape();
    out_shape[axis] = len;
    std::vector<T> out(outer * len * inner);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(a.values().data() + (o * ext + start) * inner, len * inner,
                    out.data() + o * len * inner);
    return make_result<T>("slice", out_shape, std::move(out), {a.node()},
                          [outer, inner, ext, start, len](detail::Node<T>& self) {
                              T* ga = detail::gbuf(self.inputs[0]);
                              for (std::size_t o = 0; o < outer; ++o)
                                  for (std::size_t j = 0; j < len * inner; ++j)
                                      ga[(o * ext + start) * inner + j] +=
                                          self.grad[o * len * inner + j];
                          });
}

/// Row lookup: table [N, D] at indices -> [indices.size(), D].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::size_t> indices) {
    if (table.rank() != 2) shape_error("embedding", "table must be rank 2, got " + to_string(table.shape()));
    const std::size_t N = table.dim(0), D = table.dim(1);
    if (indices.empty()) shape_error("embedding", "empty index list");
    std::vector<T> out(indices.size() * D);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= N)
            throw ValidationError("embedding: index " + std::to_string(indices[i]) +
                                  " out of bounds for table with " + std::to_string(N) + " rows");
        std::copy_n(table.values().data() + indices[i] * D, D, out.data() + i * D);
    }
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    return make_result<T>("embedding", {idx.size(), D}, std::move(out), {table.node()},
                          [idx, D](detail::Node<T>& self) {
                              T* gt = detail::gbuf(self.inputs[0]);
                              for (std::size_t i = 0; i < idx.size(); ++i)
                                  for (std::size_t d = 0; d < D; ++d)
                                      gt[idx[i] * D + d] += self.grad[i * D + d];
                          });
}

/// Same lookup over the rows of any [..., D] tensor.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
    const std::size_t D = x.shape().back();
    return embedding(reshape(x, {x.size() / D, D}), rows);
}

/// Replace the listed rows of x [..., D] by the vector v [D].
template <class T>
Tensor<T> replace_rows(const Tensor<T>& x, std::span<const std::size_t> rows, const Tensor<T>& v) {
    const std::size_t D = x.shape().back();
    if (v.size() != D) shape_error("replace_rows", x.shape(), v.shape());
    const std::size_t nrows = x.size() / D;
    std::vector<std::uint8_t> hit(nrows, 0);
    for (auto r : rows) {
        if (r >= nrows) throw ValidationError("replace_rows: row index out of bounds");
        hit[r] = 1;
    }
    std::vector<T> out(x.values().begin(), x.values().end());
    for (std::size_t r = 0; r < nrows; ++r)
        if (hit[r]) std::copy_n(v.values().data(), D, out.data() + r * D);
    return make_result<T>("replace_rows", x.shape(), std::move(out), {x.node(), v.node()},
                          [hit, D](detail::Node<T>& self) {
                              T* gx = detail::gbuf(self.inputs[0]);
                              T* gv = detail::gbuf(self.inputs[1]);
                              for (std::size_t r = 0; r < hit.size(); ++r)
                                  for (std::size_t d = 0; d < D; ++d) {
                                      const T g = self.grad[r * D + d];
                                      if (hit[r]) {
                                          if (gv) gv[d] += g;
                                      } else if (gx) {
                                          gx[r * D + d] += g;
                                      }
                                  }
                          });
}

// ---------------------------------------------------------------------------
// Normalization and softmax
// ---------------------------------------------------------------------------

/// Softmax over the last axis. With a mask (one flag per element), flagged-off
/// entries get probability 0; a row with no allowed entry is an error.
template <class T>
Tensor<T> softmax(const Tensor<T>& a, std::span<const std::uint8_t> mask = {}) {
    const std::size_t n = a.shape().back(), rows = a.size() / n;
    if (!mask.empty() && mask.size() != a.size())
        shape_error("softmax", "mask holds " + std::to_string(mask.size()) + " flags for " +
                                   to_string(a.shape()));
    std::vector<T> out(a.size(), T(0));
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = a.values().data() + r * n;
        T* y = out.data() + r * n;
        auto allowed = [&](std::size_t j) { return mask.empty() || mask[r * n + j]; };
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (allowed(j)) mx = std::max(mx, x[j]);
        if (mx == -std::numeric_limits<T>::infinity())
            throw ValidationError("softmax: every entry of a row is masked");
        T s = 0;
        for (std::size_t j = 0; j < n; ++j)
            if (allowed(j)) s += (y[j] = std::exp(x[j] - mx));
        for (std::size_t j = 0; j < n; ++j) y[j] /= s;
    }
    return make_result<T>("softmax", a.shape(), out, {a.node()},
                          [n, rows, y = out](detail::Node<T>& self) {
                              T* ga = detail::gbuf(self.inputs[0]);
                              for (std::size_t r = 0; r < rows; ++r) {
                                  T dot = 0;
                                  for (std::size_t j = 0; j < n; ++j)
                                      dot += y[r * n + j] * self.grad[r * n + j];
                                  for (std::size_t j = 0; j < n; ++j)
                                      ga[r * n + j] += y[r * n + j] * (self.grad[r * n + j] - dot);
                              }
                          });
}

namespace detail {

// Shared adjoint of (x - mean) / sqrt(var + eps) over groups of `count`
// elements; `at(g, j)` maps (group, member) to a flat index.
template <class T, class At>
void normalize_adjoint(std::size_t groups, std::size_t count, const std::vector<T>& xhat,
                       const std::vector<T>& inv_std, const std::vector<T>& gxhat, T* gx, At at) {
    for (std::size_t g = 0; g < groups; ++g) {
        T mg = 0, mgx = 0;
        for (std::size_t j = 0; j < count; ++j) {
            const auto i = at(g, j);
            mg += gxhat[i];
            mgx += gxhat[i] * xhat[i];
        }
        mg /= static_cast<T>(count);
        mgx /= static_cast<T>(count);
        for (std::size_t j = 0; j < count; ++j) {
            const auto i = at(g, j);
            gx[i] += inv_std[g] * (gxhat[i] - mg - xhat[i] * mgx);
        }
    }
}

}  // namespace detail

/// Layer normalization over the last axis with affine gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta) {
    const std::size_t D = a.shape().back(), rows = a.size() / D;
    if (gamma.size() != D || beta.size() != D) shape_error("layer_norm", a.shape(), gamma.shape());
    std::vector<T> xhat(a.size()), inv_std(rows), out(a.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = a.values().data() + r * D;
        double mu = 0, var = 0;
        for (std::size_t j = 0; j < D; ++j) mu += x[j];
        mu /= static_cast<double>(D);
        for (std::size_t j = 0; j < D; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= static_cast<double>(D);
        inv_std[r] = static_cast<T>(1.0 / std::sqrt(var + kNormEpsilon));
        for (std::size_t j = 0; j < D; ++j) {
            xhat[r * D + j] = static_cast<T>((x[j] - mu)) * inv_std[r];
            out[r * D + j] = gamma[j] * xhat[r * D + j] + beta[j];
        }
    }
    return make_result<T>(
        "layer_norm", a.shape(), std::move(out), {a.node(), gamma.node(), beta.node()},
        [D, rows, xhat, inv_std](detail::Node<T>& self) {
            const auto& g = self.grad;
            const auto& gam = self.inputs[1]->value;
            if (T* gg = detail::gbuf(self.inputs[1]))
                for (std::size_t i = 0; i < g.size(); ++i) gg[i % D] += g[i] * xhat[i];
            if (T* gbeta = detail::gbuf(self.inputs[2]))
                for (std::size_t i = 0; i < g.size(); ++i) gbeta[i % D] += g[i];
            if (T* gx = detail::gbuf(self.inputs[0])) {
                std::vector<T> gxhat(g.size());
                for (std::size_t i = 0; i < g.size(); ++i) gxhat[i] = g[i] * gam[i % D];
                detail::normalize_adjoint<T>(rows, D, xhat, inv_std, gxhat, gx,
                                             [D](std::size_t r, std::size_t j) { return r * D + j; });
            }
        });
}

/// Per-channel statistics of a batch-norm input.
template <class T>
struct BatchStats {
    std::vector<T> mean;
    std::vector<T> var;
};

/// Batch normalization of x [N, C, Len] with statistics over (N, Len).
/// When `fixed` is given those statistics are used as constants instead;
/// `observed` receives the batch statistics that were computed.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta,
                     const BatchStats<T>* fixed = nullptr, BatchStats<T>* observed = nullptr) {
    if (a.rank() != 3) shape_error("batch_norm", "expected [N,C,Len], got " + to_string(a.shape()));
    const std::size_t N = a.dim(0), C = a.dim(1), Len = a.dim(2);
    if (gamma.size() != C || beta.size() != C) shape_error("batch_norm", a.shape(), gamma.shape());
    if (fixed && (fixed->mean.size() != C || fixed->var.size() != C))
        shape_error("batch_norm", "fixed statistics do not match channel count");
    const std::size_t count = N * Len;
    // Element (n, c, t) lives at (n * C + c) * Len + t; loops run over t.
    auto row = [C, Len](std::size_t n, std::size_t c) { return (n * C + c) * Len; };
    std::vector<T> xhat(a.size()), inv_std(C), out(a.size());
    BatchStats<T> stats{std::vector<T>(C), std::vector<T>(C)};
    const T* x = a.values().data();
    for (std::size_t c = 0; c < C; ++c) {
        double mu = 0, var = 0;
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t t = 0; t < Len; ++t) mu += x[row(n, c) + t];
        mu /= static_cast<double>(count);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t t = 0; t < Len; ++t) {
                const double d = x[row(n, c) + t] - mu;
                var += d * d;
            }
        var /= static_cast<double>(count);
        stats.mean[c] = static_cast<T>(mu);
        stats.var[c] = static_cast<T>(var);
        if (fixed) {
            mu = fixed->mean[c];
            var = fixed->var[c];
        }
        inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + kNormEpsilon));
        const T m = static_cast<T>(mu), is = inv_std[c], gc = gamma[c], bc = beta[c];
        for (std::size_t n = 0; n < N; ++n) {
            const std::size_t o = row(n, c);
            for (std::size_t t = 0; t < Len; ++t) {
                xhat[o + t] = (x[o + t] - m) * is;
                out[o + t] = gc * xhat[o + t] + bc;
            }
        }
    }
    if (observed) *observed = stats;
    const bool frozen = fixed != nullptr;
    return make_result<T>(
        "batch_norm", a.shape(), std::move(out), {a.node(), gamma.node(), beta.node()},
        [N, C, Len, count, xhat, inv_std, row, frozen](detail::Node<T>& self) {
            const T* g = self.grad.data();
            const auto& gam = self.inputs[1]->value;
            T* gg = detail::gbuf(self.inputs[1]);
            T* gbeta = detail::gbuf(self.inputs[2]);
            T* gx = detail::gbuf(self.inputs[0]);
            for (std::size_t c = 0; c < C; ++c) {
                double sg = 0, sgx = 0;
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t o = row(n, c);
                    for (std::size_t t = 0; t < Len; ++t) {
                        sg += g[o + t];
                        sgx += g[o + t] * xhat[o + t];
                    }
                }
                if (gg) gg[c] += static_cast<T>(sgx);
                if (gbeta) gbeta[c] += static_cast<T>(sg);
                if (!gx) continue;
                // With gxhat = g * gamma: mean(gxhat) = gamma * sg / count, etc.
                const T scale = gam[c] * inv_std[c];
                const T mg = frozen ? T(0) : static_cast<T>(sg / static_cast<double>(count));
                const T mgx = frozen ? T(0) : static_cast<T>(sgx / static_cast<double>(count));
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t o = row(n, c);
                    for (std::size_t t = 0; t < Len; ++t) gx[o + t] += scale * (g[o + t] - mg - xhat[o + t] * mgx);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 1-D cross-correlation: x [N, Cin, Tin], w [Cout, Cin, K], b [Cout] ->
/// [N, Cout, Tout] with Tout = (Tin + 2*pad - K) / stride + 1, zero padding.
/// Lowered per sample to an im2col product so inner loops run over time.
template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride,
                 std::size_t pad) {
    if (x.rank() != 3 || w.rank() != 3 || x.dim(1) != w.dim(1) || b.size() != w.dim(0))
        shape_error("conv1d", x.shape(), w.shape());
    if (stride == 0) shape_error("conv1d", "stride must be positive");
    const std::size_t N = x.dim(0), Cin = x.dim(1), Tin = x.dim(2);
    const std::size_t Cout = w.dim(0), K = w.dim(2), J = Cin * K;
    if (Tin + 2 * pad < K)
        shape_error("conv1d", "input length " + std::to_string(Tin) + " shorter than kernel " +
                                  std::to_string(K));
    const std::size_t Tout = (Tin + 2 * pad - K) / stride + 1;

    // col[(ci*K + k) * Tout + t] = x[ci, t*stride + k - pad] (0 outside).
    auto im2col = [=](const T* xs, std::vector<T>& col) {
        col.assign(J * Tout, T(0));
        for (std::size_t ci = 0; ci < Cin; ++ci)
            for (std::size_t k = 0; k < K; ++k) {
                T* c = col.data() + (ci * K + k) * Tout;
                const T* xi = xs + ci * Tin;
                for (std::size_t t = 0; t < Tout; ++t) {
                    const std::size_t pos = t * stride + k;
                    if (pos >= pad && pos - pad < Tin) c[t] = xi[pos - pad];
                }
            }
    };

    std::vector<T> out(N * Cout * Tout);
    std::vector<T> col;
    auto xv = x.values();
    auto wv = w.values();
    for (std::size_t n = 0; n < N; ++n) {
        im2col(xv.data() + n * Cin * Tin, col);
        for (std::size_t co = 0; co < Cout; ++co) {
            T* o = out.data() + (n * Cout + co) * Tout;
            std::fill_n(o, Tout, b[co]);
            const T* wr = wv.data() + co * J;
            for (std::size_t j = 0; j < J; ++j) {
                const T wj = wr[j];
                const T* c = col.data() + j * Tout;
                for (std::size_t t = 0; t < Tout; ++t) o[t] += wj * c[t];
            }
        }
    }
    return make_result<T>(
        "conv1d", {N, Cout, Tout}, std::move(out), {x.node(), w.node(), b.node()},
        [=](detail::Node<T>& self) {
            const auto& g = self.grad;
            const auto& X = self.inputs[0]->value;
            const auto& W = self.inputs[1]->value;
            T* gx = detail::gbuf(self.inputs[0]);
            T* gw = detail::gbuf(self.inputs[1]);
            T* gb = detail::gbuf(self.inputs[2]);
            std::vector<T> col, colT, gcol;
            for (std::size_t n = 0; n < N; ++n) {
                const T* gn = g.data() + n * Cout * Tout;
                if (gb)
                    for (std::size_t co = 0; co < Cout; ++co) {
                        T s = 0;
                        for (std::size_t t = 0; t < Tout; ++t) s += gn[co * Tout + t];
                        gb[co] += s;
                    }
                if (gw) {
                    // Transposed columns keep the update loop contiguous over j.
                    im2col(X.data() + n * Cin * Tin, col);
                    colT.resize(J * Tout);
                    for (std::size_t j = 0; j < J; ++j)
                        for (std::size_t t = 0; t < Tout; ++t) colT[t * J + j] = col[j * Tout + t];
                    for (std::size_t co = 0; co < Cout; ++co) {
                        const T* go = gn + co * Tout;
                        T* gwr = gw + co * J;
                        for (std::size_t t = 0; t < Tout; ++t) {
                            const T gt = go[t];
                            const T* c = colT.data() + t * J;
                            for (std::size_t j = 0; j < J; ++j) gwr[j] += gt * c[j];
                        }
                    }
                }
                if (gx) {
                    gcol.assign(J * Tout, T(0));
                    for (std::size_t co = 0; co < Cout; ++co) {
                        const T* go = gn + co * Tout;
                        for (std::size_t j = 0; j < J; ++j) {
                            const T wj = W[co * J + j];
                            T* c = gcol.data() + j * Tout;
                            for (std::size_t t = 0; t < Tout; ++t) c[t] += wj * go[t];
                        }
                    }
                    T* gxn = gx + n * Cin * Tin;
                    for (std::size_t ci = 0; ci < Cin; ++ci)
                        for (std::size_t k = 0; k < K; ++k) {
                            const T* c = gcol.data() + (ci * K + k) * Tout;
                            for (std::size_t t = 0; t < Tout; ++t) {
                                const std::size_t pos = t * stride + k;
                                if (pos >= pad && pos - pad < Tin) gxn[ci * Tin + pos - pad] += c[t];
                            }
                        }
                }
            }
        });
}

}  // namespace untf
