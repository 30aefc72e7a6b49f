#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "foam/common.hpp"

namespace foam::nets {

namespace detail {

// 3x3 / stride-2 / pad-1 convolution kernel shared by the tape op and the
// tape-free inference path, so both produce bit-identical results.
template <typename T>
void conv3x3s2_plain(const T* x, const T* w, const T* b, T* y, int B, int Cin, int H, int W,
                     int Cout, int OH, int OW) {
  for (int bb = 0; bb < B; ++bb)
    for (int co = 0; co < Cout; ++co)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          T acc = b[co];
          for (int ci = 0; ci < Cin; ++ci)
            for (int ky = 0; ky < 3; ++ky) {
              const int iy = oy * 2 + ky - 1;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < 3; ++kx) {
                const int ix = ox * 2 + kx - 1;
                if (ix < 0 || ix >= W) continue;
                acc += x[((static_cast<size_t>(bb) * Cin + ci) * H + iy) * W + ix] *
                       w[((static_cast<size_t>(co) * Cin + ci) * 3 + ky) * 3 + kx];
              }
            }
          y[((static_cast<size_t>(bb) * Cout + co) * OH + oy) * OW + ox] = acc;
        }
}

}  // namespace detail

// Reverse-mode autodiff on a linear tape. Every operation appends a node
// whose inputs are earlier nodes, so reverse creation order is a valid
// topological order for the backward sweep. The scalar type is a template
// parameter: training runs in float, finite-difference verification in
// double.
//
// Values are flat row-major buffers with explicit dims. Sequence tensors use
// the layout [batch, tokens, dim] flattened to (batch*tokens) x dim.

template <typename T>
class Tape {
 public:
  using Ref = int;

  struct Node {
    std::vector<int> dims;
    std::vector<T> val;
    std::vector<T> grad;                 // allocated on demand during backward
    std::function<void(Tape&)> backward; // accumulates into parent grads
    std::vector<T>* grad_sink = nullptr; // external accumulator (parameters)
  };

  std::vector<Node>& nodes() { return nodes_; }
  Node& node(Ref r) { return nodes_[static_cast<size_t>(r)]; }
  const Node& node(Ref r) const { return nodes_[static_cast<size_t>(r)]; }
  const std::vector<T>& val(Ref r) const { return node(r).val; }
  const std::vector<int>& dims(Ref r) const { return node(r).dims; }

  static size_t numel(const std::vector<int>& dims) {
    size_t n = 1;
    for (int d : dims) n *= static_cast<size_t>(d);
    return n;
  }

  // Leaf holding a constant (targets, masks, cached features): no gradient.
  Ref constant(std::vector<T> v, std::vector<int> dims) {
    check_shape(v, dims, "constant");
    return push(std::move(dims), std::move(v), nullptr, nullptr);
  }

  // Leaf holding a parameter: after backward(), its gradient is added into
  // *grad_sink (which must outlive the tape sweep).
  Ref leaf(const std::vector<T>& v, std::vector<int> dims, std::vector<T>* grad_sink) {
    check_shape(v, dims, "leaf");
    return push(std::move(dims), v, nullptr, grad_sink);
  }

  // C[r, n] = A[r, k] @ W[k, n]; leading dims of A beyond the last are
  // flattened into rows.
  Ref matmul(Ref a, Ref w) {
    const auto& da = dims(a);
    const auto& dw = dims(w);
    if (dw.size() != 2 || da.empty() || da.back() != dw[0])
      throw std::invalid_argument("matmul: inner dims disagree");
    const int k = dw[0], n = dw[1];
    const int rows = static_cast<int>(numel(da)) / k;
    std::vector<T> out(static_cast<size_t>(rows) * n);
    matmul_nn(val(a).data(), val(w).data(), out.data(), rows, k, n);
    std::vector<int> od(da.begin(), da.end() - 1);
    od.push_back(n);
    return push(std::move(od), std::move(out), [a, w, rows, k, n](Tape& t) {
      Ref self = t.current_;
      const T* g = t.node(self).grad.data();
      if (T* ga = t.grad_ptr(a)) {  // dA += dC @ W^T
        const T* W = t.val(w).data();
        for (int r = 0; r < rows; ++r)
          for (int j = 0; j < n; ++j) {
            const T gv = g[static_cast<size_t>(r) * n + j];
            if (gv == T(0)) continue;
            const T* wrow = W;  // column j of W == stride over rows
            for (int i = 0; i < k; ++i)
              ga[static_cast<size_t>(r) * k + i] += gv * wrow[static_cast<size_t>(i) * n + j];
          }
      }
      if (T* gw = t.grad_ptr(w)) {  // dW += A^T @ dC
        const T* A = t.val(a).data();
        for (int r = 0; r < rows; ++r)
          for (int i = 0; i < k; ++i) {
            const T av = A[static_cast<size_t>(r) * k + i];
            if (av == T(0)) continue;
            for (int j = 0; j < n; ++j)
              gw[static_cast<size_t>(i) * n + j] += av * g[static_cast<size_t>(r) * n + j];
          }
      }
    });
  }

  // Batched product over leading dim B: C_b = A_b @ B_b (trans_b = false,
  // shapes [B,m,k]x[B,k,n]) or C_b = A_b @ B_b^T (trans_b = true, shapes
  // [B,m,k]x[B,n,k]).
  Ref bmm(Ref a, Ref b, bool trans_b) {
    const auto& da = dims(a);
    const auto& db = dims(b);
    if (da.size() != 3 || db.size() != 3 || da[0] != db[0])
      throw std::invalid_argument("bmm: need [B,m,k] inputs");
    const int B = da[0], m = da[1], k = da[2];
    const int n = trans_b ? db[1] : db[2];
    if ((trans_b ? db[2] : db[1]) != k) throw std::invalid_argument("bmm: inner dims disagree");
    std::vector<T> out(static_cast<size_t>(B) * m * n, T(0));
    const T* A = val(a).data();
    const T* Bv = val(b).data();
    for (int bb = 0; bb < B; ++bb) {
      const T* Ab = A + static_cast<size_t>(bb) * m * k;
      const T* Bb = Bv + static_cast<size_t>(bb) * (trans_b ? n * k : k * n);
      T* Cb = out.data() + static_cast<size_t>(bb) * m * n;
      if (!trans_b) {
        matmul_nn(Ab, Bb, Cb, m, k, n);
      } else {
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            T acc = T(0);
            for (int kk = 0; kk < k; ++kk)
              acc += Ab[static_cast<size_t>(i) * k + kk] * Bb[static_cast<size_t>(j) * k + kk];
            Cb[static_cast<size_t>(i) * n + j] = acc;
          }
      }
    }
    return push({B, m, n}, std::move(out), [a, b, trans_b, B, m, k, n](Tape& t) {
      Ref self = t.current_;
      const T* g = t.node(self).grad.data();
      const T* A = t.val(a).data();
      const T* Bv = t.val(b).data();
      T* ga = t.grad_ptr(a);
      T* gb = t.grad_ptr(b);
      for (int bb = 0; bb < B; ++bb) {
        const T* Gb = g + static_cast<size_t>(bb) * m * n;
        const T* Ab = A + static_cast<size_t>(bb) * m * k;
        const T* Bb = Bv + static_cast<size_t>(bb) * (trans_b ? n * k : k * n);
        if (!trans_b) {
          // dA_b += G_b @ B_b^T ; dB_b += A_b^T @ G_b
          if (ga) {
            T* gab = ga + static_cast<size_t>(bb) * m * k;
            for (int i = 0; i < m; ++i)
              for (int j = 0; j < n; ++j) {
                const T gv = Gb[static_cast<size_t>(i) * n + j];
                if (gv == T(0)) continue;
                for (int kk = 0; kk < k; ++kk)
                  gab[static_cast<size_t>(i) * k + kk] += gv * Bb[static_cast<size_t>(kk) * n + j];
              }
          }
          if (gb) {
            T* gbb = gb + static_cast<size_t>(bb) * k * n;
            for (int i = 0; i < m; ++i)
              for (int kk = 0; kk < k; ++kk) {
                const T av = Ab[static_cast<size_t>(i) * k + kk];
                if (av == T(0)) continue;
                for (int j = 0; j < n; ++j)
                  gbb[static_cast<size_t>(kk) * n + j] += av * Gb[static_cast<size_t>(i) * n + j];
              }
          }
        } else {
          // C_b = A_b @ B_b^T with B_b stored [n, k]:
          // dA_b += G_b @ B_b ; dB_b += G_b^T @ A_b
          if (ga) {
            T* gab = ga + static_cast<size_t>(bb) * m * k;
            for (int i = 0; i < m; ++i)
              for (int j = 0; j < n; ++j) {
                const T gv = Gb[static_cast<size_t>(i) * n + j];
                if (gv == T(0)) continue;
                for (int kk = 0; kk < k; ++kk)
                  gab[static_cast<size_t>(i) * k + kk] += gv * Bb[static_cast<size_t>(j) * k + kk];
              }
          }
          if (gb) {
            T* gbb = gb + static_cast<size_t>(bb) * n * k;
            for (int i = 0; i < m; ++i)
              for (int j = 0; j < n; ++j) {
                const T gv = Gb[static_cast<size_t>(i) * n + j];
                if (gv == T(0)) continue;
                for (int kk = 0; kk < k; ++kk)
                  gbb[static_cast<size_t>(j) * k + kk] += gv * Ab[static_cast<size_t>(i) * k + kk];
              }
          }
        }
      }
    });
  }

  // y = x + b with b broadcast over all rows (b has length = last dim of x).
  Ref add_bias(Ref x, Ref b) {
    const auto& dx = dims(x);
    const int n = dx.back();
    if (dims(b) != std::vector<int>{n}) throw std::invalid_argument("add_bias: bias shape");
    std::vector<T> out = val(x);
    const T* bv = val(b).data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i % static_cast<size_t>(n)];
    return push(std::vector<int>(dx), std::move(out), [x, b, n](Tape& t) {
      Ref self = t.current_;
      const auto& g = t.node(self).grad;
      if (T* gx = t.grad_ptr(x))
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      if (T* gb = t.grad_ptr(b))
        for (size_t i = 0; i < g.size(); ++i) gb[i % static_cast<size_t>(n)] += g[i];
    });
  }

  // y = x + p where p is a [S, D] block broadcast across the batch; x is
  // [B, S, D]. Used for positional embeddings.
  Ref add_broadcast_block(Ref x, Ref p) {
    const auto& dx = dims(x);
    if (dx.size() != 3) throw std::invalid_argument("add_broadcast_block: x must be [B,S,D]");
    const size_t block = numel(dims(p));
    if (block != static_cast<size_t>(dx[1]) * dx[2])
      throw std::invalid_argument("add_broadcast_block: block shape mismatch");
    std::vector<T> out = val(x);
    const T* pv = val(p).data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += pv[i % block];
    return push(std::vector<int>(dx), std::move(out), [x, p, block](Tape& t) {
      Ref self = t.current_;
      const auto& g = t.node(self).grad;
      if (T* gx = t.grad_ptr(x))
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      if (T* gp = t.grad_ptr(p))
        for (size_t i = 0; i < g.size(); ++i) gp[i % block] += g[i];
    });
  }

  Ref add(Ref x, Ref y) {
    if (dims(x) != dims(y)) throw std::invalid_argument("add: shape mismatch");
    std::vector<T> out = val(x);
    const T* yv = val(y).data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += yv[i];
    return push(std::vector<int>(dims(x)), std::move(out), [x, y](Tape& t) {
      Ref self = t.current_;
      const auto& g = t.node(self).grad;
      if (T* gx = t.grad_ptr(x))
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      if (T* gy = t.grad_ptr(y))
        for (size_t i = 0; i < g.size(); ++i) gy[i] += g[i];
    });
  }

  Ref mul(Ref x, Ref y) {  // elementwise
    if (dims(x) != dims(y)) throw std::invalid_argument("mul: shape mismatch");
    std::vector<T> out = val(x);
    const T* yv = val(y).data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= yv[i];
    return push(std::vector<int>(dims(x)), std::move(out), [x, y](Tape& t) {
      Ref self = t.current_;
      const auto& g = t.node(self).grad;
      const T* xv = t.val(x).data();
      const T* yv = t.val(y).data();
      if (T* gx = t.grad_ptr(x))
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i];
      if (T* gy = t.grad_ptr(y))
        for (size_t i = 0; i < g.size(); ++i) gy[i] += g[i] * xv[i];
    });
  }

  Ref scale(Ref x, T c) {
    std::vector<T> out = val(x);
    for (auto& v : out) v *= c;
    return push(std::vector<int>(dims(x)), std::move(out), [x, c](Tape& t) {
      Ref self = t.current_;
      const auto& g = t.node(self).grad;
      if (T* gx = t.grad_ptr(x))
        for (size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
    });
  }

  Ref exp(Ref x) {
    std::vector<T> out = val(x);
    for (auto& v : out) v = std::exp(v);
    return push(std::vector<int>(dims(x)), std::move(out), [x](Tape& t) {
      Ref self = t.current_;
      const auto& g = t.node(self).grad;
      const T* y = t.node(self).val.data();
      if (T* gx = t.grad_ptr(x))
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
    });
  }

  // [B, A, C] -> [B, C, A]
  Ref transpose_12(Ref x) {
    const auto& dx = dims(x);
    if (dx.size() != 3) throw std::invalid_argument("transpose_12: x must be 3D");
    const int B = dx[0], A = dx[1], C = dx[2];
    std::vector<T> out(numel(dx));
    const T* xv = val(x).data();
    for (int b = 0; b < B; ++b)
      for (int a = 0; a < A; ++a)
        for (int c = 0; c < C; ++c)
          out[(static_cast<size_t>(b) * C + c) * A + a] =
              xv[(static_cast<size_t>(b) * A + a) * C + c];
    return push({B, C, A}, std::move(out), [x, B, A, C](Tape& t) {
      Ref self = t.current_;
      const auto& g = t.node(self).grad;
      if (T* gx = t.grad_ptr(x))
        for (int b = 0; b < B; ++b)
          for (int a = 0; a < A; ++a)
            for (int c = 0; c < C; ++c)
              gx[(static_cast<size_t>(b) * A + a) * C + c] +=
                  g[(static_cast<size_t>(b) * C + c) * A + a];
    });
  }

  Ref relu(Ref x) {
    std::vector<T> out = val(x);
    for (auto& v : out) v = v > T(0) ? v : T(0);
    return push(std::vector<int>(dims(x)), std::move(out), [x](Tape& t) {
      Ref self = t.current_;
      const auto& g = t.node(self).grad;
      const T* xv = t.val(x).data();
      if (T* gx = t.grad_ptr(x))
        for (size_t i = 0; i < g.size(); ++i) gx[i] += xv[i] > T(0) ? g[i] : T(0);
    });
  }

  // Row-wise layer norm over the last dim with learned gain/bias.
  Ref layer_norm(Ref x, Ref gain, Ref bias, T eps = T(1e-5)) {
    const auto& dx = dims(x);
    const int D = dx.back();
    if (dims(gain) != std::vector<int>{D} || dims(bias) != std::vector<int>{D})
      throw std::invalid_argument("layer_norm: gain/bias shape");
    const size_t rows = numel(dx) / static_cast<size_t>(D);
    std::vector<T> out(numel(dx));
    std::vector<T> inv_sigma(rows), xhat(numel(dx));
    const T* xv = val(x).data();
    const T* gv = val(gain).data();
    const T* bv = val(bias).data();
    for (size_t r = 0; r < rows; ++r) {
      const T* row = xv + r * D;
      T mean = T(0);
      for (int d = 0; d < D; ++d) mean += row[d];
      mean /= T(D);
      T var = T(0);
      for (int d = 0; d < D; ++d) var += (row[d] - mean) * (row[d] - mean);
      var /= T(D);
      const T is = T(1) / std::sqrt(var + eps);
      inv_sigma[r] = is;
      for (int d = 0; d < D; ++d) {
        const T xh = (row[d] - mean) * is;
        xhat[r * D + d] = xh;
        out[r * D + d] = gv[d] * xh + bv[d];
      }
    }
    auto is_keep = std::make_shared<std::vector<T>>(std::move(inv_sigma));
    auto xh_keep = std::make_shared<std::vector<T>>(std::move(xhat));
    return push(std::vector<int>(dx), std::move(out),
                [x, gain, bias, D, rows, is_keep, xh_keep](Tape& t) {
                  Ref self = t.current_;
                  const auto& g = t.node(self).grad;
                  const T* gv = t.val(gain).data();
                  T* gx = t.grad_ptr(x);
                  T* gg = t.grad_ptr(gain);
                  T* gb = t.grad_ptr(bias);
                  for (size_t r = 0; r < rows; ++r) {
                    const T* grow = g.data() + r * D;
                    const T* xh = xh_keep->data() + r * D;
                    if (gg)
                      for (int d = 0; d < D; ++d) gg[d] += grow[d] * xh[d];
                    if (gb)
                      for (int d = 0; d < D; ++d) gb[d] += grow[d];
                    if (gx) {
                      // dx = (1/sigma) * (dxh - mean(dxh) - xh * mean(dxh*xh))
                      T m1 = T(0), m2 = T(0);
                      for (int d = 0; d < D; ++d) {
                        const T dxh = grow[d] * gv[d];
                        m1 += dxh;
                        m2 += dxh * xh[d];
                      }
                      m1 /= T(D);
                      m2 /= T(D);
                      const T is = (*is_keep)[r];
                      for (int d = 0; d < D; ++d) {
                        const T dxh = grow[d] * gv[d];
                        gx[r * D + d] += is * (dxh - m1 - xh[d] * m2);
                      }
                    }
                  }
                });
  }

  // Numerically stable softmax over the last dim.
  Ref softmax_rows(Ref x) {
    const auto& dx = dims(x);
    const int n = dx.back();
    const size_t rows = numel(dx) / static_cast<size_t>(n);
    std::vector<T> out(numel(dx));
    const T* xv = val(x).data();
    for (size_t r = 0; r < rows; ++r) {
      const T* row = xv + r * n;
      T mx = row[0];
      for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      T sum = T(0);
      for (int j = 0; j < n; ++j) {
        const T e = std::exp(row[j] - mx);
        out[r * n + j] = e;
        sum += e;
      }
      for (int j = 0; j < n; ++j) out[r * n + j] /= sum;
    }
    return push(std::vector<int>(dx), std::move(out), [x, n, rows](Tape& t) {
      Ref self = t.current_;
      const auto& g = t.node(self).grad;
      const T* y = t.node(self).val.data();
      if (T* gx = t.grad_ptr(x)) {
        for (size_t r = 0; r < rows; ++r) {
          const T* yr = y + r * n;
          const T* gr = g.data() + r * n;
          T dot = T(0);
          for (int j = 0; j < n; ++j) dot += gr[j] * yr[j];
          for (int j = 0; j < n; ++j) gx[r * n + j] += yr[j] * (gr[j] - dot);
        }
      }
    });
  }

  // 3x3 convolution, stride 2, pad 1: x[B,Cin,H,W], w[Cout,Cin,3,3], b[Cout]
  // -> y[B,Cout,ceil(H/2),ceil(W/2)].
  Ref conv3x3s2(Ref x, Ref w, Ref b) {
    const auto& dx = dims(x);
    const auto& dw = dims(w);
    if (dx.size() != 4 || dw.size() != 4 || dw[2] != 3 || dw[3] != 3 || dw[1] != dx[1])
      throw std::invalid_argument("conv3x3s2: bad shapes");
    const int B = dx[0], Cin = dx[1], H = dx[2], W = dx[3];
    const int Cout = dw[0];
    if (dims(b) != std::vector<int>{Cout}) throw std::invalid_argument("conv3x3s2: bias shape");
    const int OH = (H + 1) / 2, OW = (W + 1) / 2;
    std::vector<T> out(static_cast<size_t>(B) * Cout * OH * OW);
    detail::conv3x3s2_plain(val(x).data(), val(w).data(), val(b).data(), out.data(), B, Cin, H,
                            W, Cout, OH, OW);
    return push({B, Cout, OH, OW}, std::move(out),
                [x, w, b, B, Cin, H, W, Cout, OH, OW](Tape& t) {
                  Ref self = t.current_;
                  const T* g = t.node(self).grad.data();
                  const T* xv = t.val(x).data();
                  const T* wv = t.val(w).data();
                  T* gx = t.grad_ptr(x);
                  T* gw = t.grad_ptr(w);
                  T* gb = t.grad_ptr(b);
                  for (int bb = 0; bb < B; ++bb)
                    for (int co = 0; co < Cout; ++co)
                      for (int oy = 0; oy < OH; ++oy)
                        for (int ox = 0; ox < OW; ++ox) {
                          const T gv = g[((static_cast<size_t>(bb) * Cout + co) * OH + oy) * OW +
                                         ox];
                          if (gv == T(0)) continue;
                          if (gb) gb[co] += gv;
                          for (int ci = 0; ci < Cin; ++ci)
                            for (int ky = 0; ky < 3; ++ky) {
                              const int iy = oy * 2 + ky - 1;
                              if (iy < 0 || iy >= H) continue;
                              for (int kx = 0; kx < 3; ++kx) {
                                const int ix = ox * 2 + kx - 1;
                                if (ix < 0 || ix >= W) continue;
                                const size_t xi =
                                    ((static_cast<size_t>(bb) * Cin + ci) * H + iy) * W + ix;
                                const size_t wi =
                                    ((static_cast<size_t>(co) * Cin + ci) * 3 + ky) * 3 + kx;
                                if (gw) gw[wi] += gv * xv[xi];
                                if (gx) gx[xi] += gv * wv[wi];
                              }
                            }
                        }
                });
  }

  // FiLM: y[b,c,i] = x[b,c,i] * (1 + s[b,c]) + t[b,c] over x[B,C,HW].
  Ref film(Ref x, Ref s, Ref tshift) {
    const auto& dx = dims(x);
    if (dx.size() != 3) throw std::invalid_argument("film: x must be [B,C,HW]");
    const int B = dx[0], C = dx[1], HW = dx[2];
    if (dims(s) != std::vector<int>{B, C} || dims(tshift) != std::vector<int>{B, C})
      throw std::invalid_argument("film: modulation shape");
    std::vector<T> out(numel(dx));
    const T* xv = val(x).data();
    const T* sv = val(s).data();
    const T* tv = val(tshift).data();
    for (int bc = 0; bc < B * C; ++bc)
      for (int i = 0; i < HW; ++i)
        out[static_cast<size_t>(bc) * HW + i] =
            xv[static_cast<size_t>(bc) * HW + i] * (T(1) + sv[bc]) + tv[bc];
    return push(std::vector<int>(dx), std::move(out), [x, s, tshift, B, C, HW](Tape& t) {
      Ref self = t.current_;
      const auto& g = t.node(self).grad;
      const T* xv = t.val(x).data();
      const T* sv = t.val(s).data();
      T* gx = t.grad_ptr(x);
      T* gs = t.grad_ptr(s);
      T* gt = t.grad_ptr(tshift);
      for (int bc = 0; bc < B * C; ++bc) {
        T acc_s = T(0), acc_t = T(0);
        for (int i = 0; i < HW; ++i) {
          const size_t at = static_cast<size_t>(bc) * HW + i;
          if (gx) gx[at] += g[at] * (T(1) + sv[bc]);
          acc_s += g[at] * xv[at];
          acc_t += g[at];
        }
        if (gs) gs[bc] += acc_s;
        if (gt) gt[bc] += acc_t;
      }
    });
  }

  // y[b,l,:] = table[ids[b*L+l], :]
  Ref embedding(Ref table, const std::vector<int>& ids, int B, int L) {
    const auto& dt = dims(table);
    if (dt.size() != 2) throw std::invalid_argument("embedding: table must be 2D");
    const int V = dt[0], E = dt[1];
    if (static_cast<int>(ids.size()) != B * L)
      throw std::invalid_argument("embedding: ids size mismatch");
    for (int id : ids)
      if (id < 0 || id >= V) throw std::invalid_argument("embedding: token id out of range");
    std::vector<T> out(static_cast<size_t>(B) * L * E);
    const T* tv = val(table).data();
    for (int i = 0; i < B * L; ++i)
      std::copy_n(tv + static_cast<size_t>(ids[static_cast<size_t>(i)]) * E, E,
                  out.begin() + static_cast<size_t>(i) * E);
    auto ids_keep = std::make_shared<std::vector<int>>(ids);
    return push({B, L, E}, std::move(out), [table, ids_keep, B, L, E](Tape& t) {
      Ref self = t.current_;
      const auto& g = t.node(self).grad;
      if (T* gt = t.grad_ptr(table)) {
        for (int i = 0; i < B * L; ++i) {
          T* dst = gt + static_cast<size_t>((*ids_keep)[static_cast<size_t>(i)]) * E;
          const T* src = g.data() + static_cast<size_t>(i) * E;
          for (int e = 0; e < E; ++e) dst[e] += src[e];
        }
      }
    });
  }

  // Mean over the token axis: [B, L, E] -> [B, E].
  Ref mean_tokens(Ref x) {
    const auto& dx = dims(x);
    if (dx.size() != 3) throw std::invalid_argument("mean_tokens: x must be [B,L,E]");
    const int B = dx[0], L = dx[1], E = dx[2];
    std::vector<T> out(static_cast<size_t>(B) * E, T(0));
    const T* xv = val(x).data();
    for (int b = 0; b < B; ++b)
      for (int l = 0; l < L; ++l)
        for (int e = 0; e < E; ++e)
          out[static_cast<size_t>(b) * E + e] +=
              xv[(static_cast<size_t>(b) * L + l) * E + e] / T(L);
    return push({B, E}, std::move(out), [x, B, L, E](Tape& t) {
      Ref self = t.current_;
      const auto& g = t.node(self).grad;
      if (T* gx = t.grad_ptr(x))
        for (int b = 0; b < B; ++b)
          for (int l = 0; l < L; ++l)
            for (int e = 0; e < E; ++e)
              gx[(static_cast<size_t>(b) * L + l) * E + e] +=
                  g[static_cast<size_t>(b) * E + e] / T(L);
    });
  }

  // Concatenate token groups along the sequence axis: each entry is
  // ([B, S_i, D]) and the result is [B, sum S_i, D].
  Ref concat_tokens(const std::vector<Ref>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_tokens: empty");
    const int B = dims(parts[0])[0];
    const int D = dims(parts[0])[2];
    int S = 0;
    for (Ref p : parts) {
      const auto& dp = dims(p);
      if (dp.size() != 3 || dp[0] != B || dp[2] != D)
        throw std::invalid_argument("concat_tokens: incompatible part");
      S += dp[1];
    }
    std::vector<T> out(static_cast<size_t>(B) * S * D);
    int offset = 0;
    for (Ref p : parts) {
      const int Sp = dims(p)[1];
      const T* pv = val(p).data();
      for (int b = 0; b < B; ++b)
        std::copy_n(pv + static_cast<size_t>(b) * Sp * D, static_cast<size_t>(Sp) * D,
                    out.begin() + (static_cast<size_t>(b) * S + offset) * D);
      offset += Sp;
    }
    auto parts_keep = std::make_shared<std::vector<Ref>>(parts);
    return push({B, S, D}, std::move(out), [parts_keep, B, S, D](Tape& t) {
      Ref self = t.current_;
      const auto& g = t.node(self).grad;
      int offset = 0;
      for (Ref p : *parts_keep) {
        const int Sp = t.dims(p)[1];
        if (T* gp = t.grad_ptr(p)) {
          for (int b = 0; b < B; ++b) {
            const T* src = g.data() + (static_cast<size_t>(b) * S + offset) * D;
            T* dst = gp + static_cast<size_t>(b) * Sp * D;
            for (size_t i = 0; i < static_cast<size_t>(Sp) * D; ++i) dst[i] += src[i];
          }
        }
        offset += Sp;
      }
    });
  }

  // Pick one token per batch element: x[B, S, D], idx[b] in [0, S) -> [B, D].
  Ref select_token(Ref x, const std::vector<int>& idx) {
    const auto& dx = dims(x);
    if (dx.size() != 3) throw std::invalid_argument("select_token: x must be [B,S,D]");
    const int B = dx[0], S = dx[1], D = dx[2];
    if (static_cast<int>(idx.size()) != B) throw std::invalid_argument("select_token: idx size");
    for (int i : idx)
      if (i < 0 || i >= S) throw std::out_of_range("select_token: index out of range");
    std::vector<T> out(static_cast<size_t>(B) * D);
    const T* xv = val(x).data();
    for (int b = 0; b < B; ++b)
      std::copy_n(xv + (static_cast<size_t>(b) * S + idx[static_cast<size_t>(b)]) * D, D,
                  out.begin() + static_cast<size_t>(b) * D);
    auto idx_keep = std::make_shared<std::vector<int>>(idx);
    return push({B, D}, std::move(out), [x, idx_keep, B, S, D](Tape& t) {
      Ref self = t.current_;
      const auto& g = t.node(self).grad;
      if (T* gx = t.grad_ptr(x))
        for (int b = 0; b < B; ++b) {
          T* dst = gx + (static_cast<size_t>(b) * S + (*idx_keep)[static_cast<size_t>(b)]) * D;
          for (int d = 0; d < D; ++d) dst[d] += g[static_cast<size_t>(b) * D + d];
        }
    });
  }

  // [B, S, H*dh] -> [B*H, S, dh] (head-major) and its inverse.
  Ref split_heads(Ref x, int heads) {
    const auto& dx = dims(x);
    if (dx.size() != 3 || dx[2] % heads != 0)
      throw std::invalid_argument("split_heads: dim not divisible by heads");
    const int B = dx[0], S = dx[1], dh = dx[2] / heads;
    std::vector<T> out(numel(dx));
    const T* xv = val(x).data();
    for (int b = 0; b < B; ++b)
      for (int s = 0; s < S; ++s)
        for (int h = 0; h < heads; ++h)
          std::copy_n(xv + ((static_cast<size_t>(b) * S + s) * heads + h) * dh, dh,
                      out.begin() + ((static_cast<size_t>(b) * heads + h) * S + s) * dh);
    return push({B * heads, S, dh}, std::move(out), [x, heads, B, S, dh](Tape& t) {
      Ref self = t.current_;
      const auto& g = t.node(self).grad;
      if (T* gx = t.grad_ptr(x))
        for (int b = 0; b < B; ++b)
          for (int s = 0; s < S; ++s)
            for (int h = 0; h < heads; ++h) {
              const T* src = g.data() + ((static_cast<size_t>(b) * heads + h) * S + s) * dh;
              T* dst = gx + ((static_cast<size_t>(b) * S + s) * heads + h) * dh;
              for (int d = 0; d < dh; ++d) dst[d] += src[d];
            }
    });
  }

  Ref merge_heads(Ref x, int heads) {
    const auto& dx = dims(x);
    if (dx.size() != 3 || dx[0] % heads != 0)
      throw std::invalid_argument("merge_heads: batch not divisible by heads");
    const int B = dx[0] / heads, S = dx[1], dh = dx[2];
    std::vector<T> out(numel(dx));
    const T* xv = val(x).data();
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < heads; ++h)
        for (int s = 0; s < S; ++s)
          std::copy_n(xv + ((static_cast<size_t>(b) * heads + h) * S + s) * dh, dh,
                      out.begin() + ((static_cast<size_t>(b) * S + s) * heads + h) * dh);
    return push({B, S, heads * dh}, std::move(out), [x, heads, B, S, dh](Tape& t) {
      Ref self = t.current_;
      const auto& g = t.node(self).grad;
      if (T* gx = t.grad_ptr(x))
        for (int b = 0; b < B; ++b)
          for (int h = 0; h < heads; ++h)
            for (int s = 0; s < S; ++s) {
              const T* src = g.data() + ((static_cast<size_t>(b) * S + s) * heads + h) * dh;
              T* dst = gx + ((static_cast<size_t>(b) * heads + h) * S + s) * dh;
              for (int d = 0; d < dh; ++d) dst[d] += src[d];
            }
    });
  }

  Ref reshape(Ref x, std::vector<int> new_dims) {
    if (numel(new_dims) != numel(dims(x))) throw std::invalid_argument("reshape: numel changed");
    std::vector<T> out = val(x);
    return push(std::move(new_dims), std::move(out), [x](Tape& t) {
      Ref self = t.current_;
      const auto& g = t.node(self).grad;
      if (T* gx = t.grad_ptr(x))
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }

  // Reassembles a grid of per-token patches into interleaved image rows:
  // x is [B, Gy*Gx, ph*pw*C] where token gy*Gx+gx holds its patch row-major,
  // the result is [B, (Gy*ph)*(Gx*pw)*C] in [H, W, C] pixel order. A pure
  // index permutation, so the gradient is the inverse permutation.
  Ref patch_to_image(Ref x, int Gy, int Gx, int ph, int pw, int C) {
    const auto& dx = dims(x);
    if (dx.size() != 3 || dx[1] != Gy * Gx || dx[2] != ph * pw * C)
      throw std::invalid_argument("patch_to_image: shape mismatch");
    const int B = dx[0];
    const int W = Gx * pw;
    const int run = pw * C;  // one patch row is contiguous in both layouts
    const size_t img = static_cast<size_t>(Gy) * ph * W * C;
    std::vector<T> out(static_cast<size_t>(B) * img);
    auto for_each_run = [=](auto&& fn) {
      for (int b = 0; b < B; ++b)
        for (int gy = 0; gy < Gy; ++gy)
          for (int gx = 0; gx < Gx; ++gx)
            for (int py = 0; py < ph; ++py) {
              const size_t src = ((static_cast<size_t>(b) * Gy * Gx + gy * Gx + gx) * ph + py) *
                                 run;
              const size_t dst = (static_cast<size_t>(b) * Gy * ph + gy * ph + py) * W * C +
                                 static_cast<size_t>(gx) * run;
              fn(src, dst);
            }
    };
    const T* xv = val(x).data();
    for_each_run([&](size_t src, size_t dst) {
      std::copy(xv + src, xv + src + run, out.data() + dst);
    });
    return push({B, static_cast<int>(img)}, std::move(out),
                [x, for_each_run, run](Tape& t) {
                  Ref self = t.current_;
                  const T* g = t.node(self).grad.data();
                  if (T* gx = t.grad_ptr(x))
                    for_each_run([&](size_t src, size_t dst) {
                      for (int i = 0; i < run; ++i) gx[src + i] += g[dst + i];
                    });
                });
  }

  // Inverted dropout with an externally supplied 0/1 keep mask.
  Ref dropout(Ref x, const std::vector<T>& keep_mask, T keep_prob) {
    if (keep_mask.size() != numel(dims(x))) throw std::invalid_argument("dropout: mask size");
    std::vector<T> out = val(x);
    const T inv = T(1) / keep_prob;
    for (size_t i = 0; i < out.size(); ++i) out[i] *= keep_mask[i] * inv;
    auto mask_keep = std::make_shared<std::vector<T>>(keep_mask);
    return push(std::vector<int>(dims(x)), std::move(out), [x, mask_keep, inv](Tape& t) {
      Ref self = t.current_;
      const auto& g = t.node(self).grad;
      if (T* gx = t.grad_ptr(x))
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask_keep)[i] * inv;
    });
  }

  // Mean absolute error over rows whose mask is 1; pred/target [B, k, dim],
  // mask [B, k].
  Ref masked_l1(Ref pred, Ref target, Ref mask) {
    const auto& dp = dims(pred);
    if (dp.size() != 3 || dims(target) != dp) throw std::invalid_argument("masked_l1: shapes");
    const int B = dp[0], K = dp[1], D = dp[2];
    if (dims(mask) != std::vector<int>{B, K}) throw std::invalid_argument("masked_l1: mask shape");
    const T* pv = val(pred).data();
    const T* tv = val(target).data();
    const T* mv = val(mask).data();
    T msum = T(0);
    for (int i = 0; i < B * K; ++i) msum += mv[i];
    if (msum == T(0)) throw std::invalid_argument("masked_l1: all-zero mask");
    const T denom = msum * T(D);
    T acc = T(0);
    for (int i = 0; i < B * K; ++i) {
      if (mv[i] == T(0)) continue;
      for (int d = 0; d < D; ++d)
        acc += std::abs(pv[static_cast<size_t>(i) * D + d] - tv[static_cast<size_t>(i) * D + d]);
    }
    std::vector<T> out{acc / denom};
    return push({1}, std::move(out), [pred, target, mask, B, K, D, denom](Tape& t) {
      Ref self = t.current_;
      const T g = t.node(self).grad[0];
      const T* pv = t.val(pred).data();
      const T* tv = t.val(target).data();
      const T* mv = t.val(mask).data();
      if (T* gp = t.grad_ptr(pred)) {
        for (int i = 0; i < B * K; ++i) {
          if (mv[i] == T(0)) continue;
          for (int d = 0; d < D; ++d) {
            const size_t at = static_cast<size_t>(i) * D + d;
            const T diff = pv[at] - tv[at];
            const T s = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
            gp[at] += g * s / denom;
          }
        }
      }
    });
  }

  // Mean elementwise Huber between two same-shape tensors.
  Ref huber_mean(Ref pred, Ref target, T delta) {
    if (dims(pred) != dims(target)) throw std::invalid_argument("huber_mean: shapes");
    const T* pv = val(pred).data();
    const T* tv = val(target).data();
    const size_t n = numel(dims(pred));
    T acc = T(0);
    for (size_t i = 0; i < n; ++i) {
      const T d = pv[i] - tv[i];
      const T a = std::abs(d);
      acc += a <= delta ? d * d / T(2) : delta * (a - delta / T(2));
    }
    std::vector<T> out{acc / T(n)};
    return push({1}, std::move(out), [pred, target, delta, n](Tape& t) {
      Ref self = t.current_;
      const T g = t.node(self).grad[0];
      const T* pv = t.val(pred).data();
      const T* tv = t.val(target).data();
      if (T* gp = t.grad_ptr(pred)) {
        for (size_t i = 0; i < n; ++i) {
          const T d = pv[i] - tv[i];
          const T dd = std::abs(d) <= delta ? d : (d > T(0) ? delta : -delta);
          gp[i] += g * dd / T(n);
        }
      }
    });
  }

  // Mean squared error between two same-shape tensors.
  Ref mse_mean(Ref pred, Ref target) {
    if (dims(pred) != dims(target)) throw std::invalid_argument("mse_mean: shapes");
    const T* pv = val(pred).data();
    const T* tv = val(target).data();
    const size_t n = numel(dims(pred));
    T acc = T(0);
    for (size_t i = 0; i < n; ++i) {
      const T d = pv[i] - tv[i];
      acc += d * d;
    }
    std::vector<T> out{acc / T(n)};
    return push({1}, std::move(out), [pred, target, n](Tape& t) {
      Ref self = t.current_;
      const T g = t.node(self).grad[0];
      const T* pv = t.val(pred).data();
      const T* tv = t.val(target).data();
      if (T* gp = t.grad_ptr(pred)) {
        for (size_t i = 0; i < n; ++i) gp[i] += g * T(2) * (pv[i] - tv[i]) / T(n);
      }
    });
  }

  // KL(N(mu, exp(logvar)) || N(0, I)) summed over dims, averaged over batch.
  Ref kl_gauss(Ref mu, Ref logvar) {
    const auto& dm = dims(mu);
    if (dm.size() != 2 || dims(logvar) != dm) throw std::invalid_argument("kl_gauss: shapes");
    const int B = dm[0], Z = dm[1];
    const T* m = val(mu).data();
    const T* lv = val(logvar).data();
    T acc = T(0);
    for (size_t i = 0; i < static_cast<size_t>(B) * Z; ++i)
      acc += T(-0.5) * (T(1) + lv[i] - m[i] * m[i] - std::exp(lv[i]));
    std::vector<T> out{acc / T(B)};
    return push({1}, std::move(out), [mu, logvar, B, Z](Tape& t) {
      Ref self = t.current_;
      const T g = t.node(self).grad[0];
      const T* m = t.val(mu).data();
      const T* lv = t.val(logvar).data();
      if (T* gm = t.grad_ptr(mu))
        for (size_t i = 0; i < static_cast<size_t>(B) * Z; ++i) gm[i] += g * m[i] / T(B);
      if (T* glv = t.grad_ptr(logvar))
        for (size_t i = 0; i < static_cast<size_t>(B) * Z; ++i)
          glv[i] += g * T(-0.5) * (T(1) - std::exp(lv[i])) / T(B);
    });
  }

  // total = sum_i coeff_i * scalar_i
  Ref lincomb(const std::vector<Ref>& scalars, const std::vector<T>& coeffs) {
    if (scalars.size() != coeffs.size() || scalars.empty())
      throw std::invalid_argument("lincomb: size mismatch");
    T acc = T(0);
    for (size_t i = 0; i < scalars.size(); ++i) {
      if (numel(dims(scalars[i])) != 1) throw std::invalid_argument("lincomb: non-scalar input");
      acc += coeffs[i] * val(scalars[i])[0];
    }
    auto refs_keep = std::make_shared<std::vector<Ref>>(scalars);
    auto coeff_keep = std::make_shared<std::vector<T>>(coeffs);
    return push({1}, {acc}, [refs_keep, coeff_keep](Tape& t) {
      Ref self = t.current_;
      const T g = t.node(self).grad[0];
      for (size_t i = 0; i < refs_keep->size(); ++i)
        if (T* gi = t.grad_ptr((*refs_keep)[i])) gi[0] += g * (*coeff_keep)[i];
    });
  }

  // Seeds d(loss)/d(loss) = 1 and runs the reverse sweep. Parameter leaves
  // flush their gradient into their external sink at the end.
  void backward(Ref loss) {
    if (numel(dims(loss)) != 1) throw std::invalid_argument("backward: loss must be scalar");
    ensure_grad(loss)[0] = T(1);
    for (int i = loss; i >= 0; --i) {
      Node& nd = nodes_[static_cast<size_t>(i)];
      if (nd.grad.empty()) continue;  // never touched: contributes nothing
      current_ = i;
      if (nd.backward) nd.backward(*this);
      if (nd.grad_sink) {
        for (size_t j = 0; j < nd.grad.size(); ++j) (*nd.grad_sink)[j] += nd.grad[j];
      }
    }
  }

  // Gradient buffer of node r, allocated on first use; null for constants.
  T* grad_ptr(Ref r) {
    Node& nd = node(r);
    if (!nd.backward && !nd.grad_sink) return nullptr;  // constant leaf
    return ensure_grad(r).data();
  }

 private:
  std::vector<T>& ensure_grad(Ref r) {
    Node& nd = node(r);
    if (nd.grad.empty()) nd.grad.assign(nd.val.size(), T(0));
    return nd.grad;
  }

  static void check_shape(const std::vector<T>& v, const std::vector<int>& dims,
                          const char* who) {
    if (v.size() != numel(dims))
      throw std::invalid_argument(std::string(who) + ": value size does not match dims");
  }

  Ref push(std::vector<int> dims, std::vector<T> val, std::function<void(Tape&)> backward,
           std::vector<T>* grad_sink = nullptr) {
    Node nd;
    nd.dims = std::move(dims);
    nd.val = std::move(val);
    nd.backward = std::move(backward);
    nd.grad_sink = grad_sink;
    nodes_.push_back(std::move(nd));
    return static_cast<Ref>(nodes_.size() - 1);
  }

  static void matmul_nn(const T* A, const T* W, T* C, int rows, int k, int n) {
    std::fill(C, C + static_cast<size_t>(rows) * n, T(0));
    for (int r = 0; r < rows; ++r) {
      const T* arow = A + static_cast<size_t>(r) * k;
      T* crow = C + static_cast<size_t>(r) * n;
      for (int i = 0; i < k; ++i) {
        const T a = arow[i];
        if (a == T(0)) continue;
        const T* wrow = W + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) crow[j] += a * wrow[j];
      }
    }
  }

  std::vector<Node> nodes_;
  Ref current_ = -1;  // node whose backward is running
};

}  // namespace foam::nets
