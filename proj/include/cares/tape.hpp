#pragma once

#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cares/tensor.hpp"

namespace cares::ad {

template <typename Real>
class Tape;

// Handle to a node on a tape.
template <typename Real>
struct Var {
  Tape<Real>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<Real>& value() const { return tape->value(*this); }
  long rows() const { return value().rows; }
  long cols() const { return value().cols; }
};

// Reverse-mode tape over dense matrices. Forward results are computed
// eagerly; each primitive records a closure that propagates adjoints.
// backward() consumes the recorded program: it may run only once, after
// which the op list is cleared and gradients stay readable.
template <typename Real>
class Tape {
 public:
  using V = Var<Real>;

  // When set, every primitive traps non-finite outputs and zero rows in
  // l2_normalize_rows. Tests run with checks on; training runs without.
  bool check_finite = false;
  bool strict = false;

  // Trainable leaf backed by external storage (not copied). Registering
  // the same tensor twice returns the same node.
  V param(Tensor<Real>& storage) {
    auto it = params_.find(&storage);
    if (it != params_.end()) return V{this, it->second};
    const int id = add_node(Node{Tensor<Real>{}, &storage, {}, true});
    params_.emplace(&storage, id);
    return V{this, id};
  }

  // Non-trainable leaf, owned by the tape.
  V constant(Tensor<Real> value) {
    return V{this, add_node(Node{std::move(value), nullptr, {}, false})};
  }

  V constant_scalar(Real v) { return constant(Tensor<Real>::scalar(v)); }

  const Tensor<Real>& value(V v) const {
    const Node& n = node(v);
    return n.external ? *n.external : n.owned;
  }

  // Valid after backward(); zero for nodes the loss does not reach.
  const Tensor<Real>& grad(V v) const {
    CARES_CHECK_MSG(consumed_, "grad read before backward");
    return node(v).grad;
  }

  // Gradient of a registered parameter tensor, or nullptr if it never
  // entered this tape.
  const Tensor<Real>* grad_of(const Tensor<Real>& storage) const {
    auto it = params_.find(&storage);
    if (it == params_.end()) return nullptr;
    return &nodes_[static_cast<size_t>(it->second)].grad;
  }

  // ---- primitives -------------------------------------------------------

  V matmul(V a, V b, bool transpose_b = false) {
    const auto& A = value(a);
    const auto& B = value(b);
    const long inner = transpose_b ? B.cols : B.rows;
    require(A.cols == inner, "matmul", A, B);
    const long n = transpose_b ? B.rows : B.cols;
    Tensor<Real> out(A.rows, n);
    if (transpose_b) {
      for (long i = 0; i < A.rows; ++i)
        for (long j = 0; j < n; ++j) {
          Real acc = 0;
          const Real* ar = A.row_ptr(i);
          const Real* br = B.row_ptr(j);
          for (long k = 0; k < A.cols; ++k) acc += ar[k] * br[k];
          out.at(i, j) = acc;
        }
    } else {
      for (long i = 0; i < A.rows; ++i) {
        Real* orow = out.row_ptr(i);
        const Real* ar = A.row_ptr(i);
        for (long k = 0; k < A.cols; ++k) {
          const Real av = ar[k];
          if (av == Real(0)) continue;
          const Real* br = B.row_ptr(k);
          for (long j = 0; j < n; ++j) orow[j] += av * br[j];
        }
      }
    }
    V o = emit("matmul", std::move(out), {a, b});
    if (needs(a) || needs(b))
      record([this, a, b, o, transpose_b] {
        const auto& A = value(a);
        const auto& B = value(b);
        const auto& G = node(o).grad;
        if (needs(a)) {
          auto& dA = node(a).grad;
          if (transpose_b) {
            // dA += G * B
            for (long i = 0; i < A.rows; ++i)
              for (long k = 0; k < G.cols; ++k) {
                const Real g = G.at(i, k);
                if (g == Real(0)) continue;
                const Real* br = B.row_ptr(k);
                Real* dar = dA.row_ptr(i);
                for (long j = 0; j < A.cols; ++j) dar[j] += g * br[j];
              }
          } else {
            // dA += G * B^T
            for (long i = 0; i < A.rows; ++i)
              for (long j = 0; j < A.cols; ++j) {
                Real acc = 0;
                const Real* gr = G.row_ptr(i);
                const Real* br = B.row_ptr(j);
                for (long k = 0; k < G.cols; ++k) acc += gr[k] * br[k];
                dA.at(i, j) += acc;
              }
          }
        }
        if (needs(b)) {
          auto& dB = node(b).grad;
          if (transpose_b) {
            // dB += G^T * A
            for (long i = 0; i < A.rows; ++i) {
              const Real* gr = G.row_ptr(i);
              const Real* ar = A.row_ptr(i);
              for (long k = 0; k < G.cols; ++k) {
                const Real g = gr[k];
                if (g == Real(0)) continue;
                Real* dbr = dB.row_ptr(k);
                for (long j = 0; j < A.cols; ++j) dbr[j] += g * ar[j];
              }
            }
          } else {
            // dB += A^T * G
            for (long i = 0; i < A.rows; ++i) {
              const Real* ar = A.row_ptr(i);
              const Real* gr = G.row_ptr(i);
              for (long k = 0; k < A.cols; ++k) {
                const Real av = ar[k];
                if (av == Real(0)) continue;
                Real* dbr = dB.row_ptr(k);
                for (long j = 0; j < G.cols; ++j) dbr[j] += av * gr[j];
              }
            }
          }
        }
      });
    return o;
  }

  V add(V a, V b) {
    const auto& A = value(a);
    const auto& B = value(b);
    require(A.same_shape(B), "add", A, B);
    Tensor<Real> out = A;
    for (long i = 0; i < out.size(); ++i)
      out.data[static_cast<size_t>(i)] += B.data[static_cast<size_t>(i)];
    V o = emit("add", std::move(out), {a, b});
    if (needs(a) || needs(b))
      record([this, a, b, o] {
        const auto& G = node(o).grad;
        if (needs(a)) accumulate(node(a).grad, G);
        if (needs(b)) accumulate(node(b).grad, G);
      });
    return o;
  }

  V sub(V a, V b) {
    const auto& A = value(a);
    const auto& B = value(b);
    require(A.same_shape(B), "sub", A, B);
    Tensor<Real> out = A;
    for (long i = 0; i < out.size(); ++i)
      out.data[static_cast<size_t>(i)] -= B.data[static_cast<size_t>(i)];
    V o = emit("sub", std::move(out), {a, b});
    if (needs(a) || needs(b))
      record([this, a, b, o] {
        const auto& G = node(o).grad;
        if (needs(a)) accumulate(node(a).grad, G);
        if (needs(b))
          for (long i = 0; i < G.size(); ++i)
            node(b).grad.data[static_cast<size_t>(i)] -=
                G.data[static_cast<size_t>(i)];
      });
    return o;
  }

  // Broadcast-add a 1xC row vector to every row.
  V add_rowvec(V m, V v) {
    const auto& M = value(m);
    const auto& R = value(v);
    require(R.rows == 1 && R.cols == M.cols, "add_rowvec", M, R);
    Tensor<Real> out = M;
    for (long r = 0; r < out.rows; ++r)
      for (long c = 0; c < out.cols; ++c) out.at(r, c) += R.at(0, c);
    V o = emit("add_rowvec", std::move(out), {m, v});
    if (needs(m) || needs(v))
      record([this, m, v, o] {
        const auto& G = node(o).grad;
        if (needs(m)) accumulate(node(m).grad, G);
        if (needs(v)) {
          auto& dv = node(v).grad;
          for (long r = 0; r < G.rows; ++r)
            for (long c = 0; c < G.cols; ++c) dv.at(0, c) += G.at(r, c);
        }
      });
    return o;
  }

  V scalar_mul(V a, Real k) { return affine(a, k, Real(0)); }

  // Elementwise mul*x + add with compile-time constants.
  V affine(V a, Real mul, Real addend) {
    Tensor<Real> out = value(a);
    for (auto& x : out.data) x = mul * x + addend;
    V o = emit("affine", std::move(out), {a});
    if (needs(a))
      record([this, a, o, mul] {
        const auto& G = node(o).grad;
        auto& da = node(a).grad;
        for (long i = 0; i < G.size(); ++i)
          da.data[static_cast<size_t>(i)] +=
              mul * G.data[static_cast<size_t>(i)];
      });
    return o;
  }

  V concat_rows(const std::vector<V>& parts) {
    CARES_CHECK(!parts.empty());
    const long cols = value(parts[0]).cols;
    long rows = 0;
    for (V p : parts) {
      require(value(p).cols == cols, "concat_rows", value(parts[0]), value(p));
      rows += value(p).rows;
    }
    Tensor<Real> out(rows, cols);
    long at = 0;
    for (V p : parts) {
      const auto& P = value(p);
      std::copy(P.data.begin(), P.data.end(), out.row_ptr(at));
      at += P.rows;
    }
    V o = emit("concat_rows", std::move(out), parts);
    record([this, parts, o] {
      const auto& G = node(o).grad;
      long at = 0;
      for (V p : parts) {
        auto& dp = node(p).grad;
        if (needs(p))
          for (long r = 0; r < dp.rows; ++r)
            for (long c = 0; c < dp.cols; ++c)
              dp.at(r, c) += G.at(at + r, c);
        at += value(p).rows;
      }
    });
    return o;
  }

  V concat_cols(const std::vector<V>& parts) {
    CARES_CHECK(!parts.empty());
    const long rows = value(parts[0]).rows;
    long cols = 0;
    for (V p : parts) {
      require(value(p).rows == rows, "concat_cols", value(parts[0]), value(p));
      cols += value(p).cols;
    }
    Tensor<Real> out(rows, cols);
    long at = 0;
    for (V p : parts) {
      const auto& P = value(p);
      for (long r = 0; r < rows; ++r)
        std::copy(P.row_ptr(r), P.row_ptr(r) + P.cols, out.row_ptr(r) + at);
      at += P.cols;
    }
    V o = emit("concat_cols", std::move(out), parts);
    record([this, parts, o] {
      const auto& G = node(o).grad;
      long at = 0;
      for (V p : parts) {
        const auto& P = value(p);
        if (needs(p)) {
          auto& dp = node(p).grad;
          for (long r = 0; r < P.rows; ++r)
            for (long c = 0; c < P.cols; ++c) dp.at(r, c) += G.at(r, at + c);
        }
        at += P.cols;
      }
    });
    return o;
  }

  V leaky_relu(V a, Real slope) {
    Tensor<Real> out = value(a);
    for (auto& x : out.data) x = x > Real(0) ? x : slope * x;
    V o = emit("leaky_relu", std::move(out), {a});
    if (needs(a))
      record([this, a, o, slope] {
        const auto& X = value(a);
        const auto& G = node(o).grad;
        auto& da = node(a).grad;
        for (long i = 0; i < G.size(); ++i) {
          const size_t s = static_cast<size_t>(i);
          da.data[s] += G.data[s] * (X.data[s] > Real(0) ? Real(1) : slope);
        }
      });
    return o;
  }

  V sigmoid(V a) {
    Tensor<Real> out = value(a);
    for (auto& x : out.data) {
      if (x >= Real(0)) {
        x = Real(1) / (Real(1) + std::exp(-x));
      } else {
        const Real e = std::exp(x);
        x = e / (Real(1) + e);
      }
    }
    V o = emit("sigmoid", std::move(out), {a});
    if (needs(a))
      record([this, a, o] {
        const auto& Y = value(o);
        const auto& G = node(o).grad;
        auto& da = node(a).grad;
        for (long i = 0; i < G.size(); ++i) {
          const size_t s = static_cast<size_t>(i);
          da.data[s] += G.data[s] * Y.data[s] * (Real(1) - Y.data[s]);
        }
      });
    return o;
  }

  V row_softmax(V a) {
    const auto& X = value(a);
    Tensor<Real> out(X.rows, X.cols);
    for (long r = 0; r < X.rows; ++r) {
      const Real* xr = X.row_ptr(r);
      Real* yr = out.row_ptr(r);
      Real mx = xr[0];
      for (long c = 1; c < X.cols; ++c) mx = std::max(mx, xr[c]);
      Real z = 0;
      for (long c = 0; c < X.cols; ++c) {
        yr[c] = std::exp(xr[c] - mx);
        z += yr[c];
      }
      for (long c = 0; c < X.cols; ++c) yr[c] /= z;
    }
    V o = emit("row_softmax", std::move(out), {a});
    if (needs(a))
      record([this, a, o] {
        const auto& Y = value(o);
        const auto& G = node(o).grad;
        auto& da = node(a).grad;
        for (long r = 0; r < Y.rows; ++r) {
          const Real* yr = Y.row_ptr(r);
          const Real* gr = G.row_ptr(r);
          Real dot = 0;
          for (long c = 0; c < Y.cols; ++c) dot += yr[c] * gr[c];
          Real* dr = da.row_ptr(r);
          for (long c = 0; c < Y.cols; ++c) dr[c] += yr[c] * (gr[c] - dot);
        }
      });
    return o;
  }

  V mean_rows(V a) {
    const auto& X = value(a);
    CARES_CHECK_MSG(X.rows > 0, "mean_rows of empty tensor");
    Tensor<Real> out(1, X.cols);
    for (long r = 0; r < X.rows; ++r)
      for (long c = 0; c < X.cols; ++c) out.at(0, c) += X.at(r, c);
    const Real inv = Real(1) / static_cast<Real>(X.rows);
    for (auto& x : out.data) x *= inv;
    V o = emit("mean_rows", std::move(out), {a});
    if (needs(a))
      record([this, a, o, inv] {
        const auto& G = node(o).grad;
        auto& da = node(a).grad;
        for (long r = 0; r < da.rows; ++r)
          for (long c = 0; c < da.cols; ++c) da.at(r, c) += inv * G.at(0, c);
      });
    return o;
  }

  // sum_r w_r * values_r, weights Nx1 -> 1xC.
  V weighted_sum_rows(V values, V weights) {
    const auto& X = value(values);
    const auto& W = value(weights);
    require(W.cols == 1 && W.rows == X.rows, "weighted_sum_rows", X, W);
    Tensor<Real> out(1, X.cols);
    for (long r = 0; r < X.rows; ++r) {
      const Real w = W.at(r, 0);
      for (long c = 0; c < X.cols; ++c) out.at(0, c) += w * X.at(r, c);
    }
    V o = emit("weighted_sum_rows", std::move(out), {values, weights});
    if (needs(values) || needs(weights))
      record([this, values, weights, o] {
        const auto& X = value(values);
        const auto& W = value(weights);
        const auto& G = node(o).grad;
        if (needs(values)) {
          auto& dx = node(values).grad;
          for (long r = 0; r < X.rows; ++r) {
            const Real w = W.at(r, 0);
            for (long c = 0; c < X.cols; ++c) dx.at(r, c) += w * G.at(0, c);
          }
        }
        if (needs(weights)) {
          auto& dw = node(weights).grad;
          for (long r = 0; r < X.rows; ++r) {
            Real acc = 0;
            for (long c = 0; c < X.cols; ++c) acc += X.at(r, c) * G.at(0, c);
            dw.at(r, 0) += acc;
          }
        }
      });
    return o;
  }

  V gather_rows(V a, std::vector<int> idx) {
    const auto& X = value(a);
    Tensor<Real> out(static_cast<long>(idx.size()), X.cols);
    for (size_t i = 0; i < idx.size(); ++i) {
      CARES_CHECK_MSG(idx[i] >= 0 && idx[i] < X.rows, "gather index range");
      std::copy(X.row_ptr(idx[i]), X.row_ptr(idx[i]) + X.cols,
                out.row_ptr(static_cast<long>(i)));
    }
    V o = emit("gather_rows", std::move(out), {a});
    if (needs(a))
      record([this, a, o, idx = std::move(idx)] {
        const auto& G = node(o).grad;
        auto& da = node(a).grad;
        for (size_t i = 0; i < idx.size(); ++i) {
          const Real* gr = G.row_ptr(static_cast<long>(i));
          Real* dr = da.row_ptr(idx[i]);
          for (long c = 0; c < G.cols; ++c) dr[c] += gr[c];
        }
      });
    return o;
  }

  // Softmax over entries sharing a group id; scores and output are Nx1.
  V segment_softmax(V scores, std::vector<int> groups) {
    const auto& X = value(scores);
    require(X.cols == 1, "segment_softmax", X, X);
    CARES_CHECK(static_cast<long>(groups.size()) == X.rows);
    int n_groups = 0;
    for (int g : groups) n_groups = std::max(n_groups, g + 1);
    std::vector<Real> gmax(static_cast<size_t>(n_groups),
                           std::numeric_limits<Real>::lowest());
    for (long r = 0; r < X.rows; ++r) {
      auto& m = gmax[static_cast<size_t>(groups[static_cast<size_t>(r)])];
      m = std::max(m, X.at(r, 0));
    }
    Tensor<Real> out(X.rows, 1);
    std::vector<Real> gsum(static_cast<size_t>(n_groups), Real(0));
    for (long r = 0; r < X.rows; ++r) {
      const size_t g = static_cast<size_t>(groups[static_cast<size_t>(r)]);
      out.at(r, 0) = std::exp(X.at(r, 0) - gmax[g]);
      gsum[g] += out.at(r, 0);
    }
    for (long r = 0; r < X.rows; ++r)
      out.at(r, 0) /= gsum[static_cast<size_t>(groups[static_cast<size_t>(r)])];
    V o = emit("segment_softmax", std::move(out), {scores});
    if (needs(scores))
      record([this, scores, o, groups = std::move(groups), n_groups] {
        const auto& Y = value(o);
        const auto& G = node(o).grad;
        auto& dx = node(scores).grad;
        std::vector<Real> gdot(static_cast<size_t>(n_groups), Real(0));
        for (long r = 0; r < Y.rows; ++r)
          gdot[static_cast<size_t>(groups[static_cast<size_t>(r)])] +=
              Y.at(r, 0) * G.at(r, 0);
        for (long r = 0; r < Y.rows; ++r) {
          const size_t g = static_cast<size_t>(groups[static_cast<size_t>(r)]);
          dx.at(r, 0) += Y.at(r, 0) * (G.at(r, 0) - gdot[g]);
        }
      });
    return o;
  }

  // Per-group weighted row sum: out[g] = sum_{r: group_r = g} w_r * values_r.
  V segment_weighted_sum(V values, V weights, std::vector<int> groups,
                         int n_groups) {
    const auto& X = value(values);
    const auto& W = value(weights);
    require(W.cols == 1 && W.rows == X.rows, "segment_weighted_sum", X, W);
    CARES_CHECK(static_cast<long>(groups.size()) == X.rows);
    Tensor<Real> out(n_groups, X.cols);
    for (long r = 0; r < X.rows; ++r) {
      const Real w = W.at(r, 0);
      Real* og = out.row_ptr(groups[static_cast<size_t>(r)]);
      const Real* xr = X.row_ptr(r);
      for (long c = 0; c < X.cols; ++c) og[c] += w * xr[c];
    }
    V o = emit("segment_weighted_sum", std::move(out), {values, weights});
    if (needs(values) || needs(weights))
      record([this, values, weights, o, groups = std::move(groups)] {
        const auto& X = value(values);
        const auto& W = value(weights);
        const auto& G = node(o).grad;
        if (needs(values)) {
          auto& dx = node(values).grad;
          for (long r = 0; r < X.rows; ++r) {
            const Real w = W.at(r, 0);
            const Real* gg = G.row_ptr(groups[static_cast<size_t>(r)]);
            Real* dr = dx.row_ptr(r);
            for (long c = 0; c < X.cols; ++c) dr[c] += w * gg[c];
          }
        }
        if (needs(weights)) {
          auto& dw = node(weights).grad;
          for (long r = 0; r < X.rows; ++r) {
            const Real* gg = G.row_ptr(groups[static_cast<size_t>(r)]);
            const Real* xr = X.row_ptr(r);
            Real acc = 0;
            for (long c = 0; c < X.cols; ++c) acc += xr[c] * gg[c];
            dw.at(r, 0) += acc;
          }
        }
      });
    return o;
  }

  // Row-by-row inner product of two NxC tensors -> Nx1.
  V rowwise_dot(V a, V b) {
    const auto& A = value(a);
    const auto& B = value(b);
    require(A.same_shape(B), "rowwise_dot", A, B);
    Tensor<Real> out(A.rows, 1);
    for (long r = 0; r < A.rows; ++r) {
      Real acc = 0;
      const Real* ar = A.row_ptr(r);
      const Real* br = B.row_ptr(r);
      for (long c = 0; c < A.cols; ++c) acc += ar[c] * br[c];
      out.at(r, 0) = acc;
    }
    V o = emit("rowwise_dot", std::move(out), {a, b});
    if (needs(a) || needs(b))
      record([this, a, b, o] {
        const auto& A = value(a);
        const auto& B = value(b);
        const auto& G = node(o).grad;
        for (long r = 0; r < A.rows; ++r) {
          const Real g = G.at(r, 0);
          if (needs(a)) {
            Real* dr = node(a).grad.row_ptr(r);
            const Real* br = B.row_ptr(r);
            for (long c = 0; c < A.cols; ++c) dr[c] += g * br[c];
          }
          if (needs(b)) {
            Real* dr = node(b).grad.row_ptr(r);
            const Real* ar = A.row_ptr(r);
            for (long c = 0; c < A.cols; ++c) dr[c] += g * ar[c];
          }
        }
      });
    return o;
  }

  // Scale row r of m by s_r (s is Nx1).
  V mul_rowscale(V m, V s) {
    const auto& M = value(m);
    const auto& S = value(s);
    require(S.cols == 1 && S.rows == M.rows, "mul_rowscale", M, S);
    Tensor<Real> out = M;
    for (long r = 0; r < M.rows; ++r) {
      const Real w = S.at(r, 0);
      Real* orow = out.row_ptr(r);
      for (long c = 0; c < M.cols; ++c) orow[c] *= w;
    }
    V o = emit("mul_rowscale", std::move(out), {m, s});
    if (needs(m) || needs(s))
      record([this, m, s, o] {
        const auto& M = value(m);
        const auto& S = value(s);
        const auto& G = node(o).grad;
        if (needs(m)) {
          auto& dm = node(m).grad;
          for (long r = 0; r < M.rows; ++r) {
            const Real w = S.at(r, 0);
            Real* dr = dm.row_ptr(r);
            const Real* gr = G.row_ptr(r);
            for (long c = 0; c < M.cols; ++c) dr[c] += w * gr[c];
          }
        }
        if (needs(s)) {
          auto& ds = node(s).grad;
          for (long r = 0; r < M.rows; ++r) {
            Real acc = 0;
            const Real* gr = G.row_ptr(r);
            const Real* mr = M.row_ptr(r);
            for (long c = 0; c < M.cols; ++c) acc += gr[c] * mr[c];
            ds.at(r, 0) += acc;
          }
        }
      });
    return o;
  }

  V l2_normalize_rows(V a) {
    const auto& X = value(a);
    Tensor<Real> out = X;
    std::vector<Real> norms(static_cast<size_t>(X.rows));
    for (long r = 0; r < X.rows; ++r) {
      Real sq = 0;
      const Real* xr = X.row_ptr(r);
      for (long c = 0; c < X.cols; ++c) sq += xr[c] * xr[c];
      Real n = std::sqrt(sq);
      if (n == Real(0) && strict)
        throw InternalError("l2_normalize_rows: zero row " + std::to_string(r));
      n = std::max(n, Real(1e-12));
      norms[static_cast<size_t>(r)] = n;
      Real* orow = out.row_ptr(r);
      for (long c = 0; c < X.cols; ++c) orow[c] /= n;
    }
    V o = emit("l2_normalize_rows", std::move(out), {a});
    if (needs(a))
      record([this, a, o, norms = std::move(norms)] {
        const auto& Y = value(o);
        const auto& G = node(o).grad;
        auto& da = node(a).grad;
        for (long r = 0; r < Y.rows; ++r) {
          const Real* yr = Y.row_ptr(r);
          const Real* gr = G.row_ptr(r);
          Real dot = 0;
          for (long c = 0; c < Y.cols; ++c) dot += yr[c] * gr[c];
          const Real inv = Real(1) / norms[static_cast<size_t>(r)];
          Real* dr = da.row_ptr(r);
          for (long c = 0; c < Y.cols; ++c)
            dr[c] += inv * (gr[c] - yr[c] * dot);
        }
      });
    return o;
  }

  // Natural log; entries below `floor` are clamped first (their gradient is
  // zero, the clamped branch being constant). floor = 0 means no clamping.
  V log(V a, Real floor = Real(0)) {
    const auto& X = value(a);
    Tensor<Real> out = X;
    for (auto& x : out.data) x = std::log(std::max(x, floor));
    V o = emit("log", std::move(out), {a});
    if (needs(a))
      record([this, a, o, floor] {
        const auto& X = value(a);
        const auto& G = node(o).grad;
        auto& da = node(a).grad;
        for (long i = 0; i < G.size(); ++i) {
          const size_t s = static_cast<size_t>(i);
          if (X.data[s] > floor)
            da.data[s] += G.data[s] / X.data[s];
          else if (floor == Real(0))
            da.data[s] += G.data[s] / X.data[s];  // propagate the inf/nan
        }
      });
    return o;
  }

  V sum(V a) {
    const auto& X = value(a);
    Real acc = 0;
    for (Real x : X.data) acc += x;
    V o = emit("sum", Tensor<Real>::scalar(acc), {a});
    if (needs(a))
      record([this, a, o] {
        const Real g = node(o).grad.at(0, 0);
        auto& da = node(a).grad;
        for (auto& x : da.data) x += g;
      });
    return o;
  }

  // Select scalar entries (rows[i], cols[i]) -> Kx1.
  V pick_entries(V a, std::vector<int> rows, std::vector<int> cols) {
    CARES_CHECK(rows.size() == cols.size());
    const auto& X = value(a);
    Tensor<Real> out(static_cast<long>(rows.size()), 1);
    for (size_t i = 0; i < rows.size(); ++i) {
      CARES_CHECK_MSG(rows[i] >= 0 && rows[i] < X.rows && cols[i] >= 0 &&
                          cols[i] < X.cols,
                      "pick_entries index range");
      out.at(static_cast<long>(i), 0) = X.at(rows[i], cols[i]);
    }
    V o = emit("pick_entries", std::move(out), {a});
    if (needs(a))
      record([this, a, o, rows = std::move(rows), cols = std::move(cols)] {
        const auto& G = node(o).grad;
        auto& da = node(a).grad;
        for (size_t i = 0; i < rows.size(); ++i)
          da.at(rows[i], cols[i]) += G.at(static_cast<long>(i), 0);
      });
    return o;
  }

  // ---- backward ---------------------------------------------------------

  // Seeds d(loss)=1 and replays the recorded ops in reverse. Gradients of
  // multiply-used nodes accumulate. The op list is cleared afterwards; node
  // values and gradients remain readable.
  void backward(V loss) {
    CARES_CHECK_MSG(!consumed_, "tape already consumed by backward");
    CARES_CHECK_MSG(!ops_.empty() || !nodes_.empty(), "backward on empty tape");
    const auto& L = value(loss);
    if (L.rows != 1 || L.cols != 1)
      throw InternalError("backward requires a scalar loss, got " +
                          shape_str(L));
    for (auto& n : nodes_) {
      const auto& v = n.external ? *n.external : n.owned;
      n.grad = Tensor<Real>(v.rows, v.cols);
    }
    consumed_ = true;  // grads become readable to the closures via node()
    node(loss).grad.at(0, 0) = Real(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
    op_trace_.clear();
  }

  bool consumed() const { return consumed_; }
  size_t num_nodes() const { return nodes_.size(); }
  size_t num_ops() const { return ops_.size(); }

  void dump(std::ostream& os) const {
    os << "tape: " << nodes_.size() << " nodes, " << ops_.size() << " ops\n";
    for (const auto& t : op_trace_) {
      os << "  %" << t.out << " = " << t.name << "(";
      for (size_t i = 0; i < t.in.size(); ++i)
        os << (i ? ", %" : "%") << t.in[i];
      os << ") " << shape_str(value(V{const_cast<Tape*>(this), t.out}))
         << "\n";
    }
  }

 private:
  struct Node {
    Tensor<Real> owned;
    Tensor<Real>* external = nullptr;
    Tensor<Real> grad;
    bool needs_grad = false;
  };
  struct OpTrace {
    std::string name;
    int out;
    std::vector<int> in;
  };

  Node& node(V v) { return nodes_[static_cast<size_t>(v.id)]; }
  const Node& node(V v) const { return nodes_[static_cast<size_t>(v.id)]; }
  bool needs(V v) const { return node(v).needs_grad; }

  int add_node(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  V emit(const char* name, Tensor<Real> out, const std::vector<V>& inputs) {
    CARES_CHECK_MSG(!consumed_, "tape already consumed by backward");
    if (check_finite && !out.all_finite())
      throw InternalError(std::string("non-finite output of ") + name);
    bool ng = false;
    for (V v : inputs) ng = ng || needs(v);
    const int id = add_node(Node{std::move(out), nullptr, {}, ng});
    OpTrace t;
    t.name = name;
    t.out = id;
    for (V v : inputs) t.in.push_back(v.id);
    op_trace_.push_back(std::move(t));
    return V{this, id};
  }

  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

  static void accumulate(Tensor<Real>& acc, const Tensor<Real>& g) {
    for (long i = 0; i < g.size(); ++i)
      acc.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)];
  }

  void require(bool ok, const char* op, const Tensor<Real>& a,
               const Tensor<Real>& b) const {
    if (!ok)
      throw InternalError(std::string(op) + ": shape mismatch " +
                          shape_str(a) + " vs " + shape_str(b));
  }

  std::vector<Node> nodes_;
  std::vector<std::function<void()>> ops_;
  std::vector<OpTrace> op_trace_;
  std::unordered_map<const Tensor<Real>*, int> params_;
  bool consumed_ = false;
};

}  // namespace cares::ad
