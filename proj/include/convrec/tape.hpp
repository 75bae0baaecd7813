#pragma once

#include "convrec/tensor.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <utility>

namespace convrec {

/// Reverse-mode tape. Nodes are appended in forward order, so creation order
/// is a topological order and backward() is a single reverse sweep that visits
/// each node exactly once. One tape per forward/backward pass, single thread.
template <class S>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::span<const S>)>;

  int push(Index out_size, BackwardFn back) {
    nodes_.push_back(std::move(back));
    grads_.emplace_back(static_cast<size_t>(out_size), S(0));
    return static_cast<int>(nodes_.size()) - 1;
  }

  /// Registers `t` as a differentiable leaf of this tape.
  void watch(Tensor<S>& t) {
    t.requires_grad = true;
    t.node = push(t.size(), nullptr);
  }

  void backward(const Tensor<S>& loss) {
    detail::require(loss.is_scalar(), "backward: loss must be scalar, got " +
                                          shape_str({loss.shape.data(), loss.shape.size()}));
    detail::require(loss.node >= 0, "backward: loss is not connected to this tape");
    grads_[static_cast<size_t>(loss.node)][0] = S(1);
    for (int id = loss.node; id >= 0; --id) {
      auto& fn = nodes_[static_cast<size_t>(id)];
      if (fn) fn(*this, grad(id));
    }
  }

  std::span<const S> grad(int node) const {
    detail::require(node >= 0 && node < static_cast<int>(grads_.size()), "grad: bad node handle");
    return {grads_[static_cast<size_t>(node)].data(), grads_[static_cast<size_t>(node)].size()};
  }
  std::span<const S> grad(const Tensor<S>& t) const { return grad(t.node); }

  S* grad_data(int node) { return grads_[static_cast<size_t>(node)].data(); }

  void accumulate(int node, std::span<const S> g) {
    auto& buf = grads_[static_cast<size_t>(node)];
    for (size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
  }

  int node_count() const { return static_cast<int>(nodes_.size()); }

  /// Drops all nodes and gradients. Node handles held by tensors become stale.
  void reset() {
    nodes_.clear();
    grads_.clear();
  }

 private:
  std::vector<BackwardFn> nodes_;
  std::vector<std::vector<S>> grads_;
};

// ---------------------------------------------------------------------------
// elementwise / arithmetic
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.same_shape(b), "add: shape mismatch " +
                                       shape_str({a.shape.data(), a.shape.size()}) + " vs " +
                                       shape_str({b.shape.data(), b.shape.size()}));
  Tensor<S> out(a.shape, a.data);
  out.vec() += b.vec();
  if (a.node >= 0 || b.node >= 0) {
    out.requires_grad = true;
    out.node = tape.push(out.size(), [an = a.node, bn = b.node](Tape<S>& t, std::span<const S> g) {
      if (an >= 0) t.accumulate(an, g);
      if (bn >= 0) t.accumulate(bn, g);
    });
  }
  return out;
}

template <class S>
Tensor<S> sub(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.same_shape(b), "sub: shape mismatch");
  Tensor<S> out(a.shape, a.data);
  out.vec() -= b.vec();
  if (a.node >= 0 || b.node >= 0) {
    out.requires_grad = true;
    out.node = tape.push(out.size(), [an = a.node, bn = b.node](Tape<S>& t, std::span<const S> g) {
      if (an >= 0) t.accumulate(an, g);
      if (bn >= 0) {
        S* d = t.grad_data(bn);
        for (size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> mul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.same_shape(b), "mul: shape mismatch");
  Tensor<S> out(a.shape, a.data);
  out.vec().array() *= b.vec().array();
  if (a.node >= 0 || b.node >= 0) {
    out.requires_grad = true;
    std::vector<S> av = (b.node >= 0) ? a.data : std::vector<S>{};
    std::vector<S> bv = (a.node >= 0) ? b.data : std::vector<S>{};
    out.node = tape.push(out.size(), [an = a.node, bn = b.node, av = std::move(av),
                                      bv = std::move(bv)](Tape<S>& t, std::span<const S> g) {
      if (an >= 0) {
        S* d = t.grad_data(an);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
      }
      if (bn >= 0) {
        S* d = t.grad_data(bn);
        for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> scale(Tape<S>& tape, const Tensor<S>& x, S c) {
  Tensor<S> out(x.shape, x.data);
  out.vec() *= c;
  if (x.node >= 0) {
    out.requires_grad = true;
    out.node = tape.push(out.size(), [xn = x.node, c](Tape<S>& t, std::span<const S> g) {
      S* d = t.grad_data(xn);
      for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * c;
    });
  }
  return out;
}

template <class S>
Tensor<S> neg(Tape<S>& tape, const Tensor<S>& x) {
  return scale(tape, x, S(-1));
}

/// x[r x c] + b[c], broadcast over rows. The only broadcast this engine allows.
template <class S>
Tensor<S> add_bias(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& b) {
  detail::require(x.rank() == 2 && b.rank() == 1 && x.shape[1] == b.shape[0],
                  "add_bias: need [r x c] + [c]");
  Tensor<S> out(x.shape, x.data);
  out.mat().rowwise() += b.vec().transpose();
  if (x.node >= 0 || b.node >= 0) {
    out.requires_grad = true;
    const Index r = x.shape[0], c = x.shape[1];
    out.node =
        tape.push(out.size(), [xn = x.node, bn = b.node, r, c](Tape<S>& t, std::span<const S> g) {
          if (xn >= 0) t.accumulate(xn, g);
          if (bn >= 0) {
            ConstMatMap<S> gm(g.data(), r, c);
            VecMap<S>(t.grad_data(bn), c) += gm.colwise().sum().transpose();
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 operands required");
  detail::require(a.shape[1] == b.shape[0],
                  "matmul: inner dims disagree " + shape_str({a.shape.data(), a.shape.size()}) +
                      " * " + shape_str({b.shape.data(), b.shape.size()}));
  const Index m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor<S> out = Tensor<S>::zeros({m, n});
  out.mat().noalias() = a.mat() * b.mat();
  if (a.node >= 0 || b.node >= 0) {
    out.requires_grad = true;
    std::vector<S> av = (b.node >= 0) ? a.data : std::vector<S>{};
    std::vector<S> bv = (a.node >= 0) ? b.data : std::vector<S>{};
    out.node = tape.push(out.size(), [an = a.node, bn = b.node, m, k, n, av = std::move(av),
                                      bv = std::move(bv)](Tape<S>& t, std::span<const S> g) {
      ConstMatMap<S> gm(g.data(), m, n);
      if (an >= 0) {
        ConstMatMap<S> bm(bv.data(), k, n);
        MatMap<S>(t.grad_data(an), m, k).noalias() += gm * bm.transpose();
      }
      if (bn >= 0) {
        ConstMatMap<S> am(av.data(), m, k);
        MatMap<S>(t.grad_data(bn), k, n).noalias() += am.transpose() * gm;
      }
    });
  }
  return out;
}

/// a[m x k] * b[n x k]^T -> [m x n]; saves the transpose op in attention.
template <class S>
Tensor<S> matmul_nt(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.shape[1] == b.shape[1],
                  "matmul_nt: need [m x k] and [n x k]");
  const Index m = a.shape[0], k = a.shape[1], n = b.shape[0];
  Tensor<S> out = Tensor<S>::zeros({m, n});
  out.mat().noalias() = a.mat() * b.mat().transpose();
  if (a.node >= 0 || b.node >= 0) {
    out.requires_grad = true;
    std::vector<S> av = (b.node >= 0) ? a.data : std::vector<S>{};
    std::vector<S> bv = (a.node >= 0) ? b.data : std::vector<S>{};
    out.node = tape.push(out.size(), [an = a.node, bn = b.node, m, k, n, av = std::move(av),
                                      bv = std::move(bv)](Tape<S>& t, std::span<const S> g) {
      ConstMatMap<S> gm(g.data(), m, n);
      if (an >= 0) {
        ConstMatMap<S> bm(bv.data(), n, k);
        MatMap<S>(t.grad_data(an), m, k).noalias() += gm * bm;
      }
      if (bn >= 0) {
        ConstMatMap<S> am(av.data(), m, k);
        MatMap<S>(t.grad_data(bn), n, k).noalias() += gm.transpose() * am;
      }
    });
  }
  return out;
}

/// v[m]^T * A[m x n] -> [n]
template <class S>
Tensor<S> vecmat(Tape<S>& tape, const Tensor<S>& v, const Tensor<S>& a) {
  detail::require(v.rank() == 1 && a.rank() == 2 && v.shape[0] == a.shape[0],
                  "vecmat: need [m] and [m x n]");
  const Index m = a.shape[0], n = a.shape[1];
  Tensor<S> out = Tensor<S>::zeros({n});
  out.vec().noalias() = a.mat().transpose() * v.vec();
  if (v.node >= 0 || a.node >= 0) {
    out.requires_grad = true;
    std::vector<S> vv = (a.node >= 0) ? v.data : std::vector<S>{};
    std::vector<S> av = (v.node >= 0) ? a.data : std::vector<S>{};
    out.node = tape.push(out.size(), [vn = v.node, an = a.node, m, n, vv = std::move(vv),
                                      av = std::move(av)](Tape<S>& t, std::span<const S> g) {
      ConstVecMap<S> gv(g.data(), n);
      if (vn >= 0) {
        ConstMatMap<S> am(av.data(), m, n);
        VecMap<S>(t.grad_data(vn), m).noalias() += am * gv;
      }
      if (an >= 0) {
        ConstVecMap<S> vm(vv.data(), m);
        MatMap<S>(t.grad_data(an), m, n).noalias() += vm * gv.transpose();
      }
    });
  }
  return out;
}

/// A[m x n] * x[n] -> [m]
template <class S>
Tensor<S> matvec(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& x) {
  detail::require(a.rank() == 2 && x.rank() == 1 && a.shape[1] == x.shape[0],
                  "matvec: need [m x n] and [n]");
  const Index m = a.shape[0], n = a.shape[1];
  Tensor<S> out = Tensor<S>::zeros({m});
  out.vec().noalias() = a.mat() * x.vec();
  if (a.node >= 0 || x.node >= 0) {
    out.requires_grad = true;
    std::vector<S> av = (x.node >= 0) ? a.data : std::vector<S>{};
    std::vector<S> xv = (a.node >= 0) ? x.data : std::vector<S>{};
    out.node = tape.push(out.size(), [an = a.node, xn = x.node, m, n, av = std::move(av),
                                      xv = std::move(xv)](Tape<S>& t, std::span<const S> g) {
      ConstVecMap<S> gv(g.data(), m);
      if (an >= 0) {
        ConstVecMap<S> xm(xv.data(), n);
        MatMap<S>(t.grad_data(an), m, n).noalias() += gv * xm.transpose();
      }
      if (xn >= 0) {
        ConstMatMap<S> am(av.data(), m, n);
        VecMap<S>(t.grad_data(xn), n).noalias() += am.transpose() * gv;
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> dot(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.rank() == 1 && b.rank() == 1 && a.shape[0] == b.shape[0],
                  "dot: need equal-length vectors");
  Tensor<S> out = Tensor<S>::scalar(a.vec().dot(b.vec()));
  if (a.node >= 0 || b.node >= 0) {
    out.requires_grad = true;
    std::vector<S> av = (b.node >= 0) ? a.data : std::vector<S>{};
    std::vector<S> bv = (a.node >= 0) ? b.data : std::vector<S>{};
    out.node = tape.push(1, [an = a.node, bn = b.node, av = std::move(av),
                             bv = std::move(bv)](Tape<S>& t, std::span<const S> g) {
      const S gs = g[0];
      if (an >= 0) {
        S* d = t.grad_data(an);
        for (size_t i = 0; i < bv.size(); ++i) d[i] += gs * bv[i];
      }
      if (bn >= 0) {
        S* d = t.grad_data(bn);
        for (size_t i = 0; i < av.size(); ++i) d[i] += gs * av[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// gather / slice / concat
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> embedding_lookup(Tape<S>& tape, const Tensor<S>& table, std::span<const int> ids) {
  detail::require(table.rank() == 2, "embedding_lookup: table must be rank 2");
  const Index v = table.shape[0], d = table.shape[1];
  for (int id : ids)
    detail::require(id >= 0 && id < v, "embedding_lookup: id " + std::to_string(id) +
                                           " outside vocabulary of " + std::to_string(v));
  const Index len = static_cast<Index>(ids.size());
  Tensor<S> out = Tensor<S>::zeros({len, d});
  for (Index t = 0; t < len; ++t)
    out.mat().row(t) = table.mat().row(ids[static_cast<size_t>(t)]);
  if (table.node >= 0) {
    out.requires_grad = true;
    std::vector<int> idv(ids.begin(), ids.end());
    out.node = tape.push(out.size(), [tn = table.node, d, idv = std::move(idv)](
                                         Tape<S>& t, std::span<const S> g) {
      const Index len = static_cast<Index>(idv.size());
      ConstMatMap<S> gm(g.data(), len, d);
      S* base = t.grad_data(tn);
      for (Index r = 0; r < len; ++r) {
        VecMap<S> row(base + static_cast<Index>(idv[static_cast<size_t>(r)]) * d, d);
        row += gm.row(r).transpose();
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> slice_rows(Tape<S>& tape, const Tensor<S>& x, Index off, Index n) {
  detail::require(x.rank() == 2 && off >= 0 && n >= 1 && off + n <= x.shape[0],
                  "slice_rows: range out of bounds");
  const Index c = x.shape[1];
  Tensor<S> out = Tensor<S>::zeros({n, c});
  out.mat() = x.mat().middleRows(off, n);
  if (x.node >= 0) {
    out.requires_grad = true;
    out.node = tape.push(out.size(), [xn = x.node, off, n, c](Tape<S>& t, std::span<const S> g) {
      ConstMatMap<S> gm(g.data(), n, c);
      S* base = t.grad_data(xn);
      for (Index r = 0; r < n; ++r) {
        VecMap<S> row(base + (off + r) * c, c);
        row += gm.row(r).transpose();
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> select_row(Tape<S>& tape, const Tensor<S>& x, Index r) {
  detail::require(x.rank() == 2 && r >= 0 && r < x.shape[0], "select_row: row out of bounds");
  const Index c = x.shape[1];
  Tensor<S> out = Tensor<S>::zeros({c});
  out.vec() = x.mat().row(r).transpose();
  if (x.node >= 0) {
    out.requires_grad = true;
    out.node = tape.push(c, [xn = x.node, r, c](Tape<S>& t, std::span<const S> g) {
      S* base = t.grad_data(xn);
      for (Index i = 0; i < c; ++i) base[r * c + i] += g[static_cast<size_t>(i)];
    });
  }
  return out;
}

template <class S>
Tensor<S> select_elem(Tape<S>& tape, const Tensor<S>& x, Index i) {
  detail::require(i >= 0 && i < x.size(), "select_elem: index out of bounds");
  Tensor<S> out = Tensor<S>::scalar(x[i]);
  if (x.node >= 0) {
    out.requires_grad = true;
    out.node = tape.push(1, [xn = x.node, i](Tape<S>& t, std::span<const S> g) {
      t.grad_data(xn)[i] += g[0];
    });
  }
  return out;
}

template <class S>
Tensor<S> slice_cols(Tape<S>& tape, const Tensor<S>& x, Index off, Index w) {
  detail::require(x.rank() == 2 && off >= 0 && w >= 1 && off + w <= x.shape[1],
                  "slice_cols: range out of bounds");
  const Index r = x.shape[0], c = x.shape[1];
  Tensor<S> out = Tensor<S>::zeros({r, w});
  out.mat() = x.mat().middleCols(off, w);
  if (x.node >= 0) {
    out.requires_grad = true;
    out.node = tape.push(out.size(), [xn = x.node, off, w, r, c](Tape<S>& t, std::span<const S> g) {
      ConstMatMap<S> gm(g.data(), r, w);
      MatMap<S> gx(t.grad_data(xn), r, c);
      gx.middleCols(off, w) += gm;
    });
  }
  return out;
}

template <class S>
Tensor<S> concat_cols(Tape<S>& tape, std::span<const Tensor<S>> parts) {
  detail::require(!parts.empty(), "concat_cols: empty input");
  const Index r = parts[0].shape[0];
  Index total = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.shape[0] == r, "concat_cols: row counts differ");
    total += p.shape[1];
    any_grad = any_grad || p.node >= 0;
  }
  Tensor<S> out = Tensor<S>::zeros({r, total});
  Index off = 0;
  for (const auto& p : parts) {
    out.mat().middleCols(off, p.shape[1]) = p.mat();
    off += p.shape[1];
  }
  if (any_grad) {
    out.requires_grad = true;
    std::vector<std::pair<int, Index>> spans;  // (node, width)
    for (const auto& p : parts) spans.emplace_back(p.node, p.shape[1]);
    out.node = tape.push(out.size(), [r, total, spans = std::move(spans)](Tape<S>& t,
                                                                          std::span<const S> g) {
      ConstMatMap<S> gm(g.data(), r, total);
      Index off = 0;
      for (auto [node, w] : spans) {
        if (node >= 0) MatMap<S>(t.grad_data(node), r, w) += gm.middleCols(off, w);
        off += w;
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> concat_vec(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b) {
  detail::require(a.rank() == 1 && b.rank() == 1, "concat_vec: rank-1 inputs required");
  const Index p = a.shape[0], q = b.shape[0];
  Tensor<S> out = Tensor<S>::zeros({p + q});
  out.vec().head(p) = a.vec();
  out.vec().tail(q) = b.vec();
  if (a.node >= 0 || b.node >= 0) {
    out.requires_grad = true;
    out.node =
        tape.push(p + q, [an = a.node, bn = b.node, p, q](Tape<S>& t, std::span<const S> g) {
          if (an >= 0) {
            S* d = t.grad_data(an);
            for (Index i = 0; i < p; ++i) d[i] += g[static_cast<size_t>(i)];
          }
          if (bn >= 0) {
            S* d = t.grad_data(bn);
            for (Index i = 0; i < q; ++i) d[i] += g[static_cast<size_t>(p + i)];
          }
        });
  }
  return out;
}

template <class S>
Tensor<S> stack_scalars(Tape<S>& tape, std::span<const Tensor<S>> xs) {
  detail::require(!xs.empty(), "stack_scalars: empty input");
  const Index n = static_cast<Index>(xs.size());
  Tensor<S> out = Tensor<S>::zeros({n});
  bool any_grad = false;
  std::vector<int> nodes(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) {
    detail::require(xs[i].is_scalar(), "stack_scalars: inputs must be scalars");
    out[static_cast<Index>(i)] = xs[i][0];
    nodes[i] = xs[i].node;
    any_grad = any_grad || xs[i].node >= 0;
  }
  if (any_grad) {
    out.requires_grad = true;
    out.node = tape.push(n, [nodes = std::move(nodes)](Tape<S>& t, std::span<const S> g) {
      for (size_t i = 0; i < nodes.size(); ++i)
        if (nodes[i] >= 0) t.grad_data(nodes[i])[0] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// nonlinearities / normalization / reductions
// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction. Rank-1 input is one row.
template <class S>
Tensor<S> softmax_rows(Tape<S>& tape, const Tensor<S>& x) {
  detail::require(x.cols() >= 1, "softmax_rows: empty rows");
  const Index r = x.rows(), c = x.cols();
  Tensor<S> out(x.shape, x.data);
  auto m = out.mat();
  for (Index i = 0; i < r; ++i) {
    const S mx = m.row(i).maxCoeff();
    m.row(i) = (m.row(i).array() - mx).exp();
    m.row(i) /= m.row(i).sum();
  }
  if (x.node >= 0) {
    out.requires_grad = true;
    std::vector<S> yv = out.data;
    out.node = tape.push(out.size(), [xn = x.node, r, c, yv = std::move(yv)](
                                         Tape<S>& t, std::span<const S> g) {
      ConstMatMap<S> y(yv.data(), r, c);
      ConstMatMap<S> gm(g.data(), r, c);
      MatMap<S> gx(t.grad_data(xn), r, c);
      for (Index i = 0; i < r; ++i) {
        const S s = gm.row(i).dot(y.row(i));
        gx.row(i).array() += (gm.row(i).array() - s) * y.row(i).array();
      }
    });
  }
  return out;
}

/// Per-row standardization then affine; epsilon 1e-12 on the variance.
/// A constant row maps to zeros before the affine.
template <class S>
Tensor<S> layer_norm(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& beta) {
  const Index c = x.cols();
  detail::require(gamma.rank() == 1 && beta.rank() == 1 && gamma.shape[0] == c &&
                      beta.shape[0] == c,
                  "layer_norm: gamma/beta must be [d]");
  const Index r = x.rows();
  constexpr S eps = S(1e-12);
  Tensor<S> out(x.shape, x.data);
  std::vector<S> xhat(static_cast<size_t>(r * c));
  std::vector<S> inv_std(static_cast<size_t>(r));
  auto m = out.mat();
  MatMap<S> xh(xhat.data(), r, c);
  for (Index i = 0; i < r; ++i) {
    const S mu = m.row(i).mean();
    const S var = (m.row(i).array() - mu).square().sum() / static_cast<S>(c);
    const S is = S(1) / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(i)] = is;
    xh.row(i) = (m.row(i).array() - mu) * is;
    m.row(i) = xh.row(i).array() * gamma.vec().transpose().array() +
               beta.vec().transpose().array();
  }
  if (x.node >= 0 || gamma.node >= 0 || beta.node >= 0) {
    out.requires_grad = true;
    std::vector<S> gv = (x.node >= 0) ? gamma.data : std::vector<S>{};
    out.node = tape.push(
        out.size(), [xn = x.node, gn = gamma.node, bn = beta.node, r, c, xhat = std::move(xhat),
                     inv_std = std::move(inv_std), gv = std::move(gv)](Tape<S>& t,
                                                                       std::span<const S> g) {
          ConstMatMap<S> gm(g.data(), r, c);
          ConstMatMap<S> xh(xhat.data(), r, c);
          if (bn >= 0) VecMap<S>(t.grad_data(bn), c) += gm.colwise().sum().transpose();
          if (gn >= 0)
            VecMap<S>(t.grad_data(gn), c) +=
                (gm.array() * xh.array()).colwise().sum().matrix().transpose();
          if (xn >= 0) {
            ConstVecMap<S> gamma_v(gv.data(), c);
            MatMap<S> gx(t.grad_data(xn), r, c);
            for (Index i = 0; i < r; ++i) {
              Eigen::Array<S, Eigen::Dynamic, 1> gg =
                  gm.row(i).transpose().array() * gamma_v.array();
              const S mean_gg = gg.mean();
              const S mean_ggx = (gg * xh.row(i).transpose().array()).mean();
              gx.row(i).array() += ((gg - mean_gg - xh.row(i).transpose().array() * mean_ggx) *
                                    inv_std[static_cast<size_t>(i)])
                                       .transpose();
            }
          }
        });
  }
  return out;
}

template <class S>
Tensor<S> gelu(Tape<S>& tape, const Tensor<S>& x) {
  Tensor<S> out(x.shape, x.data);
  constexpr S inv_sqrt2 = S(0.7071067811865476);
  for (auto& v : out.data) v = S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2));
  if (x.node >= 0) {
    out.requires_grad = true;
    std::vector<S> xv = x.data;
    out.node = tape.push(out.size(), [xn = x.node, xv = std::move(xv)](Tape<S>& t,
                                                                       std::span<const S> g) {
      constexpr S inv_sqrt2 = S(0.7071067811865476);
      constexpr S inv_sqrt2pi = S(0.3989422804014327);
      S* d = t.grad_data(xn);
      for (size_t i = 0; i < xv.size(); ++i) {
        const S v = xv[i];
        const S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
        const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * v * v);
        d[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> sigmoid(Tape<S>& tape, const Tensor<S>& x) {
  Tensor<S> out(x.shape, x.data);
  for (auto& v : out.data)
    v = v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
  if (x.node >= 0) {
    out.requires_grad = true;
    std::vector<S> yv = out.data;
    out.node = tape.push(out.size(), [xn = x.node, yv = std::move(yv)](Tape<S>& t,
                                                                       std::span<const S> g) {
      S* d = t.grad_data(xn);
      for (size_t i = 0; i < yv.size(); ++i) d[i] += g[i] * yv[i] * (S(1) - yv[i]);
    });
  }
  return out;
}

/// log(1 + exp(x)), computed without overflow. -log(sigmoid(x)) = softplus(-x).
template <class S>
Tensor<S> softplus(Tape<S>& tape, const Tensor<S>& x) {
  Tensor<S> out(x.shape, x.data);
  for (auto& v : out.data)
    v = v > S(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  if (x.node >= 0) {
    out.requires_grad = true;
    std::vector<S> xv = x.data;
    out.node = tape.push(out.size(), [xn = x.node, xv = std::move(xv)](Tape<S>& t,
                                                                       std::span<const S> g) {
      S* d = t.grad_data(xn);
      for (size_t i = 0; i < xv.size(); ++i) {
        const S v = xv[i];
        const S sig =
            v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
        d[i] += g[i] * sig;
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> sum(Tape<S>& tape, const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::scalar(x.vec().sum());
  if (x.node >= 0) {
    out.requires_grad = true;
    out.node =
        tape.push(1, [xn = x.node, n = x.size()](Tape<S>& t, std::span<const S> g) {
          S* d = t.grad_data(xn);
          for (Index i = 0; i < n; ++i) d[i] += g[0];
        });
  }
  return out;
}

template <class S>
Tensor<S> mean(Tape<S>& tape, const Tensor<S>& x) {
  detail::require(x.size() >= 1, "mean: empty tensor");
  Tensor<S> out = Tensor<S>::scalar(x.vec().sum() / static_cast<S>(x.size()));
  if (x.node >= 0) {
    out.requires_grad = true;
    out.node = tape.push(1, [xn = x.node, n = x.size()](Tape<S>& t, std::span<const S> g) {
      const S inv = g[0] / static_cast<S>(n);
      S* d = t.grad_data(xn);
      for (Index i = 0; i < n; ++i) d[i] += inv;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// non-differentiable helpers
// ---------------------------------------------------------------------------

/// Inverted-dropout mask as a constant tensor: entries are 0 with probability
/// `rate`, else 1/(1-rate). Multiply element-wise with the activation.
template <class S>
Tensor<S> dropout_mask(std::span<const Index> shape, S rate, std::mt19937& rng) {
  Tensor<S> m = Tensor<S>::full(std::vector<Index>(shape.begin(), shape.end()),
                                S(1) / (S(1) - rate));
  std::bernoulli_distribution drop(static_cast<double>(rate));
  for (auto& v : m.data)
    if (drop(rng)) v = S(0);
  return m;
}

template <class S>
Tensor<S> dropout(Tape<S>& tape, const Tensor<S>& x, S rate, std::mt19937& rng) {
  if (rate <= S(0)) return x;
  Tensor<S> m = dropout_mask<S>({x.shape.data(), x.shape.size()}, rate, rng);
  return mul(tape, x, m);
}

}  // namespace convrec
