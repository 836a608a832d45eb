#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "diffcap/tensor.hpp"

namespace diffcap {

/// Handle to a tensor recorded on a Tape.
struct Var {
  std::int32_t idx = -1;
  bool valid() const { return idx >= 0; }
};

/// Reverse-mode tape. Nodes are appended in execution order, which is a
/// topological order by construction, so backward() is a single reverse
/// sweep. Gradient buffers are allocated on first touch; a forward-only pass
/// never pays for them. One backward() per tape.
template <typename S>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, Var self)>;

  Var leaf(Tensor<S> value) { return record(std::move(value), nullptr); }

  Var record(Tensor<S> value, BackFn back) {
    nodes_.push_back(Node{std::move(value), nullptr, std::move(back)});
    return Var{(std::int32_t)nodes_.size() - 1};
  }

  const Tensor<S>& val(Var v) const { return nodes_[check(v)].value; }

  bool has_grad(Var v) const { return nodes_[check(v)].grad != nullptr; }

  /// Gradient accumulator for v, zero-initialised on first access.
  Tensor<S>& grad(Var v) {
    Node& n = nodes_[check(v)];
    if (!n.grad) n.grad = std::make_unique<Tensor<S>>(Tensor<S>::zeros(n.value.shape));
    return *n.grad;
  }

  void backward(Var loss) {
    if (val(loss).numel() != 1)
      throw UsageError("backward: loss must be a scalar, got shape " +
                       shape_str(val(loss).shape));
    grad(loss).data.setConstant(S(1));
    for (std::int32_t i = loss.idx; i >= 0; --i) {
      Node& n = nodes_[i];
      // Nodes whose output gradient was never touched contribute nothing.
      if (n.back && n.grad) n.back(*this, Var{i});
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<S> value;
    std::unique_ptr<Tensor<S>> grad;
    BackFn back;
  };

  std::size_t check(Var v) const {
    if (!v.valid() || (std::size_t)v.idx >= nodes_.size())
      throw UsageError("tape: invalid var handle");
    return (std::size_t)v.idx;
  }

  std::vector<Node> nodes_;
};

namespace ops {

template <typename S>
Var matmul(Tape<S>& t, Var a, Var b) {
  const Tensor<S>& av = t.val(a);
  const Tensor<S>& bv = t.val(b);
  if (av.cols() != bv.rows())
    throw UsageError("matmul: inner extents differ, " + shape_str(av.shape) + " vs " +
                     shape_str(bv.shape));
  Tensor<S> out(Shape{av.rows(), bv.cols()});
  out.mat().noalias() = av.mat() * bv.mat();
  return t.record(std::move(out), [a, b](Tape<S>& tp, Var self) {
    const Tensor<S>& go = tp.grad(self);
    tp.grad(a).mat().noalias() += go.mat() * tp.val(b).mat().transpose();
    tp.grad(b).mat().noalias() += tp.val(a).mat().transpose() * go.mat();
  });
}

template <typename S>
Var add(Tape<S>& t, Var a, Var b) {
  const Tensor<S>& av = t.val(a);
  const Tensor<S>& bv = t.val(b);
  check_same_shape(av, bv, "add");
  Tensor<S> out(av.shape);
  out.data = av.data + bv.data;
  return t.record(std::move(out), [a, b](Tape<S>& tp, Var self) {
    const Tensor<S>& go = tp.grad(self);
    tp.grad(a).data += go.data;
    tp.grad(b).data += go.data;
  });
}

/// out = a + c*b, elementwise over matching shapes.
template <typename S>
Var add_scaled(Tape<S>& t, Var a, Var b, S c) {
  const Tensor<S>& av = t.val(a);
  const Tensor<S>& bv = t.val(b);
  check_same_shape(av, bv, "add_scaled");
  Tensor<S> out(av.shape);
  out.data = av.data + c * bv.data;
  return t.record(std::move(out), [a, b, c](Tape<S>& tp, Var self) {
    const Tensor<S>& go = tp.grad(self);
    tp.grad(a).data += go.data;
    tp.grad(b).data += c * go.data;
  });
}

template <typename S>
Var mul(Tape<S>& t, Var a, Var b) {
  const Tensor<S>& av = t.val(a);
  const Tensor<S>& bv = t.val(b);
  check_same_shape(av, bv, "mul");
  Tensor<S> out(av.shape);
  out.data = av.data * bv.data;
  return t.record(std::move(out), [a, b](Tape<S>& tp, Var self) {
    const Tensor<S>& go = tp.grad(self);
    tp.grad(a).data += go.data * tp.val(b).data;
    tp.grad(b).data += go.data * tp.val(a).data;
  });
}

template <typename S>
Var scale(Tape<S>& t, Var a, S c) {
  Tensor<S> out(t.val(a).shape);
  out.data = c * t.val(a).data;
  return t.record(std::move(out), [a, c](Tape<S>& tp, Var self) {
    tp.grad(a).data += c * tp.grad(self).data;
  });
}

/// Adds a length-C vector to every row of a R x C operand.
template <typename S>
Var add_rowvec(Tape<S>& t, Var a, Var b) {
  const Tensor<S>& av = t.val(a);
  const Tensor<S>& bv = t.val(b);
  if (bv.numel() != av.cols())
    throw UsageError("add_rowvec: vector " + shape_str(bv.shape) + " against rows of " +
                     shape_str(av.shape));
  Tensor<S> out(av.shape);
  out.mat() = av.mat().rowwise() + bv.mat().row(0);
  return t.record(std::move(out), [a, b](Tape<S>& tp, Var self) {
    const Tensor<S>& go = tp.grad(self);
    tp.grad(a).data += go.data;
    tp.grad(b).mat().row(0) += go.mat().colwise().sum();
  });
}

/// Adds a P x C block to a (G*P) x C operand, row r picking up block row
/// r mod P. Covers position embeddings over a flattened batch.
template <typename S>
Var add_tiled_rows(Tape<S>& t, Var a, Var b) {
  const Tensor<S>& av = t.val(a);
  const Tensor<S>& bv = t.val(b);
  int p = bv.rows();
  if (bv.cols() != av.cols() || p <= 0 || av.rows() % p != 0)
    throw UsageError("add_tiled_rows: tile " + shape_str(bv.shape) + " against " +
                     shape_str(av.shape));
  Tensor<S> out(av.shape);
  for (int r = 0; r < av.rows(); ++r)
    out.mat().row(r) = av.mat().row(r) + bv.mat().row(r % p);
  return t.record(std::move(out), [a, b, p](Tape<S>& tp, Var self) {
    const Tensor<S>& go = tp.grad(self);
    tp.grad(a).data += go.data;
    auto gb = tp.grad(b).mat();
    for (int r = 0; r < go.rows(); ++r) gb.row(r % p) += go.mat().row(r);
  });
}

template <typename S>
Var gelu(Tape<S>& t, Var a) {
  const Tensor<S>& av = t.val(a);
  Tensor<S> out(av.shape);
  for (std::int64_t i = 0; i < av.numel(); ++i) {
    double x = (double)av.data[i];
    out.data[i] = (S)(0.5 * x * (1.0 + std::erf(x * 0.7071067811865476)));
  }
  return t.record(std::move(out), [a](Tape<S>& tp, Var self) {
    const Tensor<S>& go = tp.grad(self);
    const Tensor<S>& av = tp.val(a);
    Tensor<S>& ga = tp.grad(a);
    for (std::int64_t i = 0; i < av.numel(); ++i) {
      double x = (double)av.data[i];
      double phi = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
      double dens = std::exp(-0.5 * x * x) * 0.3989422804014327;
      ga.data[i] += go.data[i] * (S)(phi + x * dens);
    }
  });
}

template <typename S>
Var silu(Tape<S>& t, Var a) {
  const Tensor<S>& av = t.val(a);
  Tensor<S> out(av.shape);
  for (std::int64_t i = 0; i < av.numel(); ++i) {
    double x = (double)av.data[i];
    out.data[i] = (S)(x / (1.0 + std::exp(-x)));
  }
  return t.record(std::move(out), [a](Tape<S>& tp, Var self) {
    const Tensor<S>& go = tp.grad(self);
    const Tensor<S>& av = tp.val(a);
    Tensor<S>& ga = tp.grad(a);
    for (std::int64_t i = 0; i < av.numel(); ++i) {
      double x = (double)av.data[i];
      double sg = 1.0 / (1.0 + std::exp(-x));
      ga.data[i] += go.data[i] * (S)(sg * (1.0 + x * (1.0 - sg)));
    }
  });
}

namespace detail {

template <typename S>
struct NormCache {
  Tensor<S> xhat;
  std::vector<S> inv_std;
};

template <typename S>
std::shared_ptr<NormCache<S>> normalize_rows(const Tensor<S>& xv, double eps) {
  auto cache = std::make_shared<NormCache<S>>();
  cache->xhat = Tensor<S>(xv.shape);
  cache->inv_std.resize((std::size_t)xv.rows());
  int c = xv.cols();
  for (int r = 0; r < xv.rows(); ++r) {
    auto row = xv.mat().row(r).array();
    S mean = row.mean();
    S var = (row - mean).square().sum() / (S)c;
    S istd = S(1) / std::sqrt(var + (S)eps);
    cache->inv_std[(std::size_t)r] = istd;
    cache->xhat.mat().row(r).array() = (row - mean) * istd;
  }
  return cache;
}

// dx for a normalized row given dxhat, shared by both layernorm flavours.
template <typename S>
void norm_row_backward(const NormCache<S>& cache, int r,
                       const Eigen::Array<S, 1, Eigen::Dynamic>& dxhat,
                       typename Tensor<S>::MatMap gx) {
  int c = (int)dxhat.size();
  auto xh = cache.xhat.mat().row(r).array();
  S m1 = dxhat.mean();
  S m2 = (dxhat * xh).mean();
  gx.row(r).array() += cache.inv_std[(std::size_t)r] * (dxhat - m1 - xh * m2);
}

}  // namespace detail

/// Row layer norm with affine output: gain * xhat + bias.
template <typename S>
Var layernorm(Tape<S>& t, Var x, Var gain, Var bias, double eps = 1e-5) {
  const Tensor<S>& xv = t.val(x);
  const Tensor<S>& gv = t.val(gain);
  const Tensor<S>& bv = t.val(bias);
  if (gv.numel() != xv.cols() || bv.numel() != xv.cols())
    throw UsageError("layernorm: affine params " + shape_str(gv.shape) + ", " +
                     shape_str(bv.shape) + " against " + shape_str(xv.shape));
  auto cache = detail::normalize_rows(xv, eps);
  Tensor<S> out(xv.shape);
  out.mat() = (cache->xhat.mat().array().rowwise() * gv.mat().row(0).array()).rowwise() +
              bv.mat().row(0).array();
  return t.record(std::move(out), [x, gain, bias, cache](Tape<S>& tp, Var self) {
    const Tensor<S>& go = tp.grad(self);
    auto gg = tp.grad(gain).mat();
    auto gb = tp.grad(bias).mat();
    auto gx = tp.grad(x).mat();
    auto gv = tp.val(gain).mat().row(0).array();
    for (int r = 0; r < go.rows(); ++r) {
      auto gor = go.mat().row(r).array();
      gg.row(0).array() += gor * cache->xhat.mat().row(r).array();
      gb.row(0).array() += gor;
      Eigen::Array<S, 1, Eigen::Dynamic> dxhat = gor * gv;
      detail::norm_row_backward(*cache, r, dxhat, gx);
    }
  });
}

/// Row layer norm without the affine part; AdaLN supplies scale and shift.
template <typename S>
Var layernorm_plain(Tape<S>& t, Var x, double eps = 1e-5) {
  const Tensor<S>& xv = t.val(x);
  auto cache = detail::normalize_rows(xv, eps);
  Tensor<S> out = cache->xhat;
  return t.record(std::move(out), [x, cache](Tape<S>& tp, Var self) {
    const Tensor<S>& go = tp.grad(self);
    auto gx = tp.grad(x).mat();
    for (int r = 0; r < go.rows(); ++r) {
      Eigen::Array<S, 1, Eigen::Dynamic> dxhat = go.mat().row(r).array();
      detail::norm_row_backward(*cache, r, dxhat, gx);
    }
  });
}

template <typename S>
Var softmax_rows(Tape<S>& t, Var x) {
  const Tensor<S>& xv = t.val(x);
  Tensor<S> out(xv.shape);
  for (int r = 0; r < xv.rows(); ++r) {
    auto row = xv.mat().row(r).array();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (row - row.maxCoeff()).exp();
    out.mat().row(r).array() = e / e.sum();
  }
  return t.record(std::move(out), [x](Tape<S>& tp, Var self) {
    const Tensor<S>& go = tp.grad(self);
    const Tensor<S>& pv = tp.val(self);
    auto gx = tp.grad(x).mat();
    for (int r = 0; r < go.rows(); ++r) {
      auto p = pv.mat().row(r).array();
      auto g = go.mat().row(r).array();
      S dot = (g * p).sum();
      gx.row(r).array() += p * (g - dot);
    }
  });
}

template <typename S>
Var log_softmax_rows(Tape<S>& t, Var x) {
  const Tensor<S>& xv = t.val(x);
  Tensor<S> out(xv.shape);
  for (int r = 0; r < xv.rows(); ++r) {
    auto row = xv.mat().row(r).array();
    S mx = row.maxCoeff();
    S lse = mx + std::log((row - mx).exp().sum());
    out.mat().row(r).array() = row - lse;
  }
  return t.record(std::move(out), [x](Tape<S>& tp, Var self) {
    const Tensor<S>& go = tp.grad(self);
    const Tensor<S>& ov = tp.val(self);
    auto gx = tp.grad(x).mat();
    for (int r = 0; r < go.rows(); ++r) {
      auto g = go.mat().row(r).array();
      S gsum = g.sum();
      gx.row(r).array() += g - ov.mat().row(r).array().exp() * gsum;
    }
  });
}

/// Row gather with scatter-add backward; ids may repeat.
template <typename S>
Var gather_rows(Tape<S>& t, Var table, std::vector<int> ids) {
  const Tensor<S>& tv = t.val(table);
  for (int id : ids)
    if (id < 0 || id >= tv.rows())
      throw UsageError("gather_rows: id " + std::to_string(id) + " outside table " +
                       shape_str(tv.shape));
  Tensor<S> out(Shape{(int)ids.size(), tv.cols()});
  for (std::size_t i = 0; i < ids.size(); ++i)
    out.mat().row((int)i) = tv.mat().row(ids[i]);
  return t.record(std::move(out), [table, ids = std::move(ids)](Tape<S>& tp, Var self) {
    const Tensor<S>& go = tp.grad(self);
    auto gt = tp.grad(table).mat();
    for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += go.mat().row((int)i);
  });
}

/// Makes a constant copy: same value, no gradient flow back to `a`.
template <typename S>
Var detach(Tape<S>& t, Var a) {
  return t.leaf(t.val(a));
}

template <typename S>
Var sum_all(Tape<S>& t, Var a) {
  double acc = 0;
  for (std::int64_t i = 0; i < t.val(a).numel(); ++i) acc += (double)t.val(a).data[i];
  return t.record(Tensor<S>::scalar((S)acc), [a](Tape<S>& tp, Var self) {
    tp.grad(a).data += tp.grad(self).data[0];
  });
}

template <typename S>
Var mean_all(Tape<S>& t, Var a) {
  std::int64_t n = t.val(a).numel();
  double acc = 0;
  for (std::int64_t i = 0; i < n; ++i) acc += (double)t.val(a).data[i];
  return t.record(Tensor<S>::scalar((S)(acc / (double)n)), [a, n](Tape<S>& tp, Var self) {
    tp.grad(a).data += tp.grad(self).data[0] / (S)n;
  });
}

/// Multi-head scaled dot-product attention over a flattened batch.
/// q is (batch*lq) x d, k and v are (batch*lk) x d with d = heads * dh.
/// add_mask, when present, is a {batch, lq, lk} additive bias shared across
/// heads; it is a constant and receives no gradient.
template <typename S>
Var attention(Tape<S>& t, Var q, Var k, Var v, const Tensor<S>* add_mask, int batch,
              int heads) {
  const Tensor<S>& qv = t.val(q);
  const Tensor<S>& kv = t.val(k);
  const Tensor<S>& vv = t.val(v);
  int d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows())
    throw UsageError("attention: operand shapes " + shape_str(qv.shape) + ", " +
                     shape_str(kv.shape) + ", " + shape_str(vv.shape));
  if (batch <= 0 || heads <= 0 || d % heads != 0 || qv.rows() % batch != 0 ||
      kv.rows() % batch != 0)
    throw UsageError("attention: batch/head factors do not divide " + shape_str(qv.shape));
  int lq = qv.rows() / batch;
  int lk = kv.rows() / batch;
  int dh = d / heads;
  if (add_mask && add_mask->shape != Shape{batch, lq, lk})
    throw UsageError("attention: mask shape " + shape_str(add_mask->shape) + " vs " +
                     shape_str(Shape{batch, lq, lk}));
  S inv = S(1) / (S)std::sqrt((double)dh);
  auto probs = std::make_shared<Tensor<S>>(Shape{batch * heads * lq, lk});
  Tensor<S> out(Shape{batch * lq, d});
  typename Tensor<S>::Mat sc(lq, lk);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      auto qb = qv.mat().block(b * lq, h * dh, lq, dh);
      auto kb = kv.mat().block(b * lk, h * dh, lk, dh);
      sc.noalias() = qb * kb.transpose();
      sc *= inv;
      if (add_mask)
        sc += typename Tensor<S>::ConstMatMap(
            add_mask->data.data() + (std::int64_t)b * lq * lk, lq, lk);
      for (int r = 0; r < lq; ++r) {
        auto row = sc.row(r).array();
        Eigen::Array<S, 1, Eigen::Dynamic> e = (row - row.maxCoeff()).exp();
        sc.row(r).array() = e / e.sum();
      }
      probs->mat().block((b * heads + h) * lq, 0, lq, lk) = sc;
      out.mat().block(b * lq, h * dh, lq, dh).noalias() =
          sc * vv.mat().block(b * lk, h * dh, lk, dh);
    }
  }
  return t.record(std::move(out),
                  [q, k, v, probs, batch, heads, lq, lk, dh, inv](Tape<S>& tp, Var self) {
    const Tensor<S>& go = tp.grad(self);
    const Tensor<S>& qv = tp.val(q);
    const Tensor<S>& kv = tp.val(k);
    const Tensor<S>& vv = tp.val(v);
    auto gq = tp.grad(q).mat();
    auto gk = tp.grad(k).mat();
    auto gv = tp.grad(v).mat();
    typename Tensor<S>::Mat dp(lq, lk), ds(lq, lk);
    for (int b = 0; b < batch; ++b) {
      for (int h = 0; h < heads; ++h) {
        auto p = probs->mat().block((b * heads + h) * lq, 0, lq, lk);
        auto dout = go.mat().block(b * lq, h * dh, lq, dh);
        auto vb = vv.mat().block(b * lk, h * dh, lk, dh);
        dp.noalias() = dout * vb.transpose();
        gv.block(b * lk, h * dh, lk, dh).noalias() += p.transpose() * dout;
        Eigen::Array<S, Eigen::Dynamic, 1> rs =
            (dp.array() * p.array()).rowwise().sum();
        ds.array() = p.array() * (dp.array().colwise() - rs);
        auto qb = qv.mat().block(b * lq, h * dh, lq, dh);
        auto kb = kv.mat().block(b * lk, h * dh, lk, dh);
        gq.block(b * lq, h * dh, lq, dh).noalias() += inv * (ds * kb);
        gk.block(b * lk, h * dh, lk, dh).noalias() += inv * (ds.transpose() * qb);
      }
    }
  });
}

/// Per-group feature modulation: row r of h is scaled by (1 + s_g) and
/// shifted by b_g, where g = r / rows_per_group and ss packs [s_g | b_g]
/// as a (groups) x (2*cols) operand.
template <typename S>
Var adaln_modulate(Tape<S>& t, Var h, Var ss, int rows_per_group) {
  const Tensor<S>& hv = t.val(h);
  const Tensor<S>& sv = t.val(ss);
  int c = hv.cols();
  if (rows_per_group <= 0 || hv.rows() % rows_per_group != 0)
    throw UsageError("adaln_modulate: group size " + std::to_string(rows_per_group) +
                     " against " + shape_str(hv.shape));
  int groups = hv.rows() / rows_per_group;
  if (sv.rows() != groups || sv.cols() != 2 * c)
    throw UsageError("adaln_modulate: modulation " + shape_str(sv.shape) + " against " +
                     shape_str(hv.shape));
  Tensor<S> out(hv.shape);
  for (int r = 0; r < hv.rows(); ++r) {
    int g = r / rows_per_group;
    out.mat().row(r).array() =
        hv.mat().row(r).array() * (S(1) + sv.mat().row(g).head(c).array()) +
        sv.mat().row(g).tail(c).array();
  }
  return t.record(std::move(out), [h, ss, rows_per_group, c](Tape<S>& tp, Var self) {
    const Tensor<S>& go = tp.grad(self);
    const Tensor<S>& hv = tp.val(h);
    const Tensor<S>& sv = tp.val(ss);
    auto gh = tp.grad(h).mat();
    auto gs = tp.grad(ss).mat();
    for (int r = 0; r < go.rows(); ++r) {
      int g = r / rows_per_group;
      auto gor = go.mat().row(r).array();
      gh.row(r).array() += gor * (S(1) + sv.mat().row(g).head(c).array());
      gs.row(g).head(c).array() += gor * hv.mat().row(r).array();
      gs.row(g).tail(c).array() += gor;
    }
  });
}

/// Replaces whole row groups of `a` with a shared tile. Group g of the
/// output is `tile` where use_tile[g] is set, otherwise group g of `a`.
template <typename S>
Var blend_rows(Tape<S>& t, Var a, Var tile, std::vector<std::uint8_t> use_tile,
               int rows_per_group) {
  const Tensor<S>& av = t.val(a);
  const Tensor<S>& tv = t.val(tile);
  if (tv.rows() != rows_per_group || tv.cols() != av.cols() ||
      av.rows() != rows_per_group * (int)use_tile.size())
    throw UsageError("blend_rows: tile " + shape_str(tv.shape) + " against " +
                     shape_str(av.shape) + " with " + std::to_string(use_tile.size()) +
                     " groups");
  Tensor<S> out(av.shape);
  for (std::size_t g = 0; g < use_tile.size(); ++g) {
    auto dst = out.mat().block((int)g * rows_per_group, 0, rows_per_group, av.cols());
    if (use_tile[g])
      dst = tv.mat();
    else
      dst = av.mat().block((int)g * rows_per_group, 0, rows_per_group, av.cols());
  }
  return t.record(std::move(out),
                  [a, tile, use_tile = std::move(use_tile), rows_per_group](Tape<S>& tp,
                                                                            Var self) {
    const Tensor<S>& go = tp.grad(self);
    int c = go.cols();
    for (std::size_t g = 0; g < use_tile.size(); ++g) {
      auto src = go.mat().block((int)g * rows_per_group, 0, rows_per_group, c);
      if (use_tile[g])
        tp.grad(tile).mat() += src;
      else
        tp.grad(a).mat().block((int)g * rows_per_group, 0, rows_per_group, c) += src;
    }
  });
}

/// Mean cross-entropy from raw logits.
/// With group > 0, rows form blocks of `group` (one block per example):
/// the loss is the mean over blocks of the per-block mean over active rows,
/// so every example weighs the same regardless of its active count. Blocks
/// with no active row are skipped. With group == 0 it is a flat mean over
/// active rows. Inactive rows may carry any target value.
template <typename S>
Var cross_entropy(Tape<S>& t, Var logits, std::vector<int> targets,
                  std::vector<std::uint8_t> active, int group) {
  const Tensor<S>& lv = t.val(logits);
  int rows = lv.rows();
  int vsz = lv.cols();
  if ((int)targets.size() != rows)
    throw UsageError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     shape_str(lv.shape));
  if (active.empty()) active.assign((std::size_t)rows, 1);
  if ((int)active.size() != rows)
    throw UsageError("cross_entropy: " + std::to_string(active.size()) + " active flags for " +
                     shape_str(lv.shape));
  if (group < 0 || (group > 0 && rows % group != 0))
    throw UsageError("cross_entropy: group " + std::to_string(group) + " against " +
                     shape_str(lv.shape));

  auto probs = std::make_shared<Tensor<S>>(lv.shape);
  std::vector<double> row_loss((std::size_t)rows, 0.0);
  for (int r = 0; r < rows; ++r) {
    auto row = lv.mat().row(r).array();
    S mx = row.maxCoeff();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (row - mx).exp();
    S den = e.sum();
    probs->mat().row(r).array() = e / den;
    if (!active[(std::size_t)r]) continue;
    int tgt = targets[(std::size_t)r];
    if (tgt < 0 || tgt >= vsz)
      throw UsageError("cross_entropy: target " + std::to_string(tgt) + " outside " +
                       std::to_string(vsz) + " classes at row " + std::to_string(r));
    row_loss[(std::size_t)r] = (double)mx + std::log((double)den) - (double)row(tgt);
  }

  auto weights = std::make_shared<std::vector<S>>((std::size_t)rows, S(0));
  double loss = 0.0;
  if (group == 0) {
    std::int64_t na = 0;
    for (int r = 0; r < rows; ++r) na += active[(std::size_t)r] ? 1 : 0;
    if (na == 0) throw UsageError("cross_entropy: no active rows");
    for (int r = 0; r < rows; ++r) {
      if (!active[(std::size_t)r]) continue;
      (*weights)[(std::size_t)r] = S(1.0 / (double)na);
      loss += row_loss[(std::size_t)r] / (double)na;
    }
  } else {
    int nblocks = rows / group;
    std::vector<int> block_active((std::size_t)nblocks, 0);
    int used = 0;
    for (int blk = 0; blk < nblocks; ++blk) {
      for (int j = 0; j < group; ++j)
        block_active[(std::size_t)blk] += active[(std::size_t)(blk * group + j)] ? 1 : 0;
      if (block_active[(std::size_t)blk] > 0) ++used;
    }
    if (used == 0) throw UsageError("cross_entropy: no active rows");
    for (int blk = 0; blk < nblocks; ++blk) {
      int na = block_active[(std::size_t)blk];
      if (na == 0) continue;
      double w = 1.0 / ((double)used * (double)na);
      for (int j = 0; j < group; ++j) {
        int r = blk * group + j;
        if (!active[(std::size_t)r]) continue;
        (*weights)[(std::size_t)r] = (S)w;
        loss += row_loss[(std::size_t)r] * w;
      }
    }
  }

  return t.record(Tensor<S>::scalar((S)loss),
                  [logits, targets = std::move(targets), probs, weights](Tape<S>& tp,
                                                                         Var self) {
    S g = tp.grad(self).data[0];
    auto gl = tp.grad(logits).mat();
    for (int r = 0; r < gl.rows(); ++r) {
      S w = (*weights)[(std::size_t)r];
      if (w == S(0)) continue;
      gl.row(r).array() += g * w * probs->mat().row(r).array();
      gl(r, targets[(std::size_t)r]) -= g * w;
    }
  });
}

}  // namespace ops

}  // namespace diffcap
