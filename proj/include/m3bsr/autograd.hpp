#pragma once

// Minimal reverse-mode differentiation over 2-D matrices.
//
// A Tape records every intermediate value together with a closure that
// propagates its gradient to its inputs. Parameters enter the tape as leaves
// that write their gradients straight into a GradBuffer.

#include <cmath>
#include <functional>
#include <limits>
#include <unordered_map>
#include <vector>

#include "m3bsr/params.hpp"
#include "m3bsr/tensor.hpp"

namespace m3bsr {

template <class S>
class Tape;

template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Mat<S>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  S scalar() const { return value()(0, 0); }
  bool valid() const { return tape != nullptr; }
};

template <class S>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> constant(Mat<S> value) {
    Node n;
    n.own = std::move(value);
    return push(std::move(n));
  }

  // References external storage; the matrix must outlive the tape.
  Var<S> constant_ref(const Mat<S>& value) {
    Node n;
    n.ext = &value;
    return push(std::move(n));
  }

  // Trainable leaf. Each (store, index) pair gets a single node per tape.
  Var<S> param(const ParamStore<S>& store, int index, GradBuffer<S>* grads) {
    auto key = std::make_pair(&store, index);
    auto it = param_nodes_.find(key);
    if (it != param_nodes_.end()) return {this, it->second};
    Node n;
    n.ext = &store[index].value;
    if (grads != nullptr) {
      n.ext_grad = &(*grads)[index];
      n.requires_grad = true;
    }
    Var<S> v = push(std::move(n));
    param_nodes_[key] = v.id;
    return v;
  }

  Var<S> make(Mat<S> value, std::initializer_list<Var<S>> inputs, Backward bw) {
    Node n;
    n.own = std::move(value);
    for (const auto& in : inputs) n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
    if (n.requires_grad) n.backward = std::move(bw);
    return push(std::move(n));
  }

  Var<S> make(Mat<S> value, const std::vector<Var<S>>& inputs, Backward bw) {
    Node n;
    n.own = std::move(value);
    for (const auto& in : inputs) n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
    if (n.requires_grad) n.backward = std::move(bw);
    return push(std::move(n));
  }

  const Mat<S>& value(int id) const {
    const Node& n = nodes_[id];
    return n.ext ? *n.ext : n.own;
  }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  // Gradient accumulator for node `id`, zero-initialised on first access.
  Mat<S>& grad(int id) {
    Node& n = nodes_[id];
    if (n.ext_grad) return *n.ext_grad;
    if (n.grad.size() == 0) {
      const Mat<S>& v = value(id);
      n.grad = Mat<S>::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }

  template <class Expr>
  void accumulate(int id, const Expr& g) {
    if (!nodes_[id].requires_grad) return;
    Node& n = nodes_[id];
    if (n.ext_grad) {
      n.ext_grad->noalias() += g;
    } else if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad.noalias() += g;
    }
  }

  // Seeds d(root)/d(root) = 1 and propagates to every reachable leaf.
  void backward(Var<S> root) {
    if (!nodes_[root.id].requires_grad) return;
    grad(root.id).setConstant(S(1));
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<S> own;
    const Mat<S>* ext = nullptr;
    Mat<S> grad;
    Mat<S>* ext_grad = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  struct KeyHash {
    std::size_t operator()(const std::pair<const ParamStore<S>*, int>& k) const {
      return std::hash<const void*>()(k.first) ^ (static_cast<std::size_t>(k.second) * 0x9e3779b97f4a7c15ULL);
    }
  };

  Var<S> push(Node n) {
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::pair<const ParamStore<S>*, int>, int, KeyHash> param_nodes_;
};

namespace ops {

template <class S>
Var<S> detach(Var<S> a) {
  return a.tape->constant(a.value());
}

template <class S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value() * b.value();
  int ia = a.id, ib = b.id;
  return t.make(std::move(out), {a, b}, [ia, ib](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

// a * b^T
template <class S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value() * b.value().transpose();
  int ia = a.id, ib = b.id;
  return t.make(std::move(out), {a, b}, [ia, ib](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ValidationError("add: shape mismatch");
  Mat<S> out = a.value() + b.value();
  int ia = a.id, ib = b.id;
  return t.make(std::move(out), {a, b}, [ia, ib](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ValidationError("sub: shape mismatch");
  Mat<S> out = a.value() - b.value();
  int ia = a.id, ib = b.id;
  return t.make(std::move(out), {a, b}, [ia, ib](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

// Elementwise product.
template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ValidationError("mul: shape mismatch");
  Mat<S> out = a.value().cwiseProduct(b.value());
  int ia = a.id, ib = b.id;
  return t.make(std::move(out), {a, b}, [ia, ib](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

// shift + scale * a
template <class S>
Var<S> affine(Var<S> a, S scale, S shift = S(0)) {
  Tape<S>& t = *a.tape;
  Mat<S> out = (a.value() * scale).array() + shift;
  int ia = a.id;
  return t.make(std::move(out), {a}, [ia, scale](Tape<S>& t, int self) { t.accumulate(ia, t.grad(self) * scale); });
}

template <class S>
Var<S> scale(Var<S> a, S s) {
  return affine(a, s, S(0));
}

// a + b with b a 1 x cols row broadcast over rows.
template <class S>
Var<S> add_row(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  if (b.rows() != 1 || b.cols() != a.cols()) throw ValidationError("add_row: shape mismatch");
  Mat<S> out = a.value().rowwise() + b.value().row(0);
  int ia = a.id, ib = b.id;
  return t.make(std::move(out), {a, b}, [ia, ib](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
  });
}

// Row r of `a` is multiplied by mask[r] (0 or 1).
template <class S>
Var<S> mask_rows(Var<S> a, const MaskRow& mask) {
  Tape<S>& t = *a.tape;
  if (static_cast<Eigen::Index>(mask.size()) != a.rows()) throw ValidationError("mask_rows: length mismatch");
  Mat<S> out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r)
    if (!mask[r]) out.row(r).setZero();
  int ia = a.id;
  return t.make(std::move(out), {a}, [ia, mask](Tape<S>& t, int self) {
    Mat<S> g = t.grad(self);
    for (Eigen::Index r = 0; r < g.rows(); ++r)
      if (!mask[r]) g.row(r).setZero();
    t.accumulate(ia, g);
  });
}

template <class S>
Var<S> sigmoid(Var<S> a) {
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().unaryExpr([](S x) { return S(1) / (S(1) + std::exp(-x)); });
  int ia = a.id;
  return t.make(std::move(out), {a}, [ia](Tape<S>& t, int self) {
    const Mat<S>& y = t.value(self);
    t.accumulate(ia, t.grad(self).cwiseProduct(y.cwiseProduct((S(1) - y.array()).matrix())));
  });
}

// tanh-approximated GELU.
template <class S>
Var<S> gelu(Var<S> a) {
  Tape<S>& t = *a.tape;
  const S c = static_cast<S>(std::sqrt(2.0 / M_PI));
  const S k = static_cast<S>(0.044715);
  Mat<S> out = a.value().unaryExpr([=](S x) { return S(0.5) * x * (S(1) + std::tanh(c * (x + k * x * x * x))); });
  int ia = a.id;
  return t.make(std::move(out), {a}, [ia, c, k](Tape<S>& t, int self) {
    const Mat<S>& x = t.value(ia);
    Mat<S> d = x.unaryExpr([=](S v) {
      S u = c * (v + k * v * v * v);
      S th = std::tanh(u);
      return S(0.5) * (S(1) + th) + S(0.5) * v * (S(1) - th * th) * c * (S(1) + S(3) * k * v * v);
    });
    t.accumulate(ia, t.grad(self).cwiseProduct(d));
  });
}

// Per-row layer normalisation with gain and bias rows (1 x cols).
template <class S>
Var<S> layer_norm(Var<S> x, Var<S> gain, Var<S> bias, S eps = S(1e-5)) {
  Tape<S>& t = *x.tape;
  const Mat<S>& xv = x.value();
  const Eigen::Index n = xv.cols();
  Mat<S> xhat(xv.rows(), n);
  RowVec<S> inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    S mean = xv.row(r).mean();
    S var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Mat<S> out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  int ix = x.id, ig = gain.id, ib = bias.id;
  return t.make(std::move(out), {x, gain, bias}, [ix, ig, ib, xhat, inv_std](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
    if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
    if (t.requires_grad(ix)) {
      const auto& gain_v = t.value(ig);
      Mat<S> dxhat = g.array().rowwise() * gain_v.row(0).array();
      const S n = static_cast<S>(dxhat.cols());
      Mat<S> dx(dxhat.rows(), dxhat.cols());
      for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
        S m1 = dxhat.row(r).mean();
        S m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).sum() / n;
        dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
      }
      t.accumulate(ix, dx);
    }
  });
}

// Row softmax restricted to columns whose key_mask is 1. Rows with no
// unmasked column produce all-zero weights.
template <class S>
Var<S> masked_softmax(Var<S> scores, const MaskRow& key_mask) {
  Tape<S>& t = *scores.tape;
  const Mat<S>& sv = scores.value();
  if (static_cast<Eigen::Index>(key_mask.size()) != sv.cols()) throw ValidationError("masked_softmax: mask length mismatch");
  Mat<S> p = Mat<S>::Zero(sv.rows(), sv.cols());
  for (Eigen::Index r = 0; r < sv.rows(); ++r) {
    S mx = -std::numeric_limits<S>::infinity();
    for (Eigen::Index c = 0; c < sv.cols(); ++c)
      if (key_mask[c]) mx = std::max(mx, sv(r, c));
    if (mx == -std::numeric_limits<S>::infinity()) continue;
    S z = 0;
    for (Eigen::Index c = 0; c < sv.cols(); ++c)
      if (key_mask[c]) z += (p(r, c) = std::exp(sv(r, c) - mx));
    p.row(r) /= z;
  }
  int is = scores.id;
  return t.make(std::move(p), {scores}, [is](Tape<S>& t, int self) {
    const Mat<S>& y = t.value(self);
    const Mat<S>& g = t.grad(self);
    Mat<S> gy = g.cwiseProduct(y);
    RowVec<S> dots = gy.rowwise().sum().transpose();
    Mat<S> ds = gy - (y.array().colwise() * dots.transpose().array()).matrix();
    t.accumulate(is, ds);
  });
}

template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  Tape<S>& t = *parts.front().tape;
  Eigen::Index rows = 0, cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ValidationError("concat_rows: width mismatch");
    rows += p.rows();
  }
  Mat<S> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    spans.emplace_back(p.id, off);
    off += p.rows();
  }
  return t.make(std::move(out), parts, [spans](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    for (auto [id, o] : spans) {
      if (t.requires_grad(id)) t.accumulate(id, g.middleRows(o, t.value(id).rows()));
    }
  });
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  Tape<S>& t = *parts.front().tape;
  Eigen::Index rows = parts.front().rows(), cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ValidationError("concat_cols: height mismatch");
    cols += p.cols();
  }
  Mat<S> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    spans.emplace_back(p.id, off);
    off += p.cols();
  }
  return t.make(std::move(out), parts, [spans](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    for (auto [id, o] : spans) {
      if (t.requires_grad(id)) t.accumulate(id, g.middleCols(o, t.value(id).cols()));
    }
  });
}

template <class S>
Var<S> slice_cols(Var<S> a, Eigen::Index start, Eigen::Index count) {
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().middleCols(start, count);
  int ia = a.id;
  return t.make(std::move(out), {a}, [ia, start, count](Tape<S>& t, int self) {
    if (!t.requires_grad(ia)) return;
    t.grad(ia).middleCols(start, count) += t.grad(self);
  });
}

template <class S>
Var<S> slice_rows(Var<S> a, Eigen::Index start, Eigen::Index count) {
  Tape<S>& t = *a.tape;
  Mat<S> out = a.value().middleRows(start, count);
  int ia = a.id;
  return t.make(std::move(out), {a}, [ia, start, count](Tape<S>& t, int self) {
    if (!t.requires_grad(ia)) return;
    t.grad(ia).middleRows(start, count) += t.grad(self);
  });
}

// Row gather: out[l] = table[ids[l]]. Backward scatter-adds into the table.
template <class S>
Var<S> gather_rows(Var<S> table, const IdRow& ids) {
  Tape<S>& t = *table.tape;
  const Mat<S>& tv = table.value();
  Mat<S> out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t l = 0; l < ids.size(); ++l) {
    if (ids[l] < 0 || ids[l] >= tv.rows()) {
      throw IndexError("gather_rows: id " + std::to_string(ids[l]) + " at position " + std::to_string(l) +
                       " outside [0, " + std::to_string(tv.rows() - 1) + "]");
    }
    out.row(static_cast<Eigen::Index>(l)) = tv.row(ids[l]);
  }
  int it = table.id;
  return t.make(std::move(out), {table}, [it, ids](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    Mat<S>& dt = t.grad(it);
    for (std::size_t l = 0; l < ids.size(); ++l) dt.row(ids[l]) += g.row(static_cast<Eigen::Index>(l));
  });
}

// Mean over rows with mask 1; all-masked input gives a zero row.
template <class S>
Var<S> mean_pool(Var<S> x, const MaskRow& mask) {
  Tape<S>& t = *x.tape;
  const Mat<S>& xv = x.value();
  if (static_cast<Eigen::Index>(mask.size()) != xv.rows()) throw ValidationError("mean_pool: mask length mismatch");
  Mat<S> out = Mat<S>::Zero(1, xv.cols());
  int n = mask_count(mask);
  for (Eigen::Index r = 0; r < xv.rows(); ++r)
    if (mask[r]) out.row(0) += xv.row(r);
  if (n > 0) out /= static_cast<S>(n);
  int ix = x.id;
  return t.make(std::move(out), {x}, [ix, mask, n](Tape<S>& t, int self) {
    if (n == 0) return;
    const Mat<S>& g = t.grad(self);
    Mat<S>& dx = t.grad(ix);
    for (Eigen::Index r = 0; r < dx.rows(); ++r)
      if (mask[r]) dx.row(r) += g.row(0) / static_cast<S>(n);
  });
}

// Sum over rows (mask 1) of squared L2 norms; 1 x 1.
template <class S>
Var<S> masked_sq_norm(Var<S> x, const MaskRow& mask) {
  Tape<S>& t = *x.tape;
  const Mat<S>& xv = x.value();
  S acc = 0;
  for (Eigen::Index r = 0; r < xv.rows(); ++r)
    if (mask[r]) acc += xv.row(r).squaredNorm();
  Mat<S> out(1, 1);
  out(0, 0) = acc;
  int ix = x.id;
  return t.make(std::move(out), {x}, [ix, mask](Tape<S>& t, int self) {
    const S g = t.grad(self)(0, 0);
    Mat<S> dx = t.value(ix) * (S(2) * g);
    for (Eigen::Index r = 0; r < dx.rows(); ++r)
      if (!mask[r]) dx.row(r).setZero();
    t.accumulate(ix, dx);
  });
}

template <class S>
Var<S> sum_all(Var<S> x) {
  Tape<S>& t = *x.tape;
  Mat<S> out(1, 1);
  out(0, 0) = x.value().sum();
  int ix = x.id;
  return t.make(std::move(out), {x}, [ix](Tape<S>& t, int self) {
    const Mat<S>& xv = t.value(ix);
    t.accumulate(ix, Mat<S>::Constant(xv.rows(), xv.cols(), t.grad(self)(0, 0)));
  });
}

template <class S>
Var<S> add_all(const std::vector<Var<S>>& terms) {
  Var<S> acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

// Cross-entropy of a 1 x N logit row against `target`, computed with a
// stable log-sum-exp. Column 0 (padding) is excluded from the partition sum.
template <class S>
Var<S> cross_entropy(Var<S> logits, int target) {
  Tape<S>& t = *logits.tape;
  const Mat<S>& z = logits.value();
  const Eigen::Index n = z.cols();
  if (target < 1 || target >= n) throw IndexError("cross_entropy: target " + std::to_string(target) + " out of range");
  S mx = z.row(0).tail(n - 1).maxCoeff();
  S sum = (z.row(0).tail(n - 1).array() - mx).exp().sum();
  S lse = mx + std::log(sum);
  Mat<S> out(1, 1);
  out(0, 0) = lse - z(0, target);
  int iz = logits.id;
  return t.make(std::move(out), {logits}, [iz, target, lse](Tape<S>& t, int self) {
    const S g = t.grad(self)(0, 0);
    const Mat<S>& z = t.value(iz);
    Mat<S> d = (z.array() - lse).exp().matrix() * g;
    d(0, 0) = 0;
    d(0, target) -= g;
    t.accumulate(iz, d);
  });
}

// Rows scaled to unit L2 norm; zero rows stay zero.
template <class S>
Var<S> normalize_rows(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Mat<S>& xv = x.value();
  Mat<S> out = xv;
  RowVec<S> norms(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    norms(r) = xv.row(r).norm();
    if (norms(r) > S(0)) out.row(r) /= norms(r);
  }
  int ix = x.id;
  return t.make(std::move(out), {x}, [ix, norms](Tape<S>& t, int self) {
    const Mat<S>& y = t.value(self);
    const Mat<S>& g = t.grad(self);
    Mat<S> dx = Mat<S>::Zero(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      if (norms(r) == S(0)) continue;
      S dot = g.row(r).dot(y.row(r));
      dx.row(r) = (g.row(r) - dot * y.row(r)) / norms(r);
    }
    t.accumulate(ix, dx);
  });
}

// Multi-head scaled dot-product attention in one node. Query row r may
// attend key c iff key_mask[c] is set and, when segment ids are given,
// q_seg[r] == k_seg[c]. Rows with no admissible key get zero output.
template <class S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v, int heads, const MaskRow& key_mask,
                 const std::vector<int>& q_seg = {}, const std::vector<int>& k_seg = {}) {
  Tape<S>& t = *q.tape;
  const Mat<S>& Q = q.value();
  const Mat<S>& K = k.value();
  const Mat<S>& V = v.value();
  const Eigen::Index lq = Q.rows(), lk = K.rows(), width = Q.cols();
  if (K.cols() != width || V.cols() != width || V.rows() != lk) throw ValidationError("attention: shape mismatch");
  if (static_cast<Eigen::Index>(key_mask.size()) != lk) throw ValidationError("attention: mask length mismatch");
  const bool segmented = !q_seg.empty();
  if (segmented && (static_cast<Eigen::Index>(q_seg.size()) != lq || static_cast<Eigen::Index>(k_seg.size()) != lk)) {
    throw ValidationError("attention: segment length mismatch");
  }
  const Eigen::Index dh = width / heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  auto allowed = [&](Eigen::Index r, Eigen::Index c) {
    return key_mask[c] && (!segmented || q_seg[r] == k_seg[c]);
  };
  std::vector<Mat<S>> probs(heads);
  Mat<S> out = Mat<S>::Zero(lq, width);
  for (int h = 0; h < heads; ++h) {
    Mat<S> s = (Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose()) * scale;
    Mat<S>& p = probs[h];
    p = Mat<S>::Zero(lq, lk);
    for (Eigen::Index r = 0; r < lq; ++r) {
      S mx = -std::numeric_limits<S>::infinity();
      for (Eigen::Index c = 0; c < lk; ++c)
        if (allowed(r, c)) mx = std::max(mx, s(r, c));
      if (mx == -std::numeric_limits<S>::infinity()) continue;
      S z = 0;
      for (Eigen::Index c = 0; c < lk; ++c)
        if (allowed(r, c)) z += (p(r, c) = std::exp(s(r, c) - mx));
      p.row(r) /= z;
    }
    out.middleCols(h * dh, dh).noalias() = p * V.middleCols(h * dh, dh);
  }
  int iq = q.id, ik = k.id, iv = v.id;
  return t.make(std::move(out), {q, k, v}, [iq, ik, iv, probs, heads, dh, scale](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    const Mat<S>& Q = t.value(iq);
    const Mat<S>& K = t.value(ik);
    const Mat<S>& V = t.value(iv);
    const bool gq = t.requires_grad(iq), gk = t.requires_grad(ik), gv = t.requires_grad(iv);
    Mat<S> dQ, dK, dV;
    if (gq) dQ = Mat<S>::Zero(Q.rows(), Q.cols());
    if (gk) dK = Mat<S>::Zero(K.rows(), K.cols());
    if (gv) dV = Mat<S>::Zero(V.rows(), V.cols());
    for (int h = 0; h < heads; ++h) {
      const Mat<S>& p = probs[h];
      auto gh = g.middleCols(h * dh, dh);
      if (gv) dV.middleCols(h * dh, dh).noalias() = p.transpose() * gh;
      if (!gq && !gk) continue;
      Mat<S> dp = gh * V.middleCols(h * dh, dh).transpose();
      Mat<S> ds = p.cwiseProduct(dp);
      Eigen::Matrix<S, Eigen::Dynamic, 1> dots = ds.rowwise().sum();
      ds -= (p.array().colwise() * dots.array()).matrix();
      ds *= scale;
      if (gq) dQ.middleCols(h * dh, dh).noalias() = ds * K.middleCols(h * dh, dh);
      if (gk) dK.middleCols(h * dh, dh).noalias() = ds.transpose() * Q.middleCols(h * dh, dh);
    }
    if (gq) t.accumulate(iq, dQ);
    if (gk) t.accumulate(ik, dK);
    if (gv) t.accumulate(iv, dV);
  });
}

// out.row(r) = a[r] * x.row(r) + b[r] * y.row(r)
template <class S>
Var<S> row_lincomb(Var<S> x, const std::vector<S>& a, Var<S> y, const std::vector<S>& b) {
  Tape<S>& t = *x.tape;
  const Mat<S>& X = x.value();
  const Mat<S>& Y = y.value();
  if (X.rows() != Y.rows() || X.cols() != Y.cols()) throw ValidationError("row_lincomb: shape mismatch");
  Mat<S> out(X.rows(), X.cols());
  for (Eigen::Index r = 0; r < X.rows(); ++r) out.row(r) = a[r] * X.row(r) + b[r] * Y.row(r);
  int ix = x.id, iy = y.id;
  return t.make(std::move(out), {x, y}, [ix, iy, a, b](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.requires_grad(ix)) {
      Mat<S> d = g;
      for (Eigen::Index r = 0; r < d.rows(); ++r) d.row(r) *= a[r];
      t.accumulate(ix, d);
    }
    if (t.requires_grad(iy)) {
      Mat<S> d = g;
      for (Eigen::Index r = 0; r < d.rows(); ++r) d.row(r) *= b[r];
      t.accumulate(iy, d);
    }
  });
}

// ca * a + cb * b
template <class S>
Var<S> lincomb(Var<S> a, S ca, Var<S> b, S cb) {
  Tape<S>& t = *a.tape;
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ValidationError("lincomb: shape mismatch");
  Mat<S> out = ca * a.value() + cb * b.value();
  int ia = a.id, ib = b.id;
  return t.make(std::move(out), {a, b}, [ia, ib, ca, cb](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * ca);
    if (t.requires_grad(ib)) t.accumulate(ib, g * cb);
  });
}

// sum_r w[r] * |x.row(r) - y.row(r)|^2
template <class S>
Var<S> weighted_sq_dist(Var<S> x, Var<S> y, std::vector<S> w) {
  Tape<S>& t = *x.tape;
  const Mat<S>& X = x.value();
  if (y.rows() != X.rows() || y.cols() != X.cols()) throw ValidationError("weighted_sq_dist: shape mismatch");
  if (static_cast<Eigen::Index>(w.size()) != X.rows()) throw ValidationError("weighted_sq_dist: weight length");
  Mat<S> diff = X - y.value();
  S total = 0;
  for (Eigen::Index r = 0; r < diff.rows(); ++r) total += w[r] * diff.row(r).squaredNorm();
  Mat<S> out(1, 1);
  out(0, 0) = total;
  int ix = x.id, iy = y.id;
  return t.make(std::move(out), {x, y}, [ix, iy, diff = std::move(diff), w = std::move(w)](Tape<S>& t, int self) {
    const S g = t.grad(self)(0, 0);
    Mat<S> d = diff;
    for (Eigen::Index r = 0; r < d.rows(); ++r) d.row(r) *= 2 * g * w[r];
    if (t.requires_grad(ix)) t.accumulate(ix, d);
    if (t.requires_grad(iy)) t.accumulate(iy, -d);
  });
}

// Stacks T blocks of x's shape: block i = a[i] * x + b[i] * noise block i.
// noise is a constant [T * rows x cols].
template <class S>
Var<S> tile_lincomb(Var<S> x, const std::vector<S>& a, const Mat<S>& noise, const std::vector<S>& b) {
  Tape<S>& t = *x.tape;
  const Mat<S>& X = x.value();
  const Eigen::Index n = X.rows(), blocks = static_cast<Eigen::Index>(a.size());
  if (noise.rows() != n * blocks || noise.cols() != X.cols() || b.size() != a.size()) {
    throw ValidationError("tile_lincomb: shape mismatch");
  }
  Mat<S> out(n * blocks, X.cols());
  for (Eigen::Index i = 0; i < blocks; ++i) out.middleRows(i * n, n) = a[i] * X + b[i] * noise.middleRows(i * n, n);
  int ix = x.id;
  return t.make(std::move(out), {x}, [ix, a, n](Tape<S>& t, int self) {
    const Mat<S>& g = t.grad(self);
    Mat<S> d = Mat<S>::Zero(n, g.cols());
    for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * g.middleRows(static_cast<Eigen::Index>(i) * n, n);
    t.accumulate(ix, d);
  });
}

}  // namespace ops
}  // namespace m3bsr
