#pragma once

// Multi-expert interest extraction: a shared cross-behaviour expert, six
// per-(behaviour, modality) experts, contrastive disentanglement over the
// seven pooled interests, and sigmoid-gated fusion.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "m3bsr/nn.hpp"

namespace m3bsr {

enum class DisentangleMode { kLiteral, kUniformity };

inline const char* disentangle_mode_token(DisentangleMode m) {
  return m == DisentangleMode::kLiteral ? "literal" : "uniformity";
}

inline DisentangleMode parse_disentangle_mode(const std::string& s) {
  if (s == "literal") return DisentangleMode::kLiteral;
  if (s == "uniformity") return DisentangleMode::kUniformity;
  throw ValidationError("unknown disentanglement mode '" + s + "'");
}

struct RoutingGate {
  int w_g = -1;  // [7d x d]
  int b_g = -1;  // [1 x d]
  int proj = -1; // [6d x d], specific branch
};

struct ExpertBundle {
  AttentionParams share_attn;
  TransformerParams common;
  // unique[behaviour][modality], modality indexed by Modality (id, im, te).
  std::array<std::array<TransformerParams, 3>, 2> unique;
  RoutingGate gate;
};

struct ExpertShape {
  int width = 128;
  int heads = 2;
  int ff_width = 256;
  int depth = 1;
  int seq_len = 50;
  bool positional = true;
};

template <class S>
ExpertBundle register_experts(ParamStore<S>& store, const ExpertShape& shape, std::mt19937_64& rng) {
  ExpertBundle e;
  const int d = shape.width;
  e.share_attn = register_attention(store, "meie.share.attn", d, shape.heads, rng);
  e.common = register_transformer(store, "meie.common", d, shape.heads, shape.ff_width, shape.depth, 3 * shape.seq_len,
                                  shape.positional, rng);
  const char* bname[2] = {"cl", "fa"};
  const char* mname[3] = {"id", "im", "te"};
  for (int b = 0; b < 2; ++b) {
    for (int m = 0; m < 3; ++m) {
      e.unique[b][m] = register_transformer(store, std::string("meie.unique.") + bname[b] + "." + mname[m], d,
                                            shape.heads, shape.ff_width, shape.depth, shape.seq_len, shape.positional,
                                            rng);
    }
  }
  e.gate.w_g = store.add("meie.gate.w_g", init::xavier<S>(7 * d, d, rng));
  e.gate.b_g = store.add("meie.gate.b_g", init::zeros<S>(1, d));
  e.gate.proj = store.add("meie.gate.proj", init::xavier<S>(6 * d, d, rng));
  return e;
}

// Common interest: query = click tokens, key/value = favor tokens, then the
// shared transformer expert and masked mean pooling over click positions.
template <class S>
Var<S> extract_common(const Binder<S>& bind, Var<S> cl_seq, const MaskRow& cl_mask, Var<S> fa_seq,
                      const MaskRow& fa_mask, const ExpertBundle& e, const IdRow* cl_positions = nullptr) {
  Var<S> share = ops::mask_rows(cross_attention(bind, cl_seq, fa_seq, fa_mask, e.share_attn), cl_mask);
  return mean_pool(transformer_encode(bind, share, cl_mask, e.common, cl_positions), cl_mask);
}

template <class S>
Var<S> extract_unique(const Binder<S>& bind, Var<S> seq, const MaskRow& mask, const TransformerParams& expert,
                      const IdRow* positions = nullptr) {
  return mean_pool(transformer_encode(bind, seq, mask, expert, positions), mask);
}

// Loss over the cosine Gram matrix of K representations (rows of `reps`).
//   literal:    -sum_{i != j} log softmax_{k != i}(sim_ik / tau)_j
//   uniformity:  sum_i log sum_{k != i} exp(sim_ik / tau)
// Zero-norm rows have cosine 0 with everything (counted in diag).
template <class S>
Var<S> disentangle_loss(Var<S> reps, S tau, DisentangleMode mode, Diagnostics* diag = nullptr) {
  if (!(tau > S(0))) throw ValidationError("disentangle_loss: tau must be > 0");
  const Eigen::Index K = reps.rows();
  if (K < 2) throw ValidationError("disentangle_loss: need at least two representations");
  if (diag) {
    for (Eigen::Index r = 0; r < K; ++r)
      if (reps.value().row(r).norm() == S(0)) ++diag->zero_norm_reps;
  }
  Var<S> unit = ops::normalize_rows(reps);
  Var<S> gram = ops::matmul_nt(unit, unit);
  Tape<S>& t = *reps.tape;
  const Mat<S>& G = gram.value();
  Mat<S> soft = Mat<S>::Zero(K, K);
  S loss = 0;
  for (Eigen::Index i = 0; i < K; ++i) {
    S mx = -std::numeric_limits<S>::infinity();
    for (Eigen::Index k = 0; k < K; ++k)
      if (k != i) mx = std::max(mx, G(i, k) / tau);
    S z = 0;
    for (Eigen::Index k = 0; k < K; ++k)
      if (k != i) z += (soft(i, k) = std::exp(G(i, k) / tau - mx));
    soft.row(i) /= z;
    const S lse = mx + std::log(z);
    if (mode == DisentangleMode::kUniformity) {
      loss += lse;
    } else {
      for (Eigen::Index j = 0; j < K; ++j)
        if (j != i) loss -= G(i, j) / tau - lse;
    }
  }
  Mat<S> out(1, 1);
  out(0, 0) = loss;
  const int ig = gram.id;
  return t.make(std::move(out), {gram}, [ig, soft, tau, mode, K](Tape<S>& t, int self) {
    const S g = t.grad(self)(0, 0);
    Mat<S> dG = Mat<S>::Zero(K, K);
    for (Eigen::Index i = 0; i < K; ++i) {
      for (Eigen::Index j = 0; j < K; ++j) {
        if (i == j) continue;
        if (mode == DisentangleMode::kUniformity) {
          dG(i, j) = soft(i, j) / tau;
        } else {
          dG(i, j) = (static_cast<S>(K - 1) * soft(i, j) - S(1)) / tau;
        }
      }
    }
    t.accumulate(ig, dG * g);
  });
}

// y = g * h_common + (1 - g) * P [h_cl; h_fa], g = sigmoid(W_g [h_common; h_cl; h_fa] + b_g).
// cl and fa are ordered (im, te, id). With use_common = false the gate is
// fixed at 0 and h_common is dropped.
template <class S>
Var<S> route_fuse(const Binder<S>& bind, Var<S> common, const std::array<Var<S>, 3>& cl,
                  const std::array<Var<S>, 3>& fa, const RoutingGate& gate, bool use_common = true) {
  Var<S> specific_in = ops::concat_cols<S>({cl[0], cl[1], cl[2], fa[0], fa[1], fa[2]});
  Var<S> specific = ops::matmul(specific_in, bind(gate.proj));
  if (!use_common) return specific;
  Var<S> gate_in = ops::concat_cols<S>({common, specific_in});
  Var<S> g = ops::sigmoid(linear(gate_in, bind(gate.w_g), bind(gate.b_g)));
  Var<S> one_minus_g = ops::affine(g, S(-1), S(1));
  return ops::add(ops::mul(g, common), ops::mul(one_minus_g, specific));
}

template <class S>
Var<S> gate_values(const Binder<S>& bind, Var<S> common, const std::array<Var<S>, 3>& cl,
                   const std::array<Var<S>, 3>& fa, const RoutingGate& gate) {
  Var<S> gate_in = ops::concat_cols<S>({common, cl[0], cl[1], cl[2], fa[0], fa[1], fa[2]});
  return ops::sigmoid(linear(gate_in, bind(gate.w_g), bind(gate.b_g)));
}

}  // namespace m3bsr
