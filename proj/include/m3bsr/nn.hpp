#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "m3bsr/autograd.hpp"

namespace m3bsr {

// Counters for the defined fallbacks (empty attention rows, zero-norm
// cosine operands, empty conditioning sequences).
struct Diagnostics {
  int64_t empty_kv_rows = 0;
  int64_t zero_norm_reps = 0;
  int64_t empty_conditions = 0;

  void merge(const Diagnostics& o) {
    empty_kv_rows += o.empty_kv_rows;
    zero_norm_reps += o.zero_norm_reps;
    empty_conditions += o.empty_conditions;
  }
};

// Binds parameters of one store onto one tape. grads may be null for
// inference-only passes.
template <class S>
struct Binder {
  Tape<S>* tape;
  const ParamStore<S>* store;
  GradBuffer<S>* grads = nullptr;
  Diagnostics* diag = nullptr;

  Var<S> operator()(int index) const { return tape->param(*store, index, grads); }
  Var<S> constant(Mat<S> m) const { return tape->constant(std::move(m)); }
};

struct AttentionParams {
  int w_q = -1, w_k = -1, w_v = -1, w_o = -1;
  int heads = 1;
  int width = 0;
};

struct TransformerLayerParams {
  AttentionParams attn;
  int ln1_g = -1, ln1_b = -1, ln2_g = -1, ln2_b = -1;
  int ff_w1 = -1, ff_b1 = -1, ff_w2 = -1, ff_b2 = -1;
};

struct TransformerParams {
  std::vector<TransformerLayerParams> layers;
  int pos = -1;  // learned positional table [max_len x width], -1 when disabled
};

template <class S>
AttentionParams register_attention(ParamStore<S>& store, const std::string& prefix, int width, int heads,
                                   std::mt19937_64& rng, bool zero_output = false) {
  if (heads < 1 || width % heads != 0) {
    throw ValidationError(prefix + ": width " + std::to_string(width) + " not divisible by heads " +
                          std::to_string(heads));
  }
  AttentionParams a;
  a.heads = heads;
  a.width = width;
  a.w_q = store.add(prefix + ".w_q", init::xavier<S>(width, width, rng));
  a.w_k = store.add(prefix + ".w_k", init::xavier<S>(width, width, rng));
  a.w_v = store.add(prefix + ".w_v", init::xavier<S>(width, width, rng));
  a.w_o = store.add(prefix + ".w_o", zero_output ? init::zeros<S>(width, width) : init::xavier<S>(width, width, rng));
  return a;
}

template <class S>
TransformerLayerParams register_transformer_layer(ParamStore<S>& store, const std::string& prefix, int width,
                                                  int heads, int ff_width, std::mt19937_64& rng) {
  TransformerLayerParams p;
  p.attn = register_attention(store, prefix + ".attn", width, heads, rng);
  p.ln1_g = store.add(prefix + ".ln1.g", init::ones<S>(1, width));
  p.ln1_b = store.add(prefix + ".ln1.b", init::zeros<S>(1, width));
  p.ln2_g = store.add(prefix + ".ln2.g", init::ones<S>(1, width));
  p.ln2_b = store.add(prefix + ".ln2.b", init::zeros<S>(1, width));
  p.ff_w1 = store.add(prefix + ".ff.w1", init::xavier<S>(width, ff_width, rng));
  p.ff_b1 = store.add(prefix + ".ff.b1", init::zeros<S>(1, ff_width));
  p.ff_w2 = store.add(prefix + ".ff.w2", init::xavier<S>(ff_width, width, rng));
  p.ff_b2 = store.add(prefix + ".ff.b2", init::zeros<S>(1, width));
  return p;
}

template <class S>
TransformerParams register_transformer(ParamStore<S>& store, const std::string& prefix, int width, int heads,
                                       int ff_width, int depth, int max_len, bool positional,
                                       std::mt19937_64& rng) {
  TransformerParams p;
  for (int l = 0; l < depth; ++l) {
    p.layers.push_back(
        register_transformer_layer(store, prefix + ".layer" + std::to_string(l), width, heads, ff_width, rng));
  }
  if (positional) p.pos = store.add(prefix + ".pos", init::normal<S>(max_len, width, 0.02, rng));
  return p;
}

template <class S>
Var<S> linear(Var<S> x, Var<S> w) {
  return ops::matmul(x, w);
}

template <class S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
  return ops::add_row(ops::matmul(x, w), b);
}

// Keys and values projected once so several query sets can reuse them.
// Optional segment ids restrict each query row to keys of its own segment.
template <class S>
struct KeyValues {
  Var<S> k, v;
  MaskRow mask;
  std::vector<int> seg;
};

template <class S>
KeyValues<S> project_kv(const Binder<S>& bind, Var<S> kv, const MaskRow& kv_mask, const AttentionParams& p,
                        std::vector<int> seg = {}) {
  if (kv.cols() != p.width) throw ValidationError("cross_attention: width mismatch");
  if (static_cast<Eigen::Index>(kv_mask.size()) != kv.rows()) throw ValidationError("cross_attention: mask length");
  return {ops::matmul(kv, bind(p.w_k)), ops::matmul(kv, bind(p.w_v)), kv_mask, std::move(seg)};
}

// Multi-head scaled dot-product attention of query rows over projected keys.
// Each head uses scale 1/sqrt(width/heads). Query rows with no admissible key
// get a zero mixture (and are counted in diag->empty_kv_rows).
template <class S>
Var<S> attend(const Binder<S>& bind, Var<S> query, const KeyValues<S>& kv, const AttentionParams& p,
              const std::vector<int>& q_seg = {}) {
  if (query.cols() != p.width) throw ValidationError("cross_attention: width mismatch");
  if (bind.diag) {
    const bool segmented = !q_seg.empty();
    for (Eigen::Index r = 0; r < query.rows(); ++r) {
      bool any = false;
      for (std::size_t c = 0; c < kv.mask.size() && !any; ++c) any = kv.mask[c] && (!segmented || kv.seg[c] == q_seg[r]);
      if (!any) ++bind.diag->empty_kv_rows;
    }
  }
  Var<S> q = ops::matmul(query, bind(p.w_q));
  return ops::matmul(ops::attention(q, kv.k, kv.v, p.heads, kv.mask, q_seg, kv.seg), bind(p.w_o));
}

template <class S>
Var<S> cross_attention(const Binder<S>& bind, Var<S> query, Var<S> kv, const MaskRow& kv_mask,
                       const AttentionParams& p) {
  return attend(bind, query, project_kv(bind, kv, kv_mask, p), p);
}

// One pre-norm block: x + Attn(LN(x)), then + FFN(LN(.)). Masked rows are
// excluded as keys and their residual updates are zeroed.
template <class S>
Var<S> transformer_layer(const Binder<S>& bind, Var<S> x, const MaskRow& mask, const TransformerLayerParams& p) {
  Var<S> a_in = ops::layer_norm(x, bind(p.ln1_g), bind(p.ln1_b));
  Var<S> a = cross_attention(bind, a_in, a_in, mask, p.attn);
  Var<S> x1 = ops::add(x, ops::mask_rows(a, mask));
  Var<S> f_in = ops::layer_norm(x1, bind(p.ln2_g), bind(p.ln2_b));
  Var<S> f = linear(ops::gelu(linear(f_in, bind(p.ff_w1), bind(p.ff_b1))), bind(p.ff_w2), bind(p.ff_b2));
  return ops::add(x1, ops::mask_rows(f, mask));
}

// positions, when given, names the positional-table row of each input row
// (used when padding rows have been dropped); otherwise row i uses entry i.
template <class S>
Var<S> transformer_encode(const Binder<S>& bind, Var<S> x, const MaskRow& mask, const TransformerParams& p,
                          const IdRow* positions = nullptr) {
  if (!x.value().allFinite()) throw NumericError("transformer_encode: non-finite input");
  if (p.pos >= 0) {
    Var<S> table = bind(p.pos);
    Var<S> pos;
    if (positions) {
      if (static_cast<Eigen::Index>(positions->size()) != x.rows()) throw ValidationError("transformer_encode: positions length");
      for (int32_t q : *positions)
        if (q < 0 || q >= table.rows()) throw ValidationError("transformer_encode: position outside positional table");
      pos = ops::gather_rows(table, *positions);
    } else {
      if (table.rows() < x.rows()) throw ValidationError("transformer_encode: sequence longer than positional table");
      pos = ops::slice_rows(table, 0, x.rows());
    }
    x = ops::add(x, ops::mask_rows(pos, mask));
  }
  for (const auto& layer : p.layers) x = transformer_layer(bind, x, mask, layer);
  return x;
}

template <class S>
Var<S> mean_pool(Var<S> x, const MaskRow& mask) {
  return ops::mean_pool(x, mask);
}

}  // namespace m3bsr
