#pragma once

// The full recommender: modality embeddings, modality-stage and
// behaviour-stage conditional denoising, multi-expert interest extraction,
// gated fusion and the item prediction head.

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "m3bsr/cdmd.hpp"
#include "m3bsr/datamodel.hpp"
#include "m3bsr/features.hpp"
#include "m3bsr/meie.hpp"
#include "m3bsr/nn.hpp"

namespace m3bsr {

struct AblationFlags {
  bool use_cdmd_m = true;
  bool use_cdmd_b = true;
  bool use_meie = true;
  bool use_shared_expert = true;
  bool use_disent = true;

  bool operator==(const AblationFlags&) const = default;
};

struct LossWeights {
  double lambda_c = 0.05;
  double lambda_m = 0.02;
  double lambda_b = 0.02;

  bool operator==(const LossWeights&) const = default;
};

struct ModelConfig {
  int n_items = 0;
  int d_id = 16;
  int d_mod = 512;
  int d_h = 128;
  int heads = 2;
  int expert_depth = 1;
  int ff_width = 0;  // 0 means 2 * d_h
  int seq_len = 50;
  int T = 15;
  double beta_min = 0.001;
  double beta_max = 0.1;
  bool positional = true;
  bool id_post_linear = false;
  bool stop_grad_denoise = false;
  double tau = 0.3;
  DisentangleMode disent_mode = DisentangleMode::kUniformity;
  AblationFlags flags;
  LossWeights weights;
  uint64_t init_seed = 0;

  int ff() const { return ff_width > 0 ? ff_width : 2 * d_h; }
};

template <class S>
struct LossBreakdown {
  S total = 0, main = 0, contrast = 0, modality = 0, behavior = 0;
};

template <class S>
struct ForwardResult {
  Var<S> logits;  // 1 x (n_items + 1)
  Var<S> y;       // fused preference, 1 x d_h
  Var<S> reps;    // pooled interests (7 x d_h, or 6 without the shared expert); invalid without MEIE
  Var<S> total, main, contrast, modality, behavior;  // valid when a target is given and aux losses requested

  LossBreakdown<S> breakdown() const {
    LossBreakdown<S> b;
    b.total = total.scalar();
    b.main = main.scalar();
    b.contrast = contrast.scalar();
    b.modality = modality.scalar();
    b.behavior = behavior.scalar();
    return b;
  }
};

struct ForwardOptions {
  bool aux_losses = true;
  uint64_t noise_seed = 0;
};

template <class S>
class Model {
 public:
  // Behaviour index 0 = click, 1 = favor; modality index follows Modality.
  static constexpr int kCl = 0, kFa = 1;
  static constexpr int kId = 0, kIm = 1, kTe = 2;

  Model(ModelConfig cfg, FeatureMatrix<S> image, FeatureMatrix<S> text)
      : cfg_(std::move(cfg)), image_(std::move(image)), text_(std::move(text)),
        schedule_(make_schedule(cfg_.T, cfg_.beta_min, cfg_.beta_max)) {
    validate();
    std::mt19937_64 rng(cfg_.init_seed);
    const int n = cfg_.n_items, d = cfg_.d_h;
    id_table_ = store_.add("features.id_table", init::normal<S>(n + 1, cfg_.d_id, 0.1, rng), /*pad_row=*/true);
    if (cfg_.id_post_linear) id_post_ = store_.add("features.id_post", init::xavier<S>(cfg_.d_id, cfg_.d_id, rng));
    proj_[kId] = store_.add("proj.id", init::xavier<S>(cfg_.d_id, d, rng));
    proj_[kIm] = store_.add("proj.im", init::xavier<S>(cfg_.d_mod, d, rng));
    proj_[kTe] = store_.add("proj.te", init::xavier<S>(cfg_.d_mod, d, rng));
    den_mod_[0] = register_denoiser(store_, "modality-im", d, cfg_.heads, cfg_.T, rng);
    den_mod_[1] = register_denoiser(store_, "modality-te", d, cfg_.heads, cfg_.T, rng);
    den_beh_[kId] = register_denoiser(store_, "behavior-id", d, cfg_.heads, cfg_.T, rng);
    den_beh_[kIm] = register_denoiser(store_, "behavior-im", d, cfg_.heads, cfg_.T, rng);
    den_beh_[kTe] = register_denoiser(store_, "behavior-te", d, cfg_.heads, cfg_.T, rng);
    ExpertShape shape{d, cfg_.heads, cfg_.ff(), cfg_.expert_depth, cfg_.seq_len, cfg_.positional};
    experts_ = register_experts(store_, shape, rng);
    head_w_ = store_.add("head.w", init::normal<S>(d, n + 1, 1.0 / std::sqrt(static_cast<double>(d)), rng));
    head_b_ = store_.add("head.b", init::zeros<S>(1, n + 1));
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }
  const DiffusionSchedule& schedule() const { return schedule_; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }
  const FeatureMatrix<S>& image() const { return image_; }
  const FeatureMatrix<S>& text() const { return text_; }
  const ExpertBundle& experts() const { return experts_; }
  const ConditionalDenoiser& modality_denoiser(Modality m) const { return den_mod_[m == Modality::kImage ? 0 : 1]; }
  const ConditionalDenoiser& behavior_denoiser(Modality m) const { return den_beh_[static_cast<int>(m)]; }
  int id_table() const { return id_table_; }
  int projection(Modality m) const { return proj_[static_cast<int>(m)]; }
  int head_w() const { return head_w_; }
  int head_b() const { return head_b_; }

  // Projected [L x d_h] sequence of modality m for the given ids.
  Var<S> project(const Binder<S>& bind, Modality m, const IdRow& ids) const {
    Var<S> raw;
    if (m == Modality::kId) {
      raw = embed_id_sequence(bind, id_table_, ids);
      if (id_post_ >= 0) raw = ops::matmul(raw, bind(id_post_));
    } else {
      raw = gather_sequence_features(*bind.tape, m == Modality::kImage ? image_ : text_, ids);
    }
    return ops::matmul(raw, bind(proj_[static_cast<int>(m)]));
  }

  // Padding rows are dropped before any computation; positional embeddings
  // still use each item's original position in the padded window.
  ForwardResult<S> forward(const Binder<S>& bind, const Example& ex, const ForwardOptions& opt = {}) const {
    Tape<S>& tape = *bind.tape;
    const auto& f = cfg_.flags;
    const bool aux = opt.aux_losses && ex.target != kPadId;
    if (static_cast<int>(ex.click_ids.size()) != cfg_.seq_len || static_cast<int>(ex.favor_ids.size()) != cfg_.seq_len ||
        ex.click_mask.size() != ex.click_ids.size() || ex.favor_mask.size() != ex.favor_ids.size()) {
      throw ValidationError("forward: sequence length differs from model seq_len");
    }
    const MaskRow* full_mask[2] = {&ex.click_mask, &ex.favor_mask};
    const IdRow* full_ids[2] = {&ex.click_ids, &ex.favor_ids};
    std::array<IdRow, 2> ids, pos;
    std::array<MaskRow, 2> mask;
    for (int b = 0; b < 2; ++b) {
      for (int l = 0; l < cfg_.seq_len; ++l) {
        if (!(*full_mask[b])[l]) continue;
        ids[b].push_back((*full_ids[b])[l]);
        pos[b].push_back(l);
      }
      mask[b].assign(ids[b].size(), 1);
    }
    const Eigen::Index n[2] = {static_cast<Eigen::Index>(ids[0].size()), static_cast<Eigen::Index>(ids[1].size())};

    // h[b][m]: [n_b x d_h] streams per behaviour and modality.
    std::array<std::array<Var<S>, 3>, 2> h;
    for (int b = 0; b < 2; ++b)
      for (int m = 0; m < 3; ++m) h[b][m] = project(bind, static_cast<Modality>(m), ids[b]);

    auto zero = [&] { return tape.constant(Mat<S>::Zero(1, 1)); };
    ForwardResult<S> r;
    r.modality = zero();
    r.behavior = zero();
    r.contrast = zero();

    // Modality stage: image/text streams conditioned on the same behaviour's
    // ID stream. Both behaviours run together, kept apart by segment ids.
    if (f.use_cdmd_m && n[0] + n[1] > 0) {
      std::vector<int> seg(n[0], 0);
      seg.insert(seg.end(), n[1], 1);
      std::vector<S> weight;
      for (int b = 0; b < 2; ++b) weight.insert(weight.end(), n[b], static_cast<S>(1.0 / std::max<Eigen::Index>(1, n[b])));
      Var<S> cond = ops::concat_rows<S>({h[kCl][kId], h[kFa][kId]});
      std::vector<Var<S>> losses;
      for (int m : {kIm, kTe}) {
        const auto& den = den_mod_[m == kIm ? 0 : 1];
        KeyValues<S> kv = project_kv(bind, cond, MaskRow(seg.size(), 1), den.attn, seg);
        Var<S> in = ops::concat_rows<S>({h[kCl][m], h[kFa][m]});
        Var<S> out = denoise_sequence(bind, in, kv, schedule_, den, seg);
        if (aux) {
          uint64_t seed = derive_seed(opt.noise_seed, {1, static_cast<uint64_t>(m)});
          losses.push_back(recon_loss(bind, in, weight, kv, schedule_, den, seeded_noise<S>(seed), seg));
        }
        h[kCl][m] = ops::slice_rows(out, 0, n[0]);
        h[kFa][m] = ops::slice_rows(out, n[0], n[1]);
      }
      if (aux) r.modality = ops::add_all(losses);
    }

    // Behaviour stage: click streams conditioned on favor streams of the same modality.
    if (f.use_cdmd_b && n[kCl] > 0) {
      std::vector<Var<S>> losses;
      std::vector<S> weight(n[kCl], static_cast<S>(1.0 / n[kCl]));
      for (int m : {kIm, kTe, kId}) {
        const auto& den = den_beh_[m];
        KeyValues<S> kv = project_kv(bind, h[kFa][m], mask[kFa], den.attn);
        Var<S> in = h[kCl][m];
        Var<S> out = denoise_sequence(bind, in, kv, schedule_, den);
        if (aux) {
          uint64_t seed = derive_seed(opt.noise_seed, {2, static_cast<uint64_t>(m)});
          losses.push_back(recon_loss(bind, in, weight, kv, schedule_, den, seeded_noise<S>(seed)));
        }
        h[kCl][m] = out;
      }
      if (aux) r.behavior = ops::add_all(losses);
    }

    if (cfg_.stop_grad_denoise && (f.use_cdmd_m || f.use_cdmd_b)) {
      for (int b = 0; b < 2; ++b)
        for (int m : {kIm, kTe}) h[b][m] = ops::detach(h[b][m]);
      if (f.use_cdmd_b) h[kCl][kId] = ops::detach(h[kCl][kId]);
    }

    if (f.use_meie) {
      std::array<std::array<Var<S>, 3>, 2> pooled;
      for (int b = 0; b < 2; ++b)
        for (int m = 0; m < 3; ++m) pooled[b][m] = extract_unique(bind, h[b][m], mask[b], experts_.unique[b][m], &pos[b]);
      std::array<Var<S>, 3> cl{pooled[kCl][kIm], pooled[kCl][kTe], pooled[kCl][kId]};
      std::array<Var<S>, 3> fa{pooled[kFa][kIm], pooled[kFa][kTe], pooled[kFa][kId]};
      std::vector<Var<S>> rep_list{pooled[kCl][kId], pooled[kCl][kIm], pooled[kCl][kTe],
                                   pooled[kFa][kId], pooled[kFa][kIm], pooled[kFa][kTe]};
      Var<S> common;
      if (f.use_shared_expert) {
        Var<S> cl_seq = ops::concat_rows<S>({h[kCl][kIm], h[kCl][kTe], h[kCl][kId]});
        Var<S> fa_seq = ops::concat_rows<S>({h[kFa][kIm], h[kFa][kTe], h[kFa][kId]});
        IdRow cl_pos;
        for (int blk = 0; blk < 3; ++blk)
          for (int32_t q : pos[kCl]) cl_pos.push_back(blk * cfg_.seq_len + q);
        common = extract_common(bind, cl_seq, MaskRow(cl_pos.size(), 1), fa_seq, MaskRow(3 * n[kFa], 1), experts_, &cl_pos);
        rep_list.push_back(common);
      } else {
        common = tape.constant(Mat<S>::Zero(1, cfg_.d_h));
      }
      r.y = route_fuse(bind, common, cl, fa, experts_.gate, f.use_shared_expert);
      r.reps = ops::concat_rows(rep_list);
      if (aux && f.use_disent && cfg_.weights.lambda_c > 0) {
        r.contrast = disentangle_loss(r.reps, static_cast<S>(cfg_.tau), cfg_.disent_mode, bind.diag);
      }
    } else {
      std::vector<Var<S>> streams;
      for (int b = 0; b < 2; ++b)
        for (int m = 0; m < 3; ++m) streams.push_back(mean_pool(h[b][m], mask[b]));
      r.y = ops::scale(ops::add_all(streams), static_cast<S>(1.0 / 6.0));
    }

    r.logits = ops::add_row(ops::matmul(r.y, bind(head_w_)), bind(head_b_));
    if (ex.target != kPadId) {
      r.main = ops::cross_entropy(r.logits, ex.target);
      const auto& w = cfg_.weights;
      const double lc = f.use_disent ? w.lambda_c : 0.0;
      const double lm = f.use_cdmd_m ? w.lambda_m : 0.0;
      const double lb = f.use_cdmd_b ? w.lambda_b : 0.0;
      std::vector<Var<S>> terms{r.main};
      if (aux) {
        if (lc != 0.0) terms.push_back(ops::scale(r.contrast, static_cast<S>(lc)));
        if (lm != 0.0) terms.push_back(ops::scale(r.modality, static_cast<S>(lm)));
        if (lb != 0.0) terms.push_back(ops::scale(r.behavior, static_cast<S>(lb)));
      }
      r.total = ops::add_all(terms);
      for (Var<S> v : {r.total, r.main, r.contrast, r.modality, r.behavior}) {
        if (!std::isfinite(static_cast<double>(v.scalar()))) {
          throw NumericError(std::string("non-finite loss component: ") + component_name(r, v));
        }
      }
    }
    return r;
  }

  // Inference-only logits for one example.
  RowVec<S> scores(const Example& ex) const {
    Tape<S> tape;
    Binder<S> bind{&tape, &store_, nullptr, nullptr};
    ForwardOptions opt;
    opt.aux_losses = false;
    Example copy = ex;
    copy.target = kPadId;
    return forward(bind, copy, opt).logits.value().row(0);
  }

  // Single-item modality-stage denoising: raw projected features and their
  // denoised counterparts (conditioned on the item's own ID), one row per item.
  std::pair<Mat<S>, Mat<S>> denoise_items(Modality m, const std::vector<int32_t>& items) const {
    if (m == Modality::kId) throw ValidationError("denoise_items: image or text only");
    Mat<S> raw(static_cast<Eigen::Index>(items.size()), cfg_.d_h), den(static_cast<Eigen::Index>(items.size()), cfg_.d_h);
    for (std::size_t i = 0; i < items.size(); ++i) {
      Tape<S> tape;
      Binder<S> bind{&tape, &store_, nullptr, nullptr};
      IdRow ids{items[i]};
      MaskRow mask{1};
      Var<S> in = project(bind, m, ids);
      Var<S> cond = project(bind, Modality::kId, ids);
      Var<S> out = cfg_.flags.use_cdmd_m ? denoise_sequence(bind, in, cond, mask, schedule_, modality_denoiser(m)) : in;
      raw.row(static_cast<Eigen::Index>(i)) = in.value().row(0);
      den.row(static_cast<Eigen::Index>(i)) = out.value().row(0);
    }
    return {raw, den};
  }

  // Projects externally supplied [n x d_mod] features with the learned map.
  Mat<S> project_features(Modality m, const Mat<S>& feats) const {
    return feats * store_[proj_[static_cast<int>(m)]].value;
  }

 private:
  static const char* component_name(const ForwardResult<S>& r, Var<S> v) {
    if (v.id == r.main.id) return "main";
    if (v.id == r.contrast.id) return "contrast";
    if (v.id == r.modality.id) return "modality";
    if (v.id == r.behavior.id) return "behavior";
    return "total";
  }

  void validate() const {
    if (cfg_.n_items < 1) throw ValidationError("model: n_items must be >= 1");
    if (image_.n_items() != cfg_.n_items || text_.n_items() != cfg_.n_items) {
      throw ValidationError("model: feature matrices cover " + std::to_string(image_.n_items()) + "/" +
                            std::to_string(text_.n_items()) + " items, config says " + std::to_string(cfg_.n_items));
    }
    if (image_.dim() != cfg_.d_mod || text_.dim() != cfg_.d_mod) throw ValidationError("model: feature dim != d_mod");
    if (cfg_.d_h % cfg_.heads != 0) throw ValidationError("model: d_h not divisible by heads");
    if (!(cfg_.tau > 0)) throw ValidationError("model: tau must be > 0");
  }

  ModelConfig cfg_;
  FeatureMatrix<S> image_, text_;
  DiffusionSchedule schedule_;
  ParamStore<S> store_;
  int id_table_ = -1, id_post_ = -1;
  std::array<int, 3> proj_{-1, -1, -1};
  std::array<ConditionalDenoiser, 2> den_mod_;
  std::array<ConditionalDenoiser, 3> den_beh_;
  ExpertBundle experts_;
  int head_w_ = -1, head_b_ = -1;
};

}  // namespace m3bsr
