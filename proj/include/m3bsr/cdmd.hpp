#pragma once

// Conditional diffusion denoising of feature sequences.
//
// Forward noising uses the reparameterised one-step form
//   h_t = sqrt(alpha_t) h + sqrt(1 - alpha_t) eps,
// reverse steps are the deterministic mean update
//   h_{t-1} = (h_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t),
// and eps_hat comes from a cross-attention estimator whose keys and values
// are the conditioning sequence.

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "m3bsr/nn.hpp"
#include "m3bsr/rng.hpp"

namespace m3bsr {

struct DiffusionSchedule {
  int T = 0;
  std::vector<double> beta;       // beta[t-1] for t = 1..T
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // cumulative product

  double beta_at(int t) const { return beta.at(t - 1); }
  double alpha_at(int t) const { return alpha.at(t - 1); }
  // alpha_bar_at(0) == 1 by convention.
  double alpha_bar_at(int t) const { return t == 0 ? 1.0 : alpha_bar.at(t - 1); }

  void check_step(int t) const {
    if (t < 1 || t > T) throw ValidationError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  }

  static DiffusionSchedule from_betas(std::vector<double> betas) {
    if (betas.empty()) throw ValidationError("schedule: T must be >= 1");
    DiffusionSchedule s;
    s.T = static_cast<int>(betas.size());
    double prod = 1.0;
    for (double b : betas) {
      if (!(b > 0.0 && b < 1.0)) throw ValidationError("schedule: beta " + std::to_string(b) + " outside (0, 1)");
      s.alpha.push_back(1.0 - b);
      prod *= 1.0 - b;
      s.alpha_bar.push_back(prod);
    }
    s.beta = std::move(betas);
    return s;
  }
};

// Linearly spaced betas from beta_min (t = 1) to beta_max (t = T).
inline DiffusionSchedule make_schedule(int T, double beta_min = 0.001, double beta_max = 0.1) {
  if (T < 1) throw ValidationError("schedule.T must be >= 1");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
    throw ValidationError("schedule: require 0 < beta_min <= beta_max < 1");
  }
  std::vector<double> betas(T);
  for (int i = 0; i < T; ++i) {
    betas[i] = T == 1 ? beta_min : beta_min + (beta_max - beta_min) * static_cast<double>(i) / (T - 1);
  }
  return DiffusionSchedule::from_betas(std::move(betas));
}

// --- value-level forms -----------------------------------------------------

template <class S>
Mat<S> noise_with_alpha(const Mat<S>& h, double alpha, const Mat<S>& eps) {
  return static_cast<S>(std::sqrt(alpha)) * h + static_cast<S>(std::sqrt(1.0 - alpha)) * eps;
}

// One forward step at t. Returns (h_t, eps).
template <class S>
std::pair<Mat<S>, Mat<S>> forward_noise(const Mat<S>& h, int t, const DiffusionSchedule& sched, uint64_t seed) {
  sched.check_step(t);
  Mat<S> eps = gaussian<S>(h.rows(), h.cols(), seed);
  Mat<S> ht = noise_with_alpha(h, sched.alpha_at(t), eps);
  return {std::move(ht), std::move(eps)};
}

// Closed-form t-step marginal sample sqrt(abar_t) h + sqrt(1 - abar_t) eps.
template <class S>
Mat<S> marginal_noise(const Mat<S>& h, int t, const DiffusionSchedule& sched, const Mat<S>& eps) {
  return noise_with_alpha(h, sched.alpha_bar_at(t), eps);
}

inline double reverse_noise_coef(int t, const DiffusionSchedule& s) {
  return (1.0 - s.alpha_at(t)) / std::sqrt(1.0 - s.alpha_bar_at(t));
}

template <class S>
Mat<S> reverse_step(const Mat<S>& h_t, int t, const Mat<S>& eps_hat, const DiffusionSchedule& sched) {
  sched.check_step(t);
  const double inv = 1.0 / std::sqrt(sched.alpha_at(t));
  return static_cast<S>(inv) * (h_t - static_cast<S>(reverse_noise_coef(t, sched)) * eps_hat);
}

// --- estimator -------------------------------------------------------------

struct ConditionalDenoiser {
  std::string stage;
  AttentionParams attn;
  int w_in = -1;
  int w_out = -1;
  int t_embed = -1;  // [T x width]
  int width = 0;
};

template <class S>
ConditionalDenoiser register_denoiser(ParamStore<S>& store, const std::string& stage, int width, int heads, int T,
                                      std::mt19937_64& rng, bool zero_output = true) {
  ConditionalDenoiser d;
  const std::string p = "cdmd." + stage;
  d.stage = stage;
  d.width = width;
  d.w_in = store.add(p + ".w_in", init::xavier<S>(width, width, rng));
  d.attn = register_attention(store, p + ".attn", width, heads, rng);
  d.t_embed = store.add(p + ".t_embed", init::normal<S>(T, width, 0.02, rng));
  d.w_out = store.add(p + ".w_out", zero_output ? init::zeros<S>(width, width) : init::xavier<S>(width, width, rng));
  return d;
}

// eps_hat = W_out (q + CrossAttn(q, cond, cond)), q = W_in h_t + t_embed[t].
// An all-masked condition contributes nothing; only the query path remains.
// steps[r] is the diffusion step of query row r; q_seg optionally restricts
// rows to the condition keys of their own segment.
template <class S>
Var<S> estimate_noise(const Binder<S>& bind, Var<S> h_t, const KeyValues<S>& cond, const IdRow& steps,
                      const ConditionalDenoiser& den, const std::vector<int>& q_seg = {}) {
  Var<S> temb = bind(den.t_embed);
  if (static_cast<Eigen::Index>(steps.size()) != h_t.rows()) throw ValidationError("estimate_noise: steps length");
  IdRow rows(steps.size());
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (steps[i] < 1 || steps[i] > temb.rows()) {
      throw ValidationError("estimate_noise: step " + std::to_string(steps[i]) + " out of range");
    }
    rows[i] = steps[i] - 1;
  }
  Var<S> q = ops::add(ops::matmul(h_t, bind(den.w_in)), ops::gather_rows(temb, rows));
  Var<S> z = q;
  if (mask_count(cond.mask) > 0) {
    z = ops::add(q, attend(bind, q, cond, den.attn, q_seg));
  } else if (bind.diag) {
    ++bind.diag->empty_conditions;
  }
  return ops::matmul(z, bind(den.w_out));
}

template <class S>
Var<S> estimate_noise(const Binder<S>& bind, Var<S> h_t, Var<S> cond, const MaskRow& cond_mask, int t,
                      const ConditionalDenoiser& den) {
  return estimate_noise(bind, h_t, project_kv(bind, cond, cond_mask, den.attn), IdRow(h_t.rows(), t), den);
}

template <class S>
Var<S> reverse_step(Var<S> h_t, int t, Var<S> eps_hat, const DiffusionSchedule& sched) {
  sched.check_step(t);
  const S inv = static_cast<S>(1.0 / std::sqrt(sched.alpha_at(t)));
  const S c = static_cast<S>(reverse_noise_coef(t, sched) / std::sqrt(sched.alpha_at(t)));
  return ops::lincomb(h_t, inv, eps_hat, -c);
}

// Treats h_in as h_T and applies the reverse step for t = T..1.
template <class S>
Var<S> denoise_sequence(const Binder<S>& bind, Var<S> h_in, const KeyValues<S>& cond, const DiffusionSchedule& sched,
                        const ConditionalDenoiser& den, const std::vector<int>& q_seg = {}) {
  Var<S> h = h_in;
  if (h.rows() == 0) return h;
  for (int t = sched.T; t >= 1; --t) {
    Var<S> eps = estimate_noise(bind, h, cond, IdRow(h.rows(), t), den, q_seg);
    h = reverse_step(h, t, eps, sched);
  }
  return h;
}

template <class S>
Var<S> denoise_sequence(const Binder<S>& bind, Var<S> h_in, Var<S> cond, const MaskRow& cond_mask,
                        const DiffusionSchedule& sched, const ConditionalDenoiser& den) {
  return denoise_sequence(bind, h_in, project_kv(bind, cond, cond_mask, den.attn), sched, den);
}

// Supplies the noise draw shared by the (t, t-1) pair at step t.
template <class S>
using NoiseSource = std::function<Mat<S>(int t, Eigen::Index rows, Eigen::Index cols)>;

template <class S>
NoiseSource<S> seeded_noise(uint64_t seed) {
  return [seed](int t, Eigen::Index rows, Eigen::Index cols) {
    return gaussian<S>(rows, cols, derive_seed(seed, {static_cast<uint64_t>(t)}));
  };
}

// Sum over t of sum_r w[r] |h~_{t-1}[r] - reverse(h~_t)[r]|^2, where h~_t is
// the marginal sample at t of clean and both members of a pair share one
// noise draw. All T steps run as one stacked estimator call.
template <class S>
Var<S> recon_loss(const Binder<S>& bind, Var<S> clean, const std::vector<S>& row_weight, const KeyValues<S>& cond,
                  const DiffusionSchedule& sched, const ConditionalDenoiser& den, const NoiseSource<S>& noise,
                  const std::vector<int>& q_seg = {}) {
  Tape<S>& tape = *bind.tape;
  const Eigen::Index n = clean.rows(), d = clean.cols();
  if (static_cast<Eigen::Index>(row_weight.size()) != n) throw ValidationError("recon_loss: weight length");
  if (n == 0) return tape.constant(Mat<S>::Zero(1, 1));
  const int T = sched.T;
  Mat<S> eps(T * n, d);
  IdRow steps(static_cast<std::size_t>(T * n));
  std::vector<int> seg;
  std::vector<S> cur_a(T), cur_b(T), prev_a(T), prev_b(T), a(T * n), b(T * n), w(T * n);
  for (int t = 1; t <= T; ++t) {
    const Eigen::Index off = (t - 1) * n;
    eps.middleRows(off, n) = noise(t, n, d);
    cur_a[t - 1] = static_cast<S>(std::sqrt(sched.alpha_bar_at(t)));
    cur_b[t - 1] = static_cast<S>(std::sqrt(1.0 - sched.alpha_bar_at(t)));
    prev_a[t - 1] = static_cast<S>(std::sqrt(sched.alpha_bar_at(t - 1)));
    prev_b[t - 1] = static_cast<S>(std::sqrt(1.0 - sched.alpha_bar_at(t - 1)));
    const S inv = static_cast<S>(1.0 / std::sqrt(sched.alpha_at(t)));
    const S c = static_cast<S>(reverse_noise_coef(t, sched) / std::sqrt(sched.alpha_at(t)));
    for (Eigen::Index r = 0; r < n; ++r) {
      steps[off + r] = t;
      a[off + r] = inv;
      b[off + r] = -c;
      w[off + r] = row_weight[r];
    }
    if (!q_seg.empty()) seg.insert(seg.end(), q_seg.begin(), q_seg.end());
  }
  Var<S> ht = ops::tile_lincomb(clean, cur_a, eps, cur_b);
  Var<S> ref = ops::tile_lincomb(clean, prev_a, eps, prev_b);
  Var<S> eps_hat = estimate_noise(bind, ht, cond, steps, den, seg);
  Var<S> h_prev = ops::row_lincomb(ht, a, eps_hat, b);
  return ops::weighted_sq_dist(ref, h_prev, std::move(w));
}

// Mean over rows with row_mask 1 of the per-row loss above.
template <class S>
Var<S> recon_loss(const Binder<S>& bind, Var<S> clean_ref, const MaskRow& row_mask, Var<S> cond,
                  const MaskRow& cond_mask, const DiffusionSchedule& sched, const ConditionalDenoiser& den,
                  const NoiseSource<S>& noise) {
  const int valid = mask_count(row_mask);
  if (valid == 0) return bind.tape->constant(Mat<S>::Zero(1, 1));
  if (static_cast<Eigen::Index>(row_mask.size()) != clean_ref.rows()) throw ValidationError("recon_loss: mask length");
  std::vector<S> wt(row_mask.size());
  for (std::size_t r = 0; r < row_mask.size(); ++r) wt[r] = row_mask[r] ? static_cast<S>(1.0 / valid) : S(0);
  return recon_loss(bind, clean_ref, wt, project_kv(bind, cond, cond_mask, den.attn), sched, den, noise);
}

template <class S>
Var<S> recon_loss(const Binder<S>& bind, Var<S> clean_ref, const MaskRow& row_mask, Var<S> cond,
                  const MaskRow& cond_mask, const DiffusionSchedule& sched, const ConditionalDenoiser& den,
                  uint64_t seed) {
  return recon_loss(bind, clean_ref, row_mask, cond, cond_mask, sched, den, seeded_noise<S>(seed));
}

}  // namespace m3bsr
