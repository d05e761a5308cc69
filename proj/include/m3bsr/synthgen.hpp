#pragma once

// Synthetic multi-modal, multi-behaviour interaction worlds with planted
// user/item latents, accidental-click noise and modality noise.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "m3bsr/datamodel.hpp"
#include "m3bsr/features.hpp"
#include "m3bsr/rng.hpp"

namespace m3bsr {

struct SynthConfig {
  int n_users = 200;
  int n_items = 500;
  int d_latent = 8;
  int d_mod = 512;
  int favor_len = 8;
  int click_len = 16;
  int n_clusters = 8;
  double cluster_spread = 0.5;  // item latent spread around its cluster centre
  double temperature = 1.0;
  double click_noise_rate = 0.0;
  double modality_noise_sigma = 0.0;
  uint64_t seed = 0;

  void validate() const {
    if (n_users < 1 || n_items < 1 || d_latent < 1 || d_mod < 1 || favor_len < 1 || click_len < 1 || n_clusters < 1) {
      throw ValidationError("synth: sizes must be positive");
    }
    if (!(click_noise_rate >= 0.0 && click_noise_rate <= 1.0)) throw ValidationError("synth: click_noise_rate outside [0, 1]");
    if (!(modality_noise_sigma >= 0.0)) throw ValidationError("synth: modality_noise_sigma must be >= 0");
    if (!(temperature > 0.0)) throw ValidationError("synth: temperature must be > 0");
    if (n_items <= favor_len + click_len) throw ValidationError("synth: n_items must exceed favor_len + click_len");
  }
};

struct GroundTruth {
  Eigen::MatrixXd user_latents;  // [n_users x d_latent]
  Eigen::MatrixXd item_latents;  // [n_items x d_latent], row i-1 is item i
  Eigen::MatrixXd clean_image;   // [n_items x d_mod]
  Eigen::MatrixXd clean_text;
  std::vector<int> item_cluster;  // per item (row i-1)
  std::vector<uint8_t> noise_flags;  // per emitted event
};

struct SynthWorld {
  std::vector<InteractionEvent> events;
  FeatureMatrix<double> image, text;  // emitted (possibly corrupted) features
  GroundTruth truth;
};

struct ClickNoiseResult {
  std::vector<InteractionEvent> events;
  std::vector<uint8_t> flags;
};

// Replaces exactly round(rate * n_clicks) click events, chosen uniformly,
// with uniformly random item ids in [1, n_items]. Favors are untouched.
inline ClickNoiseResult inject_click_noise(const std::vector<InteractionEvent>& events, double rate, int n_items,
                                           uint64_t seed) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ValidationError("inject_click_noise: rate outside [0, 1]");
  ClickNoiseResult out{events, std::vector<uint8_t>(events.size(), 0)};
  std::vector<std::size_t> clicks;
  for (std::size_t i = 0; i < events.size(); ++i)
    if (events[i].behavior == Behavior::kClick) clicks.push_back(i);
  const std::size_t n_replace = static_cast<std::size_t>(std::llround(rate * static_cast<double>(clicks.size())));
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n_replace; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, clicks.size() - 1);
    std::swap(clicks[i], clicks[pick(rng)]);
  }
  std::uniform_int_distribution<int> item(1, n_items);
  for (std::size_t i = 0; i < n_replace; ++i) {
    out.events[clicks[i]].item_id = item(rng);
    out.flags[clicks[i]] = 1;
  }
  return out;
}

// clean + sigma * G with G standard normal, deterministic under seed.
template <class S>
FeatureMatrix<S> corrupt_features(const FeatureMatrix<S>& clean, double sigma, uint64_t seed) {
  if (!(sigma >= 0.0)) throw ValidationError("corrupt_features: sigma must be >= 0");
  FeatureMatrix<S> out = clean;
  if (sigma == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (Eigen::Index r = 1; r < out.values.rows(); ++r)
    for (Eigen::Index c = 0; c < out.values.cols(); ++c) out.values(r, c) += static_cast<S>(sigma * g(rng));
  return out;
}

namespace detail {

// Softmax sampling over affinities without replacement (Gumbel top-k).
inline std::vector<int32_t> sample_without_replacement(const Eigen::VectorXd& logits, int k, std::mt19937_64& rng) {
  std::extreme_value_distribution<double> gumbel(0.0, 1.0);
  std::vector<std::pair<double, int32_t>> keyed(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) keyed[i] = {logits(i) + gumbel(rng), static_cast<int32_t>(i + 1)};
  std::partial_sort(keyed.begin(), keyed.begin() + k, keyed.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<int32_t> out(k);
  for (int i = 0; i < k; ++i) out[i] = keyed[i].second;
  return out;
}

}  // namespace detail

inline SynthWorld generate(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> g(0.0, 1.0);
  auto normal_matrix = [&](int r, int c, double s) {
    Eigen::MatrixXd m(r, c);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) m(i, j) = s * g(rng);
    return m;
  };

  SynthWorld w;
  GroundTruth& gt = w.truth;
  Eigen::MatrixXd centres = normal_matrix(cfg.n_clusters, cfg.d_latent, 1.0);
  std::uniform_int_distribution<int> cluster(0, cfg.n_clusters - 1);
  gt.item_latents.resize(cfg.n_items, cfg.d_latent);
  gt.item_cluster.resize(cfg.n_items);
  for (int i = 0; i < cfg.n_items; ++i) {
    int c = cluster(rng);
    gt.item_cluster[i] = c;
    gt.item_latents.row(i) = centres.row(c) + normal_matrix(1, cfg.d_latent, cfg.cluster_spread);
  }
  gt.user_latents.resize(cfg.n_users, cfg.d_latent);
  for (int u = 0; u < cfg.n_users; ++u) {
    gt.user_latents.row(u) = centres.row(cluster(rng)) + normal_matrix(1, cfg.d_latent, cfg.cluster_spread);
  }

  const double map_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_latent));
  Eigen::MatrixXd map_im = normal_matrix(cfg.d_latent, cfg.d_mod, map_scale);
  Eigen::MatrixXd map_te = normal_matrix(cfg.d_latent, cfg.d_mod, map_scale);
  gt.clean_image = gt.item_latents * map_im;
  gt.clean_text = gt.item_latents * map_te;

  std::vector<InteractionEvent> events;
  for (int u = 0; u < cfg.n_users; ++u) {
    Eigen::VectorXd logits = gt.item_latents * gt.user_latents.row(u).transpose() / cfg.temperature;
    std::vector<int32_t> favors = detail::sample_without_replacement(logits, cfg.favor_len, rng);
    // Clicks: independent draws from the same softmax.
    Eigen::VectorXd p = (logits.array() - logits.maxCoeff()).exp();
    std::discrete_distribution<int> click_dist(p.data(), p.data() + p.size());
    std::vector<int32_t> clicks(cfg.click_len);
    for (auto& c : clicks) c = click_dist(rng) + 1;
    // Random interleaving; timestamps are consecutive integers.
    std::vector<uint8_t> is_favor(cfg.favor_len + cfg.click_len, 0);
    std::fill(is_favor.begin(), is_favor.begin() + cfg.favor_len, 1);
    std::shuffle(is_favor.begin(), is_favor.end(), rng);
    std::size_t fi = 0, ci = 0;
    for (std::size_t s = 0; s < is_favor.size(); ++s) {
      InteractionEvent e;
      e.user_id = u;
      e.timestamp = static_cast<int64_t>(s);
      if (is_favor[s]) {
        e.behavior = Behavior::kFavor;
        e.item_id = favors[fi++];
      } else {
        e.behavior = Behavior::kClick;
        e.item_id = clicks[ci++];
      }
      events.push_back(e);
    }
  }

  auto noisy = inject_click_noise(events, cfg.click_noise_rate, cfg.n_items, derive_seed(cfg.seed, {101}));
  w.events = std::move(noisy.events);
  gt.noise_flags = std::move(noisy.flags);

  auto clean_im = FeatureMatrix<double>::from_items(Modality::kImage, Mat<double>(gt.clean_image));
  auto clean_te = FeatureMatrix<double>::from_items(Modality::kText, Mat<double>(gt.clean_text));
  w.image = corrupt_features(clean_im, cfg.modality_noise_sigma, derive_seed(cfg.seed, {201}));
  w.text = corrupt_features(clean_te, cfg.modality_noise_sigma, derive_seed(cfg.seed, {202}));
  return w;
}

template <class S>
FeatureMatrix<S> cast_features(const FeatureMatrix<double>& m) {
  FeatureMatrix<S> out;
  out.modality = m.modality;
  out.values = m.values.cast<S>();
  return out;
}

// Ground-truth archive: "M3GT", u32 version, u32 n_users, n_items, d_latent,
// d_mod, then float64 user latents, item latents, clean image, clean text
// (row-major), u32 cluster per item, u64 n_flags, u8 flag per event.
inline void write_ground_truth(const std::string& path, const GroundTruth& gt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write("M3GT", 4);
  auto u32 = [&](uint32_t v) { detail::put_u32(out, v); };
  auto f64 = [&](double d) { out.write(reinterpret_cast<const char*>(&d), 8); };
  u32(1);
  u32(static_cast<uint32_t>(gt.user_latents.rows()));
  u32(static_cast<uint32_t>(gt.item_latents.rows()));
  u32(static_cast<uint32_t>(gt.item_latents.cols()));
  u32(static_cast<uint32_t>(gt.clean_image.cols()));
  for (const Eigen::MatrixXd* m : {&gt.user_latents, &gt.item_latents, &gt.clean_image, &gt.clean_text})
    for (Eigen::Index r = 0; r < m->rows(); ++r)
      for (Eigen::Index c = 0; c < m->cols(); ++c) f64((*m)(r, c));
  for (int c : gt.item_cluster) u32(static_cast<uint32_t>(c));
  uint64_t n = gt.noise_flags.size();
  out.write(reinterpret_cast<const char*>(&n), 8);
  out.write(reinterpret_cast<const char*>(gt.noise_flags.data()), static_cast<std::streamsize>(n));
}

inline GroundTruth read_ground_truth(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "M3GT") throw ValidationError(path + ": bad magic");
  uint32_t version, nu, ni, dl, dm;
  if (!detail::get_u32(in, version) || version != 1) throw ValidationError(path + ": unsupported version");
  if (!detail::get_u32(in, nu) || !detail::get_u32(in, ni) || !detail::get_u32(in, dl) || !detail::get_u32(in, dm)) {
    throw ValidationError(path + ": truncated header");
  }
  GroundTruth gt;
  gt.user_latents.resize(nu, dl);
  gt.item_latents.resize(ni, dl);
  gt.clean_image.resize(ni, dm);
  gt.clean_text.resize(ni, dm);
  for (Eigen::MatrixXd* m : {&gt.user_latents, &gt.item_latents, &gt.clean_image, &gt.clean_text})
    for (Eigen::Index r = 0; r < m->rows(); ++r)
      for (Eigen::Index c = 0; c < m->cols(); ++c)
        if (!in.read(reinterpret_cast<char*>(&(*m)(r, c)), 8)) throw ValidationError(path + ": truncated payload");
  gt.item_cluster.resize(ni);
  for (auto& c : gt.item_cluster) {
    uint32_t v;
    if (!detail::get_u32(in, v)) throw ValidationError(path + ": truncated clusters");
    c = static_cast<int>(v);
  }
  uint64_t n = 0;
  if (!in.read(reinterpret_cast<char*>(&n), 8)) throw ValidationError(path + ": truncated flags");
  gt.noise_flags.resize(n);
  if (!in.read(reinterpret_cast<char*>(gt.noise_flags.data()), static_cast<std::streamsize>(n))) {
    throw ValidationError(path + ": truncated flags");
  }
  return gt;
}

}  // namespace m3bsr
