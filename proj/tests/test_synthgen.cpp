#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "m3bsr/synthgen.hpp"
#include "support.hpp"

using namespace m3bsr;

namespace {

SynthConfig small(uint64_t seed = 1) {
  SynthConfig c;
  c.n_users = 60;
  c.n_items = 120;
  c.d_mod = 24;
  c.seed = seed;
  return c;
}

std::vector<InteractionEvent> clicks(int n) {
  std::vector<InteractionEvent> e;
  for (int i = 0; i < n; ++i) e.push_back({i % 17, 1 + i % 50, i % 5 == 0 ? Behavior::kFavor : Behavior::kClick, i});
  return e;
}

}  // namespace

TEST(Synth, ZeroNoiseRateFlagsNothing) {
  auto w = generate(small());
  for (auto f : w.truth.noise_flags) EXPECT_EQ(f, 0);
}

TEST(Synth, ZeroSigmaEmitsCleanFeatures) {
  auto w = generate(small());
  EXPECT_TRUE(w.image.values.bottomRows(120) == Mat<double>(w.truth.clean_image));
  EXPECT_TRUE(w.text.values.bottomRows(120) == Mat<double>(w.truth.clean_text));
  EXPECT_TRUE(w.image.values.row(0).isZero(0));
}

TEST(Synth, FlaggedClickFraction) {
  SynthConfig c;
  c.n_users = 200;
  c.n_items = 500;
  c.d_mod = 8;
  c.click_noise_rate = 0.3;
  c.seed = 5;
  auto w = generate(c);
  int n_clicks = 0, n_flag = 0;
  for (std::size_t i = 0; i < w.events.size(); ++i) {
    if (w.events[i].behavior == Behavior::kClick) ++n_clicks;
    if (w.truth.noise_flags[i]) {
      ++n_flag;
      EXPECT_EQ(w.events[i].behavior, Behavior::kClick);
    }
  }
  EXPECT_NEAR(static_cast<double>(n_flag) / n_clicks, 0.3, 0.03);
}

TEST(Synth, RejectsBadConfig) {
  SynthConfig c = small();
  c.click_noise_rate = 1.5;
  EXPECT_THROW(generate(c), ValidationError);
  c = small();
  c.n_items = c.favor_len + c.click_len;
  EXPECT_THROW(generate(c), ValidationError);
}

TEST(Synth, Deterministic) {
  SynthConfig c = small(9);
  c.click_noise_rate = 0.2;
  c.modality_noise_sigma = 0.3;
  auto a = generate(c), b = generate(c);
  ASSERT_EQ(a.events.size(), b.events.size());
  for (std::size_t i = 0; i < a.events.size(); ++i) {
    EXPECT_EQ(a.events[i].item_id, b.events[i].item_id);
    EXPECT_EQ(a.events[i].timestamp, b.events[i].timestamp);
  }
  EXPECT_TRUE(a.image.values == b.image.values);
  EXPECT_TRUE(a.truth.user_latents == b.truth.user_latents);
  EXPECT_EQ(a.truth.noise_flags, b.truth.noise_flags);
}

TEST(InjectClickNoise, RateZeroIsIdentity) {
  auto e = clicks(100);
  auto r = inject_click_noise(e, 0.0, 50, 3);
  for (std::size_t i = 0; i < e.size(); ++i) {
    EXPECT_EQ(r.events[i].item_id, e[i].item_id);
    EXPECT_EQ(r.flags[i], 0);
  }
}

TEST(InjectClickNoise, RateOneFlagsEveryClick) {
  auto e = clicks(100);
  auto r = inject_click_noise(e, 1.0, 50, 3);
  for (std::size_t i = 0; i < e.size(); ++i) {
    EXPECT_EQ(r.flags[i], e[i].behavior == Behavior::kClick ? 1 : 0);
    if (e[i].behavior == Behavior::kFavor) EXPECT_EQ(r.events[i].item_id, e[i].item_id);
  }
}

TEST(InjectClickNoise, ExactCount) {
  std::vector<InteractionEvent> e;
  for (int i = 0; i < 1000; ++i) e.push_back({0, 1 + i % 40, Behavior::kClick, i});
  for (int i = 0; i < 30; ++i) e.push_back({0, 3, Behavior::kFavor, 2000 + i});
  auto r = inject_click_noise(e, 0.25, 40, 8);
  int n = 0;
  for (auto f : r.flags) n += f;
  EXPECT_EQ(n, 250);
  for (const auto& x : r.events) {
    EXPECT_GE(x.item_id, 1);
    EXPECT_LE(x.item_id, 40);
  }
}

TEST(CorruptFeatures, SigmaZeroIsIdentity) {
  std::mt19937_64 rng(1);
  auto clean = FeatureMatrix<double>::from_items(Modality::kImage, init::normal<double>(20, 16, 1.0, rng));
  EXPECT_TRUE(corrupt_features(clean, 0.0, 4).values == clean.values);
}

TEST(CorruptFeatures, PerturbationEnergy) {
  auto clean = FeatureMatrix<double>::from_items(Modality::kImage, Mat<double>::Zero(1000, 512));
  auto noisy = corrupt_features(clean, 0.5, 12);
  const double per_row = noisy.values.bottomRows(1000).squaredNorm() / 1000.0;
  EXPECT_NEAR(per_row, 128.0, 0.05 * 128.0);
  EXPECT_TRUE(noisy.values.row(0).isZero(0));
  EXPECT_TRUE(corrupt_features(clean, 0.5, 12).values == noisy.values);
}

TEST(Synth, CleanFeaturesAreLinearInLatents) {
  auto w = generate(small(3));
  const Eigen::MatrixXd& X = w.truth.clean_image;
  const Eigen::MatrixXd& Y = w.truth.item_latents;
  const double lambda = 1e-6;
  Eigen::MatrixXd A = X.transpose() * X + lambda * Eigen::MatrixXd::Identity(X.cols(), X.cols());
  Eigen::MatrixXd B = A.ldlt().solve(X.transpose() * Y);
  Eigen::MatrixXd resid = Y - X * B;
  Eigen::MatrixXd centred = Y.rowwise() - Y.colwise().mean();
  EXPECT_GT(1.0 - resid.squaredNorm() / centred.squaredNorm(), 0.99);
}

TEST(Synth, FavorsOutscoreNoisyClicks) {
  SynthConfig c = small(4);
  c.click_noise_rate = 0.3;
  auto w = generate(c);
  double fav = 0, noisy = 0;
  int nf = 0, nn = 0;
  for (std::size_t i = 0; i < w.events.size(); ++i) {
    const auto& e = w.events[i];
    const double a = w.truth.user_latents.row(e.user_id).dot(w.truth.item_latents.row(e.item_id - 1));
    if (e.behavior == Behavior::kFavor) {
      fav += a;
      ++nf;
    } else if (w.truth.noise_flags[i]) {
      noisy += a;
      ++nn;
    }
  }
  ASSERT_GT(nn, 0);
  EXPECT_GT(fav / nf, noisy / nn);
}

TEST(GroundTruthFile, RoundTrip) {
  SynthConfig c = small(6);
  c.click_noise_rate = 0.1;
  auto w = generate(c);
  auto dir = m3bsr::testing::temp_dir("gt");
  write_ground_truth((dir / "t.m3gt").string(), w.truth);
  auto back = read_ground_truth((dir / "t.m3gt").string());
  EXPECT_TRUE(back.item_latents == w.truth.item_latents);
  EXPECT_TRUE(back.clean_text == w.truth.clean_text);
  EXPECT_EQ(back.item_cluster, w.truth.item_cluster);
  EXPECT_EQ(back.noise_flags, w.truth.noise_flags);
}
