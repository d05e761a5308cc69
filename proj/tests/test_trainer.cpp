#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "m3bsr/checkpoint.hpp"
#include "m3bsr/synthgen.hpp"
#include "m3bsr/trainer.hpp"
#include "support.hpp"

using namespace m3bsr;
using M = Mat<double>;

namespace {

struct Small {
  SynthWorld world;
  PreparedData data;
  ModelConfig mc;

  explicit Small(int n_items = 120, int n_negatives = kDefaultNegatives) {
    SynthConfig sc;
    sc.n_users = 20;
    sc.n_items = n_items;
    sc.d_mod = 8;
    sc.favor_len = 6;
    sc.click_len = 8;
    sc.seed = 3;
    world = generate(sc);
    data = prepare_data(split_all(build_histories(world.events)), n_items, 8, 1, n_negatives);
    mc.n_items = n_items;
    mc.d_mod = 8;
    mc.d_h = 8;
    mc.seq_len = 8;
    mc.T = 3;
  }

  Model<double> model(const ModelConfig& c) const { return Model<double>(c, world.image, world.text); }
  Model<double> model() const { return model(mc); }
};

ForwardResult<double> run(const Model<double>& m, Tape<double>& tape, const Example& ex, uint64_t noise = 9) {
  Binder<double> bind{&tape, &m.params()};
  ForwardOptions o;
  o.noise_seed = noise;
  return m.forward(bind, ex, o);
}

}  // namespace

TEST(Objective, ZeroHeadGivesUniformCrossEntropy) {
  Small s(100, 50);
  auto m = s.model();
  m.params()[m.head_w()].value.setZero();
  m.params()[m.head_b()].value.setZero();
  Tape<double> tape;
  auto r = run(m, tape, s.data.train[0]);
  EXPECT_NEAR(r.main.scalar(), 4.60517, 1e-5);
}

TEST(Objective, OneHotBiasWinsArgmax) {
  Small s;
  auto m = s.model();
  m.params()[m.head_w()].value.setZero();
  m.params()[m.head_b()].value.setZero();
  m.params()[m.head_b()].value(0, 42) = 5.0;
  RowVec<double> sc = m.scores(s.data.valid[0]);
  Eigen::Index arg;
  sc.tail(120).maxCoeff(&arg);
  EXPECT_EQ(arg + 1, 42);
}

TEST(Objective, LogitsAreLinearHead) {
  Small s;
  auto m = s.model();
  Tape<double> tape;
  auto r = run(m, tape, s.data.train[2]);
  const M& W = m.params()[m.head_w()].value;
  const M& b = m.params()[m.head_b()].value;
  const M y = r.y.value();
  for (int j = 0; j <= 120; ++j) {
    double z = b(0, j);
    for (int k = 0; k < 8; ++k) z += y(0, k) * W(k, j);
    EXPECT_NEAR(r.logits.value()(0, j), z, 1e-12);
  }
}

TEST(Objective, ZeroWeightsLeaveMainLoss) {
  Small s;
  s.mc.weights = {0.0, 0.0, 0.0};
  auto m = s.model();
  Tape<double> tape;
  auto r = run(m, tape, s.data.train[1]);
  EXPECT_EQ(r.total.scalar(), r.main.scalar());
  EXPECT_GT(r.modality.scalar(), 0.0);
}

TEST(Objective, TotalIsWeightedSum) {
  Small s;
  s.mc.weights = {0.3, 0.2, 0.1};
  auto m = s.model();
  Tape<double> tape;
  auto r = run(m, tape, s.data.train[1]);
  EXPECT_NEAR(r.total.scalar(),
              r.main.scalar() + 0.3 * r.contrast.scalar() + 0.2 * r.modality.scalar() + 0.1 * r.behavior.scalar(), 1e-12);
  M reps = r.reps.value();
  Tape<double> t2;
  EXPECT_NEAR(r.contrast.scalar(), disentangle_loss(t2.constant(reps), 0.3, DisentangleMode::kUniformity).scalar(), 1e-12);
}

TEST(Objective, ContrastOfOrthogonalRepsAddsSevenLogSix) {
  // The contrastive term on planted orthogonal representations.
  Tape<double> tape;
  EXPECT_NEAR(0.05 * disentangle_loss(tape.constant(M::Identity(7, 8)), 0.3, DisentangleMode::kUniformity).scalar(),
              0.05 * 7 * std::log(6.0), 1e-12);
}

TEST(Objective, AblationFlagsDropTerms) {
  Small s;
  s.mc.flags.use_cdmd_m = false;
  s.mc.flags.use_cdmd_b = false;
  s.mc.flags.use_disent = false;
  auto m = s.model();
  Tape<double> tape;
  auto r = run(m, tape, s.data.train[0]);
  EXPECT_EQ(r.total.scalar(), r.main.scalar());
  EXPECT_EQ(r.modality.scalar(), 0.0);
  EXPECT_EQ(r.reps.value().rows(), 7);
  s.mc.flags.use_shared_expert = false;
  auto m2 = s.model();
  Tape<double> t2;
  EXPECT_EQ(run(m2, t2, s.data.train[0]).reps.value().rows(), 6);
}

TEST(Objective, WithoutMeieFusesByMean) {
  Small s;
  s.mc.flags = {false, false, false, false, false};
  auto m = s.model();
  const Example& ex = s.data.train[4];
  Tape<double> tape;
  auto r = run(m, tape, ex);
  Binder<double> bind{&tape, &m.params()};
  M expect = M::Zero(1, 8);
  for (int b = 0; b < 2; ++b) {
    const IdRow& ids = b ? ex.favor_ids : ex.click_ids;
    const MaskRow& mask = b ? ex.favor_mask : ex.click_mask;
    IdRow kept;
    for (std::size_t l = 0; l < ids.size(); ++l)
      if (mask[l]) kept.push_back(ids[l]);
    for (auto mod : {Modality::kId, Modality::kImage, Modality::kText}) {
      if (!kept.empty()) expect += m.project(bind, mod, kept).value().colwise().mean() / 6.0;
    }
  }
  EXPECT_LT((r.y.value() - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Objective, FullModelGradientsMatchFiniteDifferences) {
  Small s;
  s.mc.d_h = 4;
  s.mc.d_id = 4;
  auto m = s.model();
  std::mt19937_64 rng(5);
  for (auto& p : m.params())
    if (p.value.isZero() && !p.pad_row) p.value = init::normal<double>(p.value.rows(), p.value.cols(), 0.1, rng);
  std::vector<std::size_t> idx{3, 7};
  auto loss = [&](GradBuffer<double>* g) {
    return batch_loss(m, s.data.train, idx, g, [](std::size_t i) { return 9 + i; }).total;
  };
  EXPECT_LT(m3bsr::testing::fd_max_rel_error(m.params(), loss, 1e-5, 1e-4), 1e-5);
}

TEST(Training, ZeroLearningRateLeavesParameters) {
  Small s;
  auto m = s.model();
  std::vector<M> before;
  for (const auto& p : m.params()) before.push_back(p.value);
  Adam<double> adam(m.params(), {0.0});
  TrainOptions opt;
  opt.batch_size = 8;
  train_epoch(m, adam, s.data.train, 1, opt);
  for (int i = 0; i < m.params().size(); ++i) EXPECT_TRUE(m.params()[i].value == before[i]) << m.params()[i].name;
}

TEST(Training, DeterministicAndDecreasing) {
  Small s;
  auto train = [&](std::vector<double>* losses) {
    auto m = s.model();
    Adam<double> adam(m.params(), {0.01});
    TrainOptions opt;
    opt.batch_size = 8;
    opt.seed = 4;
    for (int e = 1; e <= 5; ++e) losses->push_back(train_epoch(m, adam, s.data.train, e, opt).main);
    return m.params()[m.head_w()].value;
  };
  std::vector<double> a, b;
  M wa = train(&a), wb = train(&b);
  EXPECT_TRUE(wa == wb);
  EXPECT_EQ(a, b);
  EXPECT_LT(a.back(), a.front());
}

TEST(Training, PadRowAndFeaturesFrozen) {
  Small s;
  auto m = s.model();
  const M image = m.image().values;
  Adam<double> adam(m.params(), {0.05});
  TrainOptions opt;
  opt.batch_size = 8;
  train_epoch(m, adam, s.data.train, 1, opt);
  EXPECT_TRUE(m.params()[m.id_table()].value.row(0).isZero(0));
  EXPECT_TRUE(m.image().values == image);
}

TEST(Training, BatchLossIsMeanOfExamples) {
  Small s;
  auto m = s.model();
  auto seed = [](std::size_t i) { return 100 + i; };
  double sum = 0;
  for (std::size_t i : {0, 1, 2}) sum += batch_loss(m, s.data.train, {i}, static_cast<GradBuffer<double>*>(nullptr), seed).total;
  EXPECT_NEAR(batch_loss(m, s.data.train, {0, 1, 2}, static_cast<GradBuffer<double>*>(nullptr), seed).total, sum / 3, 1e-12);
}

TEST(EarlyStopping, StopsAfterPatience) {
  EarlyStopper st(10);
  EXPECT_TRUE(st.observe(0.5));
  int epoch = 1;
  while (!st.should_stop()) {
    st.observe(0.4);
    ++epoch;
  }
  EXPECT_EQ(epoch, 11);
  EXPECT_EQ(st.best(), 0.5);
}

TEST(EarlyStopping, ImprovementResetsCounter) {
  EarlyStopper st(3);
  st.observe(0.1);
  st.observe(0.05);
  st.observe(0.05);
  EXPECT_EQ(st.bad_epochs(), 2);
  EXPECT_TRUE(st.observe(0.2));
  EXPECT_EQ(st.bad_epochs(), 0);
  EXPECT_FALSE(st.observe(0.2));
  EXPECT_THROW(EarlyStopper(0), ValidationError);
}

TEST(Fit, ScriptedTraceStopsAtElevenAndRestoresBest) {
  Small s;
  auto m = s.model();
  Adam<double> adam(m.params(), {0.01});
  TrainOptions opt;
  opt.batch_size = 16;
  opt.max_epochs = 50;
  opt.patience = 10;
  M head_after_first;
  Validator<double> scripted = [&](const Model<double>& model, int epoch) {
    if (epoch == 1) head_after_first = model.params()[model.head_w()].value;
    return epoch == 1 ? 0.5 : 0.4;
  };
  auto res = fit(m, adam, s.data.train, scripted, opt);
  EXPECT_EQ(res.epochs_run, 11);
  EXPECT_EQ(res.best_epoch, 1);
  EXPECT_TRUE(m.params()[m.head_w()].value == head_after_first);
}

TEST(Fit, MonotoneTraceRunsEveryEpoch) {
  Small s;
  auto m = s.model();
  Adam<double> adam(m.params(), {0.01});
  TrainOptions opt;
  opt.batch_size = 64;
  opt.max_epochs = 20;
  opt.patience = 2;
  auto res = fit(m, adam, s.data.train, Validator<double>([](const Model<double>&, int e) { return 0.01 * e; }), opt);
  EXPECT_EQ(res.epochs_run, 20);
  EXPECT_EQ(res.best_epoch, 20);
}

TEST(Fit, ResumeMatchesUninterruptedRun) {
  Small s;
  TrainOptions opt;
  opt.batch_size = 16;
  opt.max_epochs = 4;
  opt.patience = 10;
  auto validator = ndcg10_validator<double>(s.data);

  auto full = s.model();
  Adam<double> adam_full(full.params(), {0.01});
  fit(full, adam_full, s.data.train, validator, opt);

  auto first = s.model();
  Adam<double> adam_first(first.params(), {0.01});
  TrainOptions half = opt;
  half.max_epochs = 2;
  FitResult<double> progress;
  std::string snapshot;
  fit(first, adam_first, s.data.train, validator, half, std::function<void(const FitResult<double>&)>([&](const FitResult<double>& f) {
    progress = f;
    std::ostringstream out;
    write_checkpoint(out, capture(first.params(), adam_first));
    snapshot = out.str();
  }));

  auto second = s.model();
  Adam<double> adam_second(second.params(), {0.01});
  std::istringstream in(snapshot);
  restore(read_checkpoint<double>(in), second.params(), &adam_second);
  fit(second, adam_second, s.data.train, validator, opt, {}, &progress);
  for (int i = 0; i < full.params().size(); ++i)
    EXPECT_TRUE(full.params()[i].value == second.params()[i].value) << full.params()[i].name;
}

TEST(Fit, CheckpointReproducesValidationScore) {
  Small s;
  auto m = s.model();
  Adam<double> adam(m.params(), {0.01});
  TrainOptions opt;
  opt.batch_size = 16;
  opt.max_epochs = 3;
  auto res = fit(m, adam, s.data.train, ndcg10_validator<double>(s.data), opt);
  auto dir = m3bsr::testing::temp_dir("trainer_ckpt");
  save_checkpoint((dir / "m.ckpt").string(), capture(m.params(), adam));
  auto fresh = s.model();
  restore(load_checkpoint<double>((dir / "m.ckpt").string()), fresh.params());
  EXPECT_DOUBLE_EQ(evaluate(fresh, s.data.valid, s.data.valid_cases, {10}).ndcg.at(10), res.best_valid);
}

TEST(Evaluate, RejectsMismatchedCases) {
  Small s;
  auto m = s.model();
  std::vector<EvalCase> none;
  EXPECT_THROW(evaluate(m, s.data.valid, none, {10}), ValidationError);
}
