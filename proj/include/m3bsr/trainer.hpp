#pragma once

// Joint objective, mini-batch optimisation and early stopping.

#include <algorithm>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "m3bsr/datamodel.hpp"
#include "m3bsr/eval.hpp"
#include "m3bsr/model.hpp"

namespace m3bsr {

struct TrainOptions {
  double lr = 1e-3;
  int batch_size = 128;
  int max_epochs = 200;
  int patience = 10;
  uint64_t seed = 0;
  std::vector<int> ks{10, 20};
  bool verbose = false;
};

// Leave-one-out examples and fixed candidate lists for one split set.
struct PreparedData {
  std::vector<Example> train;
  std::vector<Example> valid;
  std::vector<Example> test;
  std::vector<EvalCase> valid_cases;
  std::vector<EvalCase> test_cases;
};

inline PreparedData prepare_data(const SplitSet& splits, int n_items, int seq_len, uint64_t seed,
                                 int n_negatives = kDefaultNegatives) {
  PreparedData d;
  std::vector<std::vector<int32_t>> histories;
  for (const auto& s : splits.splits) {
    for (auto& ex : make_train_examples(s, seq_len)) d.train.push_back(std::move(ex));
    d.valid.push_back(make_valid_example(s, seq_len));
    d.test.push_back(make_test_example(s, seq_len));
    histories.push_back(s.history.favor_items);
  }
  d.valid_cases = build_eval_cases(d.valid, histories, n_items, derive_seed(seed, {1}), n_negatives);
  d.test_cases = build_eval_cases(d.test, histories, n_items, derive_seed(seed, {2}), n_negatives);
  return d;
}

template <class S>
struct EpochStats {
  int epoch = 0;
  int examples = 0;
  double total = 0, main = 0, contrast = 0, modality = 0, behavior = 0;
};

// Loss and gradient over a batch. Losses and gradients are batch means;
// grads is overwritten.
template <class S>
LossBreakdown<double> batch_loss(const Model<S>& model, const std::vector<Example>& examples,
                                 const std::vector<std::size_t>& indices, GradBuffer<S>* grads,
                                 const std::function<uint64_t(std::size_t)>& noise_seed, Diagnostics* diag = nullptr) {
  if (grads) grads->zero();
  LossBreakdown<double> acc;
  for (std::size_t i : indices) {
    Tape<S> tape;
    Binder<S> bind{&tape, &model.params(), grads, diag};
    ForwardOptions opt;
    opt.noise_seed = noise_seed(i);
    ForwardResult<S> r = model.forward(bind, examples[i], opt);
    if (grads) tape.backward(r.total);
    auto b = r.breakdown();
    acc.total += b.total;
    acc.main += b.main;
    acc.contrast += b.contrast;
    acc.modality += b.modality;
    acc.behavior += b.behavior;
  }
  const double inv = indices.empty() ? 0.0 : 1.0 / static_cast<double>(indices.size());
  if (grads) {
    for (auto& g : grads->grads) g *= static_cast<S>(inv);
  }
  acc.total *= inv;
  acc.main *= inv;
  acc.contrast *= inv;
  acc.modality *= inv;
  acc.behavior *= inv;
  return acc;
}

inline uint64_t example_noise_seed(uint64_t seed, int epoch, std::size_t index) {
  return derive_seed(seed, {0x7e, static_cast<uint64_t>(epoch), static_cast<uint64_t>(index)});
}

template <class S>
EpochStats<S> train_epoch(Model<S>& model, Adam<S>& adam, const std::vector<Example>& data, int epoch,
                          const TrainOptions& opt) {
  if (data.empty()) throw ValidationError("train_epoch: no training examples");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(opt.seed, {0x5f, static_cast<uint64_t>(epoch)}));
  std::shuffle(order.begin(), order.end(), rng);

  GradBuffer<S> grads(model.params());
  EpochStats<S> stats;
  stats.epoch = epoch;
  const std::size_t bs = static_cast<std::size_t>(std::max(1, opt.batch_size));
  for (std::size_t start = 0; start < order.size(); start += bs) {
    std::vector<std::size_t> idx(order.begin() + start, order.begin() + std::min(order.size(), start + bs));
    auto loss = batch_loss(model, data, idx, &grads,
                           [&](std::size_t i) { return example_noise_seed(opt.seed, epoch, i); });
    adam.step(model.params(), grads);
    const double w = static_cast<double>(idx.size());
    stats.total += loss.total * w;
    stats.main += loss.main * w;
    stats.contrast += loss.contrast * w;
    stats.modality += loss.modality * w;
    stats.behavior += loss.behavior * w;
    stats.examples += static_cast<int>(idx.size());
  }
  const double inv = 1.0 / stats.examples;
  stats.total *= inv;
  stats.main *= inv;
  stats.contrast *= inv;
  stats.modality *= inv;
  stats.behavior *= inv;
  return stats;
}

template <class S>
RankingReport evaluate(const Model<S>& model, const std::vector<Example>& examples, const std::vector<EvalCase>& cases,
                       const std::vector<int>& ks) {
  if (examples.size() != cases.size()) throw ValidationError("evaluate: examples and cases differ in length");
  std::function<RowVec<S>(std::size_t)> scorer = [&](std::size_t i) { return model.scores(examples[i]); };
  return evaluate_cases<RowVec<S>>(cases, scorer, ks);
}

// Counts epochs without improvement of a maximised score.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {
    if (patience < 1) throw ValidationError("patience must be >= 1");
  }

  // Returns true when this observation is a new best.
  bool observe(double score) {
    if (!has_best_ || score > best_) {
      best_ = score;
      has_best_ = true;
      bad_epochs_ = 0;
      return true;
    }
    ++bad_epochs_;
    return false;
  }

  bool should_stop() const { return bad_epochs_ >= patience_; }
  int bad_epochs() const { return bad_epochs_; }
  double best() const { return best_; }
  bool has_best() const { return has_best_; }
  void restore(double best, int bad_epochs) {
    best_ = best;
    bad_epochs_ = bad_epochs;
    has_best_ = true;
  }

 private:
  int patience_;
  double best_ = 0.0;
  int bad_epochs_ = 0;
  bool has_best_ = false;
};

struct EpochRecord {
  int epoch = 0;
  double total = 0, main = 0, contrast = 0, modality = 0, behavior = 0;
  double valid_ndcg10 = 0;
};

template <class S>
struct FitResult {
  std::vector<Mat<S>> best_params;
  int best_epoch = 0;
  int epochs_run = 0;
  double best_valid = 0;
  int bad_epochs = 0;
  std::vector<EpochRecord> history;
};

// Validation score after an epoch (higher is better).
template <class S>
using Validator = std::function<double(const Model<S>&, int epoch)>;

template <class S>
Validator<S> ndcg10_validator(const PreparedData& data) {
  return [&data](const Model<S>& m, int) {
    RankingReport r = evaluate(m, data.valid, data.valid_cases, {10});
    return r.ndcg.at(10);
  };
}

// Trains until validation fails to improve for `patience` consecutive epochs
// (or max_epochs), then restores the best parameters into the model. With
// `resume`, continues after its last recorded epoch with its stopper state;
// the model and optimiser must already hold that epoch's state.
template <class S>
FitResult<S> fit(Model<S>& model, Adam<S>& adam, const std::vector<Example>& train, const Validator<S>& validate,
                 const TrainOptions& opt, const std::function<void(const FitResult<S>&)>& on_epoch = {},
                 const FitResult<S>* resume = nullptr) {
  if (!validate) throw ValidationError("fit: validation scorer required");
  EarlyStopper stopper(opt.patience);
  FitResult<S> res;
  int start_epoch = 1;
  if (resume && !resume->history.empty()) {
    res = *resume;
    start_epoch = resume->history.back().epoch + 1;
    stopper.restore(resume->best_valid, resume->bad_epochs);
    if (stopper.should_stop()) start_epoch = opt.max_epochs + 1;
  }
  for (int epoch = start_epoch; epoch <= opt.max_epochs; ++epoch) {
    EpochStats<S> st = train_epoch(model, adam, train, epoch, opt);
    const double v = validate(model, epoch);
    EpochRecord rec{epoch, st.total, st.main, st.contrast, st.modality, st.behavior, v};
    res.history.push_back(rec);
    res.epochs_run = static_cast<int>(res.history.size());
    if (stopper.observe(v)) {
      res.best_epoch = epoch;
      res.best_valid = v;
      res.best_params.clear();
      for (const auto& p : model.params()) res.best_params.push_back(p.value);
    }
    res.bad_epochs = stopper.bad_epochs();
    if (opt.verbose) {
      std::cerr << "epoch " << epoch << " loss " << st.total << " (main " << st.main << ") valid NDCG@10 " << v << "\n";
    }
    if (on_epoch) on_epoch(res);
    if (stopper.should_stop()) break;
  }
  if (!res.best_params.empty()) {
    for (int i = 0; i < model.params().size(); ++i) model.params()[i].value = res.best_params[i];
  }
  return res;
}

}  // namespace m3bsr
