#pragma once

// End-to-end run plumbing shared by the command-line tool and the acceptance
// suite: dataset assembly, model construction from a RunConfig, training with
// early stopping and report generation.

#include <functional>
#include <memory>
#include <string>

#include "m3bsr/checkpoint.hpp"
#include "m3bsr/config.hpp"
#include "m3bsr/synthgen.hpp"
#include "m3bsr/trainer.hpp"

#ifndef M3BSR_VERSION
#define M3BSR_VERSION "unknown"
#endif

namespace m3bsr {

inline std::string version_string() { return M3BSR_VERSION; }

using Real = float;

struct Dataset {
  SplitSet splits;
  FeatureMatrix<Real> image, text;
  int n_items = 0;
  PreparedData data;
};

inline Dataset assemble_dataset(const std::vector<InteractionEvent>& events, FeatureMatrix<Real> image,
                                FeatureMatrix<Real> text, const RunConfig& cfg) {
  Dataset d;
  d.n_items = image.n_items();
  if (text.n_items() != d.n_items) {
    throw ValidationError("image features cover " + std::to_string(d.n_items) + " items, text features " +
                          std::to_string(text.n_items()));
  }
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (events[i].item_id < 1 || events[i].item_id > d.n_items) {
      throw ValidationError("interaction record " + std::to_string(i + 1) + ": item " + std::to_string(events[i].item_id) +
                            " outside [1, " + std::to_string(d.n_items) + "]");
    }
  }
  d.image = std::move(image);
  d.text = std::move(text);
  d.splits = split_all(build_histories(events, cfg.data.min_len, cfg.data.max_len));
  if (d.splits.splits.empty()) throw ValidationError("no user has at least two favor events");
  d.data = prepare_data(d.splits, d.n_items, cfg.model.seq_len, cfg.train.seed, cfg.n_negatives);
  if (d.data.train.empty()) throw ValidationError("no training examples (every user has too few favors)");
  return d;
}

inline Dataset load_dataset(const RunConfig& cfg) {
  for (const auto& [key, path] : {std::pair{"data.interactions", cfg.data.interactions},
                                  std::pair{"data.image_features", cfg.data.image_features},
                                  std::pair{"data.text_features", cfg.data.text_features}}) {
    if (path.empty()) throw ConfigError(key, 0, "required for this command");
  }
  auto events = read_interactions(cfg.data.interactions);
  auto image = load_feature_matrix<Real>(cfg.data.image_features, Modality::kImage, cfg.model.d_mod);
  auto text = load_feature_matrix<Real>(cfg.data.text_features, Modality::kText, cfg.model.d_mod);
  return assemble_dataset(events, std::move(image), std::move(text), cfg);
}

inline Dataset dataset_from_world(const SynthWorld& w, const RunConfig& cfg) {
  return assemble_dataset(w.events, cast_features<Real>(w.image), cast_features<Real>(w.text), cfg);
}

inline ModelConfig model_config(const RunConfig& cfg, int n_items) {
  ModelConfig m = cfg.model;
  m.n_items = n_items;
  return m;
}

struct TrainedRun {
  std::unique_ptr<Model<Real>> model;
  Adam<Real> adam;
  FitResult<Real> fit;
};

inline Checkpoint<Real> make_checkpoint(const RunConfig& cfg, const Model<Real>& model, const Adam<Real>& adam,
                                       const FitResult<Real>& fit) {
  Checkpoint<Real> c = capture(model.params(), adam);
  c.config_hash = config_hash(cfg);
  c.shape_hash = model_shape_hash(model.config());
  c.version = version_string();
  c.seed = cfg.train.seed;
  c.epoch = fit.history.empty() ? 0 : fit.history.back().epoch;
  c.best_epoch = fit.best_epoch;
  c.best_valid = fit.best_valid;
  c.bad_epochs = fit.bad_epochs;
  return c;
}

inline TrainedRun start_run(const RunConfig& cfg, const Dataset& ds) {
  TrainedRun r;
  r.model = std::make_unique<Model<Real>>(model_config(cfg, ds.n_items), ds.image, ds.text);
  typename Adam<Real>::Options ao;
  ao.lr = cfg.train.lr;
  r.adam = Adam<Real>(r.model->params(), ao);
  return r;
}

// Trains with early stopping on validation NDCG@10; afterwards the model holds
// the best-validation parameters. `resume` continues a run whose model and
// optimiser state were already restored.
inline void fit_run(TrainedRun& r, const RunConfig& cfg, const Dataset& ds,
                    const std::function<void(const FitResult<Real>&)>& on_epoch = {},
                    const FitResult<Real>* resume = nullptr) {
  if (ds.data.valid.empty()) throw ValidationError("empty validation set");
  r.fit = fit(*r.model, r.adam, ds.data.train, ndcg10_validator<Real>(ds.data), cfg.train, on_epoch, resume);
}

inline TrainedRun train_run(const RunConfig& cfg, const Dataset& ds) {
  TrainedRun r = start_run(cfg, ds);
  fit_run(r, cfg, ds);
  return r;
}

enum class Split { kValid, kTest };

inline RankingReport evaluate_split(const Model<Real>& model, const Dataset& ds, Split split, const RunConfig& cfg) {
  const bool test = split == Split::kTest;
  RankingReport r = evaluate(model, test ? ds.data.test : ds.data.valid, test ? ds.data.test_cases : ds.data.valid_cases,
                             cfg.train.ks);
  r.config_hash = config_hash(cfg);
  r.seed = cfg.train.seed;
  r.version = version_string();
  return r;
}

inline std::string history_table(const FitResult<Real>& fit) {
  std::ostringstream out;
  out << std::setprecision(9);
  out << "epoch\ttotal\tmain\tcontrast\tmodality\tbehavior\tvalid_ndcg10\n";
  for (const auto& e : fit.history) {
    out << e.epoch << '\t' << e.total << '\t' << e.main << '\t' << e.contrast << '\t' << e.modality << '\t' << e.behavior
        << '\t' << e.valid_ndcg10 << '\n';
  }
  return out.str();
}

// The five single-component ablations plus the full model, in table order.
inline std::vector<std::pair<std::string, AblationFlags>> ablation_variants() {
  std::vector<std::pair<std::string, AblationFlags>> v;
  v.emplace_back("full", AblationFlags{});
  AblationFlags f;
  f.use_cdmd_m = false;
  v.emplace_back("w/o CDMD-M", f);
  f = {};
  f.use_cdmd_b = false;
  v.emplace_back("w/o CDMD-B", f);
  f = {};
  f.use_meie = false;
  v.emplace_back("w/o MEIE", f);
  f = {};
  f.use_shared_expert = false;
  v.emplace_back("w/o Shared", f);
  f = {};
  f.use_disent = false;
  v.emplace_back("w/o Disent", f);
  return v;
}

}  // namespace m3bsr
