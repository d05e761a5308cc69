// m3bsr command-line tool: synth, train, eval, ablate, sweep, project.
//
// Exit codes: 0 success, 1 validation failure (bad config, flags or input
// data), 2 runtime failure. Diagnostics go to standard error.

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "m3bsr/pipeline.hpp"

namespace fs = std::filesystem;
using namespace m3bsr;

namespace {

bool g_quiet = false;

void note(const std::string& msg) {
  if (!g_quiet) std::cerr << msg << "\n";
}

// Exclusive ownership of an output directory for the lifetime of one run.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      if (errno == EEXIST) {
        throw std::runtime_error("output directory " + dir.string() + " is in use by another run (remove " +
                                 path_.string() + " if it is stale)");
      }
      throw std::runtime_error("cannot create " + path_.string() + ": " + std::strerror(errno));
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::write(fd, pid.data(), pid.size()) < 0) {
      // the lock is the file's existence; its content is informational
    }
    ::close(fd);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> read_kv(const fs::path& path) {
  std::map<std::string, std::string> kv;
  std::istringstream in(read_text(path));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

std::string hash_line(const RunConfig& cfg) { return "# config_hash=" + config_hash(cfg) + "\n"; }

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(9) << v;
  return s.str();
}

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  bool synthetic = false;
};

RunConfig load_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? parse_config_text("") : parse_config(c.config);
  for (const auto& s : c.sets) apply_override(cfg, s);
  cfg.train.verbose = false;
  return cfg;
}

Dataset load_data(const RunConfig& cfg, bool synthetic) {
  if (synthetic) return dataset_from_world(generate(cfg.synth), cfg);
  return load_dataset(cfg);
}

void log_epoch(const EpochRecord& e) {
  note("epoch " + std::to_string(e.epoch) + " loss " + fmt(e.total) + " main " + fmt(e.main) + " valid NDCG@10 " +
       fmt(e.valid_ndcg10));
}

std::vector<EpochRecord> parse_history(const std::string& text) {
  std::vector<EpochRecord> h;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("epoch", 0) == 0) continue;
    std::istringstream row(line);
    EpochRecord e;
    if (!(row >> e.epoch >> e.total >> e.main >> e.contrast >> e.modality >> e.behavior >> e.valid_ndcg10)) {
      throw ValidationError("history.tsv: malformed row '" + line + "'");
    }
    h.push_back(e);
  }
  return h;
}

// --- synth -------------------------------------------------------------------

int cmd_synth(const Common& c) {
  RunConfig cfg = load_config(c);
  const fs::path out(c.out);
  DirLock lock(out);
  SynthWorld w = generate(cfg.synth);
  write_interactions((out / "interactions.tsv").string(), w.events);
  write_feature_matrix((out / "image.m3bf").string(), cast_features<float>(w.image));
  write_feature_matrix((out / "text.m3bf").string(), cast_features<float>(w.text));
  write_ground_truth((out / "truth.m3gt").string(), w.truth);

  RunConfig data_cfg = cfg;
  data_cfg.data.interactions = fs::absolute(out / "interactions.tsv").string();
  data_cfg.data.image_features = fs::absolute(out / "image.m3bf").string();
  data_cfg.data.text_features = fs::absolute(out / "text.m3bf").string();
  write_text(out / "config.yaml", hash_line(data_cfg) + serialize_config(data_cfg));

  int clicks = 0, noisy = 0;
  for (std::size_t i = 0; i < w.events.size(); ++i) {
    if (w.events[i].behavior == Behavior::kClick) ++clicks;
    noisy += w.truth.noise_flags[i];
  }
  std::ostringstream s;
  s << "config_hash=" << config_hash(cfg) << "\n"
    << "data_config_hash=" << config_hash(data_cfg) << "\n"
    << "n_users=" << cfg.synth.n_users << "\n"
    << "n_items=" << cfg.synth.n_items << "\n"
    << "n_events=" << w.events.size() << "\n"
    << "n_clicks=" << clicks << "\n"
    << "n_noisy_clicks=" << noisy << "\n"
    << "seed=" << cfg.synth.seed << "\n"
    << "version=" << version_string() << "\n";
  write_text(out / "summary.txt", s.str());
  note("wrote " + std::to_string(w.events.size()) + " events to " + out.string());
  return 0;
}

// --- train -------------------------------------------------------------------

int cmd_train(const Common& c, bool resume) {
  RunConfig cfg = load_config(c);
  const fs::path out(c.out);
  DirLock lock(out);
  Dataset ds = load_data(cfg, c.synthetic);
  TrainedRun run = start_run(cfg, ds);

  std::optional<FitResult<Real>> progress;
  if (resume && fs::exists(out / "last.ckpt")) {
    // The epoch budget may change between sessions; nothing else may.
    auto budgetless = [](RunConfig r) {
      r.train.max_epochs = 1;
      r.train.patience = 1;
      return config_hash(r);
    };
    if (budgetless(parse_config((out / "config.yaml").string())) != budgetless(cfg)) {
      throw ValidationError("cannot resume: " + (out / "config.yaml").string() +
                            " differs from the current config in more than train.max_epochs/train.patience");
    }
    Checkpoint<Real> last = load_checkpoint<Real>((out / "last.ckpt").string());
    Checkpoint<Real> best = load_checkpoint<Real>((out / "model.ckpt").string());
    restore(last, run.model->params(), &run.adam);
    FitResult<Real> p;
    p.history = parse_history(read_text(out / "history.tsv"));
    while (!p.history.empty() && p.history.back().epoch > last.epoch) p.history.pop_back();
    if (p.history.empty() || p.history.back().epoch != last.epoch) {
      throw ValidationError("cannot resume: history.tsv does not reach epoch " + std::to_string(last.epoch));
    }
    p.best_epoch = last.best_epoch;
    p.best_valid = last.best_valid;
    p.bad_epochs = last.bad_epochs;
    p.best_params = best.values;
    p.epochs_run = static_cast<int>(p.history.size());
    progress = std::move(p);
    note("resuming after epoch " + std::to_string(last.epoch));
  }

  write_text(out / "config.yaml", hash_line(cfg) + serialize_config(cfg));
  auto on_epoch = [&](const FitResult<Real>& f) {
    log_epoch(f.history.back());
    Checkpoint<Real> snap = make_checkpoint(cfg, *run.model, run.adam, f);
    if (f.best_epoch == f.history.back().epoch) save_checkpoint((out / "model.ckpt").string(), snap);
    save_checkpoint((out / "last.ckpt").string(), snap);
    write_text(out / "history.tsv", hash_line(cfg) + history_table(f));
  };
  fit_run(run, cfg, ds, on_epoch, progress ? &*progress : nullptr);

  RankingReport valid = evaluate_split(*run.model, ds, Split::kValid, cfg);
  std::ostringstream s;
  s << "config_hash=" << config_hash(cfg) << "\n"
    << "shape_hash=" << model_shape_hash(run.model->config()) << "\n"
    << "best_epoch=" << run.fit.best_epoch << "\n"
    << "epochs_run=" << (run.fit.history.empty() ? 0 : run.fit.history.back().epoch) << "\n"
    << "best_valid_ndcg10=" << fmt(run.fit.best_valid) << "\n"
    << "n_train_examples=" << ds.data.train.size() << "\n";
  for (const auto& [k, v] : valid.hr) s << "valid_HR@" << k << "=" << fmt(v) << "\n";
  for (const auto& [k, v] : valid.ndcg) s << "valid_NDCG@" << k << "=" << fmt(v) << "\n";
  s << "seed=" << cfg.train.seed << "\n"
    << "version=" << version_string() << "\n";
  write_text(out / "summary.txt", s.str());
  note("best epoch " + std::to_string(run.fit.best_epoch) + ", valid NDCG@10 " + fmt(run.fit.best_valid));
  return 0;
}

// --- eval --------------------------------------------------------------------

// Builds the model described by `cfg` and loads a checkpoint into it, refusing
// checkpoints whose stored shape disagrees with the config.
TrainedRun load_trained(const RunConfig& cfg, const Dataset& ds, const std::string& path, Checkpoint<Real>* out = nullptr) {
  Checkpoint<Real> ck = load_checkpoint<Real>(path);
  TrainedRun run = start_run(cfg, ds);
  const std::string expect = model_shape_hash(run.model->config());
  if (ck.shape_hash != expect) {
    throw ValidationError("checkpoint " + path + " has model shape " + ck.shape_hash + " (config hash " + ck.config_hash +
                          "), but the supplied config describes shape " + expect);
  }
  restore(ck, run.model->params());
  if (out) *out = std::move(ck);
  return run;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& split) {
  RunConfig cfg = load_config(c);
  if (split != "test" && split != "valid") throw ValidationError("--split must be test or valid");
  const fs::path out(c.out);
  DirLock lock(out);
  Dataset ds = load_data(cfg, c.synthetic);
  Checkpoint<Real> ck;
  TrainedRun run = load_trained(cfg, ds, checkpoint, &ck);
  RankingReport r = evaluate_split(*run.model, ds, split == "test" ? Split::kTest : Split::kValid, cfg);
  std::string text = "split=" + split + "\n" + r.to_text() + "checkpoint_config_hash=" + ck.config_hash + "\n";
  write_text(out / "report.txt", text);
  if (!g_quiet) std::cout << text;
  return 0;
}

// --- ablate ------------------------------------------------------------------

int cmd_ablate(const Common& c, int seeds) {
  RunConfig cfg = load_config(c);
  if (seeds < 1) throw ValidationError("--seeds must be >= 1");
  const fs::path out(c.out);
  DirLock lock(out);
  const std::vector<int> ks{10, 20};
  std::ostringstream table;
  table << hash_line(cfg) << "variant\tHR@10\tNDCG@10\tHR@20\tNDCG@20\n";
  for (const auto& [name, flags] : ablation_variants()) {
    std::map<int, double> hr, ndcg;
    for (int s = 0; s < seeds; ++s) {
      RunConfig v = cfg;
      v.model.flags = flags;
      v.train.ks = ks;
      v.train.seed = cfg.train.seed + static_cast<uint64_t>(s);
      v.model.init_seed = cfg.model.init_seed + static_cast<uint64_t>(s);
      v.synth.seed = cfg.synth.seed + static_cast<uint64_t>(s);
      Dataset ds = load_data(v, c.synthetic);
      TrainedRun run = train_run(v, ds);
      RankingReport r = evaluate_split(*run.model, ds, Split::kTest, v);
      for (int k : ks) {
        hr[k] += r.hr.at(k) / seeds;
        ndcg[k] += r.ndcg.at(k) / seeds;
      }
      note(name + " seed " + std::to_string(s) + ": HR@10 " + fmt(r.hr.at(10)) + " (best epoch " +
           std::to_string(run.fit.best_epoch) + ")");
    }
    table << name << '\t' << fmt(hr[10]) << '\t' << fmt(ndcg[10]) << '\t' << fmt(hr[20]) << '\t' << fmt(ndcg[20]) << '\n';
  }
  write_text(out / "ablation.tsv", table.str());
  if (!g_quiet) std::cout << table.str();
  return 0;
}

// --- sweep -------------------------------------------------------------------

struct Axis {
  std::string key;
  std::vector<std::string> values;
};

Axis parse_axis(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size()) {
    throw ValidationError("--grid must look like key=v1,v2,...: '" + spec + "'");
  }
  Axis a;
  a.key = spec.substr(0, eq);
  std::stringstream ss(spec.substr(eq + 1));
  std::string v;
  while (std::getline(ss, v, ',')) {
    if (v.empty()) throw ValidationError("--grid " + a.key + ": empty value");
    a.values.push_back(v);
  }
  return a;
}

std::string cell_name(std::size_t index, const std::vector<std::pair<std::string, std::string>>& assignment) {
  std::string name = "cell" + std::to_string(index);
  for (const auto& [k, v] : assignment) name += "_" + k + "=" + v;
  for (char& ch : name)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '_' || ch == '=' || ch == '-')) ch = '_';
  return name;
}

// Trains and evaluates one cell into its own directory.
void run_cell(const RunConfig& cfg, bool synthetic, const fs::path& dir) {
  DirLock lock(dir);
  write_text(dir / "config.yaml", hash_line(cfg) + serialize_config(cfg));
  Dataset ds = load_data(cfg, synthetic);
  TrainedRun run = train_run(cfg, ds);
  save_checkpoint((dir / "model.ckpt").string(), make_checkpoint(cfg, *run.model, run.adam, run.fit));
  write_text(dir / "history.tsv", hash_line(cfg) + history_table(run.fit));
  RankingReport r = evaluate_split(*run.model, ds, Split::kTest, cfg);
  write_text(dir / "report.txt", "split=test\n" + r.to_text());
}

int exit_code_of(const std::exception& e) {
  if (dynamic_cast<const ValidationError*>(&e)) return 1;
  if (auto* f = dynamic_cast<const FeatureLoadError*>(&e)) return f->kind == FeatureLoadError::Kind::kIo ? 2 : 1;
  return 2;
}

int cmd_sweep(const Common& c, const std::vector<std::string>& grid, int jobs) {
  RunConfig base = load_config(c);
  if (grid.empty()) throw ValidationError("sweep needs at least one --grid key=v1,v2,...");
  if (jobs < 1) throw ValidationError("--jobs must be >= 1");
  std::vector<Axis> axes;
  for (const auto& g : grid) axes.push_back(parse_axis(g));

  // Expand and validate every cell before any training starts.
  std::vector<std::vector<std::pair<std::string, std::string>>> cells{{}};
  for (const auto& a : axes) {
    std::vector<std::vector<std::pair<std::string, std::string>>> next;
    for (const auto& partial : cells)
      for (const auto& v : a.values) {
        auto p = partial;
        p.emplace_back(a.key, v);
        next.push_back(std::move(p));
      }
    cells = std::move(next);
  }
  std::vector<RunConfig> configs;
  for (const auto& cell : cells) {
    RunConfig cfg = base;
    for (const auto& [k, v] : cell) apply_override(cfg, k + "=" + v);
    configs.push_back(cfg);
  }

  const fs::path out(c.out);
  DirLock lock(out);
  std::vector<fs::path> dirs;
  for (std::size_t i = 0; i < cells.size(); ++i) dirs.push_back(out / "cells" / cell_name(i, cells[i]));

  int worst = 0;
  if (jobs == 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      note("cell " + std::to_string(i + 1) + "/" + std::to_string(cells.size()) + ": " + dirs[i].filename().string());
      run_cell(configs[i], c.synthetic, dirs[i]);
    }
  } else {
    std::map<pid_t, std::size_t> running;
    std::size_t next = 0;
    auto reap = [&]() {
      int status = 0;
      const pid_t pid = ::waitpid(-1, &status, 0);
      if (pid < 0) throw std::runtime_error(std::string("waitpid: ") + std::strerror(errno));
      const std::size_t i = running.at(pid);
      running.erase(pid);
      const int code = WIFEXITED(status) ? WEXITSTATUS(status) : 2;
      if (code != 0) std::cerr << "cell " << dirs[i].filename().string() << " failed with exit code " << code << "\n";
      else note("finished " + dirs[i].filename().string());
      worst = std::max(worst, code);
    };
    while (next < cells.size() || !running.empty()) {
      if (next < cells.size() && static_cast<int>(running.size()) < jobs) {
        std::cout.flush();
        std::cerr.flush();
        const pid_t pid = ::fork();
        if (pid < 0) throw std::runtime_error(std::string("fork: ") + std::strerror(errno));
        if (pid == 0) {
          int code = 0;
          try {
            run_cell(configs[next], c.synthetic, dirs[next]);
          } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            code = exit_code_of(e);
          }
          std::cerr.flush();
          ::_exit(code);
        }
        running[pid] = next++;
      } else {
        reap();
      }
    }
    if (worst != 0) return worst;
  }

  std::ostringstream table;
  table << hash_line(base);
  for (const auto& a : axes) table << a.key << '\t';
  table << "HR@10\tNDCG@10\tHR@20\tNDCG@20\tconfig_hash\n";
  std::map<std::pair<std::string, std::string>, std::string> grid2;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    auto kv = read_kv(dirs[i] / "report.txt");
    for (const auto& [k, v] : cells[i]) table << v << '\t';
    table << kv["HR@10"] << '\t' << kv["NDCG@10"] << '\t' << kv["HR@20"] << '\t' << kv["NDCG@20"] << '\t'
          << kv["config_hash"] << '\n';
    if (axes.size() == 2) grid2[{cells[i][0].second, cells[i][1].second}] = kv["HR@10"];
  }
  write_text(out / "sweep.tsv", table.str());
  if (axes.size() == 2) {
    std::ostringstream heat;
    heat << hash_line(base) << "# HR@10\n" << axes[0].key << "\\" << axes[1].key;
    for (const auto& v : axes[1].values) heat << '\t' << v;
    heat << '\n';
    for (const auto& r : axes[0].values) {
      heat << r;
      for (const auto& col : axes[1].values) heat << '\t' << grid2[{r, col}];
      heat << '\n';
    }
    write_text(out / "heatmap.tsv", heat.str());
  }
  if (!g_quiet) std::cout << table.str();
  return 0;
}

// --- project -----------------------------------------------------------------

int cmd_project(const Common& c, const std::string& checkpoint, const std::string& modality, const std::string& truth,
                int max_items) {
  RunConfig cfg = load_config(c);
  if (modality != "im" && modality != "te") throw ValidationError("--modality must be im or te");
  if (max_items < 3) throw ValidationError("--items must be >= 3");
  const fs::path out(c.out);
  DirLock lock(out);
  Dataset ds = load_data(cfg, c.synthetic);
  TrainedRun run = load_trained(cfg, ds, checkpoint);

  std::vector<int> clusters;
  if (!truth.empty()) {
    clusters = read_ground_truth(truth).item_cluster;
  } else if (c.synthetic) {
    clusters = generate(cfg.synth).truth.item_cluster;
  }
  if (!clusters.empty() && static_cast<int>(clusters.size()) != ds.n_items) {
    throw ValidationError("ground truth covers " + std::to_string(clusters.size()) + " items, data has " +
                          std::to_string(ds.n_items));
  }
  const int n = std::min(max_items, ds.n_items);
  std::vector<int32_t> items(n);
  std::vector<int> labels(n, 0);
  for (int i = 0; i < n; ++i) {
    items[i] = i + 1;
    if (!clusters.empty()) labels[i] = clusters[i];
  }
  const Modality m = modality == "im" ? Modality::kImage : Modality::kText;
  auto [raw, den] = run.model->denoise_items(m, items);
  bool degenerate = false;
  auto rows = export_projection(items, raw.cast<double>(), den.cast<double>(), labels, &degenerate);

  std::ostringstream proj;
  proj << hash_line(cfg);
  write_projection(proj, rows);
  write_text(out / "projection.tsv", proj.str());

  Eigen::MatrixXd raw2(n, 2), den2(n, 2);
  for (int i = 0; i < n; ++i) {
    raw2.row(i) << rows[i].x, rows[i].y;
    den2.row(i) << rows[n + i].x, rows[n + i].y;
  }
  std::ostringstream s;
  s << "config_hash=" << config_hash(cfg) << "\n"
    << "modality=" << modality << "\n"
    << "n_items=" << n << "\n"
    << "degenerate=" << (degenerate ? 1 : 0) << "\n";
  if (!clusters.empty()) {
    s << "raw_intra_cluster_variance_ratio=" << fmt(intra_cluster_variance_ratio(raw2, labels)) << "\n"
      << "denoised_intra_cluster_variance_ratio=" << fmt(intra_cluster_variance_ratio(den2, labels)) << "\n";
  }
  s << "version=" << version_string() << "\n";
  write_text(out / "summary.txt", s.str());
  if (!g_quiet) std::cout << s.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal multi-behaviour sequential recommender"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", version_string());
  app.add_flag("-q,--quiet", g_quiet, "Suppress progress output");

  Common common;
  auto add_common = [&](CLI::App* sub, bool needs_out = true) {
    sub->add_option("-c,--config", common.config, "YAML config file (defaults when omitted)")->check(CLI::ExistingFile);
    sub->add_option("--set", common.sets, "Override a config key, e.g. --set schedule.T=10")->take_all();
    auto* o = sub->add_option("-o,--out", common.out, "Output directory");
    if (needs_out) o->required();
  };
  auto add_synthetic = [&](CLI::App* sub) {
    sub->add_flag("--synthetic", common.synthetic, "Generate the dataset in memory from the synth section");
  };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with ground truth");
  add_common(synth);

  bool resume = false;
  auto* train = app.add_subcommand("train", "Train with early stopping; writes model.ckpt and history.tsv");
  add_common(train);
  add_synthetic(train);
  train->add_flag("--resume", resume, "Continue from last.ckpt in the output directory");

  std::string checkpoint, split = "test";
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint; writes report.txt");
  add_common(eval);
  add_synthetic(eval);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", split, "test or valid");

  int seeds = 1;
  auto* ablate = app.add_subcommand("ablate", "Train the full model and five ablations; writes ablation.tsv");
  add_common(ablate);
  add_synthetic(ablate);
  ablate->add_option("--seeds", seeds, "Average over this many consecutive seeds");

  std::vector<std::string> grid;
  int jobs = 1;
  auto* sweep = app.add_subcommand("sweep", "Grid sweep; writes sweep.tsv and heatmap.tsv");
  add_common(sweep);
  add_synthetic(sweep);
  sweep->add_option("--grid", grid, "Axis as key=v1,v2,... (repeatable)")->required();
  sweep->add_option("--jobs", jobs, "Worker processes (1 runs serially)");

  std::string modality = "im", truth;
  int max_items = 500;
  auto* project = app.add_subcommand("project", "2-D projection of raw vs denoised item features");
  add_common(project);
  add_synthetic(project);
  project->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  project->add_option("--modality", modality, "im or te");
  project->add_option("--truth", truth, "Ground-truth archive for cluster labels")->check(CLI::ExistingFile);
  project->add_option("--items", max_items, "Project items 1..N");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*synth) return cmd_synth(common);
    if (*train) return cmd_train(common, resume);
    if (*eval) return cmd_eval(common, checkpoint, split);
    if (*ablate) return cmd_ablate(common, seeds);
    if (*sweep) return cmd_sweep(common, grid, jobs);
    if (*project) return cmd_project(common, checkpoint, modality, truth, max_items);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_of(e);
  }
  return 2;
}
