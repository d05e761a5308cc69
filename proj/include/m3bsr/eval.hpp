#pragma once

// Sampled-candidate ranking evaluation (target + 99 negatives), HR@K and
// NDCG@K, and 2-D PCA projection export.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Eigenvalues>

#include "m3bsr/datamodel.hpp"
#include "m3bsr/rng.hpp"

namespace m3bsr {

inline constexpr int kDefaultNegatives = 99;

// n distinct items from [1, n_items], excluding the target and `exclude`.
inline std::vector<int32_t> sample_negatives(int n_items, int32_t target, const std::vector<int32_t>& exclude,
                                             int n, uint64_t seed) {
  std::vector<uint8_t> banned(static_cast<std::size_t>(n_items) + 1, 0);
  banned[0] = 1;
  if (target >= 1 && target <= n_items) banned[target] = 1;
  for (int32_t e : exclude)
    if (e >= 1 && e <= n_items) banned[e] = 1;
  std::vector<int32_t> eligible;
  eligible.reserve(n_items);
  for (int32_t i = 1; i <= n_items; ++i)
    if (!banned[i]) eligible.push_back(i);
  if (static_cast<int>(eligible.size()) < n) {
    throw ValidationError("sample_negatives: only " + std::to_string(eligible.size()) + " eligible items for " +
                          std::to_string(n) + " negatives");
  }
  std::mt19937_64 rng(seed);
  for (int i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, eligible.size() - 1);
    std::swap(eligible[i], eligible[pick(rng)]);
  }
  eligible.resize(n);
  return eligible;
}

inline int hr_at_k(int rank, int k) { return rank >= 1 && rank <= k ? 1 : 0; }

inline double ndcg_at_k(int rank, int k) {
  if (rank < 1 || rank > k) return 0.0;
  return 1.0 / std::log2(static_cast<double>(rank) + 1.0);
}

// 1-based rank of the target among itself and the negatives. Ties are broken
// by ascending item id.
template <class ScoreOf>
int rank_of_target(int32_t target, const std::vector<int32_t>& negatives, ScoreOf score) {
  const double st = static_cast<double>(score(target));
  int rank = 1;
  for (int32_t n : negatives) {
    const double sn = static_cast<double>(score(n));
    if (sn > st || (sn == st && n < target)) ++rank;
  }
  return rank;
}

struct RankingReport {
  std::map<int, double> hr;
  std::map<int, double> ndcg;
  std::vector<int> ranks;  // per evaluated user, in input order
  int n_users = 0;
  int skipped = 0;
  std::string config_hash;
  std::string version;
  uint64_t seed = 0;

  std::string to_text() const {
    std::ostringstream out;
    out << std::setprecision(10);
    out << "n_users=" << n_users << "\n";
    out << "skipped=" << skipped << "\n";
    for (const auto& [k, v] : hr) out << "HR@" << k << "=" << v << "\n";
    for (const auto& [k, v] : ndcg) out << "NDCG@" << k << "=" << v << "\n";
    out << "config_hash=" << config_hash << "\n";
    out << "seed=" << seed << "\n";
    out << "version=" << version << "\n";
    return out.str();
  }
};

struct EvalCase {
  int64_t user_id = 0;
  int32_t target = kPadId;
  std::vector<int32_t> negatives;
};

// Aggregates metrics from per-case ranks.
inline RankingReport aggregate_ranks(const std::vector<int>& ranks, const std::vector<int>& ks) {
  RankingReport r;
  r.ranks = ranks;
  r.n_users = static_cast<int>(ranks.size());
  for (int k : ks) {
    double hr = 0, nd = 0;
    for (int rank : ranks) {
      hr += hr_at_k(rank, k);
      nd += ndcg_at_k(rank, k);
    }
    r.hr[k] = ranks.empty() ? 0.0 : hr / static_cast<double>(ranks.size());
    r.ndcg[k] = ranks.empty() ? 0.0 : nd / static_cast<double>(ranks.size());
  }
  return r;
}

// Candidate lists for every example: negatives exclude the user's favor
// history and are fixed per (user, target, seed).
inline std::vector<EvalCase> build_eval_cases(const std::vector<Example>& examples,
                                              const std::vector<std::vector<int32_t>>& favor_history, int n_items,
                                              uint64_t seed, int n_negatives = kDefaultNegatives) {
  std::vector<EvalCase> out;
  out.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    EvalCase c;
    c.user_id = examples[i].user_id;
    c.target = examples[i].target;
    c.negatives = sample_negatives(n_items, c.target, favor_history[i], n_negatives,
                                   derive_seed(seed, {static_cast<uint64_t>(c.user_id), static_cast<uint64_t>(c.target)}));
    out.push_back(std::move(c));
  }
  return out;
}

// scorer(i) returns the logit row for example i.
template <class Row>
RankingReport evaluate_cases(const std::vector<EvalCase>& cases, const std::function<Row(std::size_t)>& scorer,
                             const std::vector<int>& ks) {
  std::vector<int> ranks;
  int skipped = 0;
  ranks.reserve(cases.size());
  for (std::size_t i = 0; i < cases.size(); ++i) {
    if (cases[i].negatives.empty()) {
      ++skipped;
      continue;
    }
    Row row = scorer(i);
    ranks.push_back(rank_of_target(cases[i].target, cases[i].negatives, [&](int32_t item) { return row(item); }));
  }
  RankingReport r = aggregate_ranks(ranks, ks);
  r.skipped = skipped;
  return r;
}

// --- projection --------------------------------------------------------------

struct Projection {
  Eigen::MatrixXd coords;  // n x 2
  bool degenerate = false;
};

// Principal-component projection to two dimensions. Each component's sign is
// fixed so its largest-magnitude loading is positive.
inline Projection pca_2d(const Eigen::MatrixXd& x) {
  if (x.rows() < 3) throw ValidationError("pca_2d: need at least 3 points");
  Projection p;
  Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows());
  p.coords = Eigen::MatrixXd::Zero(x.rows(), 2);
  if (cov.trace() <= 1e-300) {
    p.degenerate = true;
    return p;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::Index d = cov.rows();
  for (int c = 0; c < 2 && c < d; ++c) {
    Eigen::VectorXd v = es.eigenvectors().col(d - 1 - c);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    p.coords.col(c) = centered * v;
  }
  return p;
}

struct ProjectionRow {
  int32_t item_id;
  double x, y;
  std::string variant;
  int label;
};

inline std::vector<ProjectionRow> export_projection(const std::vector<int32_t>& items, const Eigen::MatrixXd& raw,
                                                    const Eigen::MatrixXd& denoised, const std::vector<int>& labels,
                                                    bool* degenerate = nullptr) {
  std::vector<ProjectionRow> rows;
  bool degen = false;
  const std::pair<const char*, const Eigen::MatrixXd*> sets[2] = {{"raw", &raw}, {"denoised", &denoised}};
  for (const auto& [name, m] : sets) {
    Projection p = pca_2d(*m);
    degen = degen || p.degenerate;
    for (Eigen::Index i = 0; i < m->rows(); ++i) {
      rows.push_back({items[i], p.coords(i, 0), p.coords(i, 1), name, labels[i]});
    }
  }
  if (degenerate) *degenerate = degen;
  return rows;
}

inline void write_projection(std::ostream& out, const std::vector<ProjectionRow>& rows) {
  out << "item_id\tx\ty\tvariant\tlabel\n" << std::setprecision(9);
  for (const auto& r : rows) out << r.item_id << '\t' << r.x << '\t' << r.y << '\t' << r.variant << '\t' << r.label << '\n';
}

inline void write_projection(const std::string& path, const std::vector<ProjectionRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_projection(out, rows);
}

// Within-cluster variance as a fraction of total variance (scale free).
inline double intra_cluster_variance_ratio(const Eigen::MatrixXd& coords, const std::vector<int>& labels) {
  Eigen::RowVectorXd mean = coords.colwise().mean();
  double total = (coords.rowwise() - mean).squaredNorm();
  if (total <= 0) return 0.0;
  std::map<int, std::vector<Eigen::Index>> groups;
  for (Eigen::Index i = 0; i < coords.rows(); ++i) groups[labels[i]].push_back(i);
  double within = 0;
  for (const auto& [_, idx] : groups) {
    Eigen::RowVectorXd c = Eigen::RowVectorXd::Zero(coords.cols());
    for (auto i : idx) c += coords.row(i);
    c /= static_cast<double>(idx.size());
    for (auto i : idx) within += (coords.row(i) - c).squaredNorm();
  }
  return within / total;
}

}  // namespace m3bsr
