#pragma once

// Interaction events, dual-behaviour user histories, leave-one-out splits
// and fixed-length padding.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "m3bsr/tensor.hpp"

namespace m3bsr {

enum class Behavior : uint8_t { kClick = 0, kFavor = 1 };

inline const char* behavior_token(Behavior b) { return b == Behavior::kClick ? "cl" : "fa"; }

inline Behavior parse_behavior(const std::string& token) {
  if (token == "cl") return Behavior::kClick;
  if (token == "fa") return Behavior::kFavor;
  throw ValidationError("unknown behavior token '" + token + "' (expected cl or fa)");
}

struct InteractionEvent {
  int64_t user_id = 0;
  int64_t item_id = 0;
  Behavior behavior = Behavior::kClick;
  int64_t timestamp = 0;
};

struct UserHistory {
  int64_t user_id = 0;
  std::vector<int32_t> click_items;
  std::vector<int32_t> favor_items;
  std::vector<int64_t> click_times;
  std::vector<int64_t> favor_times;
};

inline constexpr int kDefaultMinLength = 5;
inline constexpr int kDefaultMaxLength = 50;
inline constexpr int32_t kPadId = 0;

// Groups events per user, orders each behaviour list by (timestamp, input
// order), drops users with fewer than min_len events in total, and keeps the
// max_len most recent items of each behaviour independently.
inline std::map<int64_t, UserHistory> build_histories(const std::vector<InteractionEvent>& events,
                                                      int min_len = kDefaultMinLength,
                                                      int max_len = kDefaultMaxLength) {
  if (events.empty()) throw ValidationError("build_histories: no events");
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    if (e.user_id < 0 || e.item_id < 0 || e.timestamp < 0) {
      throw ValidationError("build_histories: record " + std::to_string(i) + " (user " + std::to_string(e.user_id) +
                            ", item " + std::to_string(e.item_id) + ") has a negative field");
    }
    if (e.item_id > INT32_MAX) throw ValidationError("build_histories: record " + std::to_string(i) + " item id overflow");
  }

  std::map<int64_t, std::vector<std::size_t>> by_user;
  for (std::size_t i = 0; i < events.size(); ++i) by_user[events[i].user_id].push_back(i);

  std::map<int64_t, UserHistory> out;
  for (auto& [user, idx] : by_user) {
    if (static_cast<int>(idx.size()) < min_len) continue;
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return events[a].timestamp < events[b].timestamp; });
    UserHistory h;
    h.user_id = user;
    for (std::size_t i : idx) {
      const auto& e = events[i];
      if (e.behavior == Behavior::kClick) {
        h.click_items.push_back(static_cast<int32_t>(e.item_id));
        h.click_times.push_back(e.timestamp);
      } else {
        h.favor_items.push_back(static_cast<int32_t>(e.item_id));
        h.favor_times.push_back(e.timestamp);
      }
    }
    auto keep_tail = [max_len](auto& v) {
      if (static_cast<int>(v.size()) > max_len) v.erase(v.begin(), v.end() - max_len);
    };
    keep_tail(h.click_items);
    keep_tail(h.click_times);
    keep_tail(h.favor_items);
    keep_tail(h.favor_times);
    out.emplace(user, std::move(h));
  }
  return out;
}

// Right-aligned padding: the last min(len, L) items occupy the tail of the
// row, earlier slots hold kPadId with mask 0.
inline std::pair<IdRow, MaskRow> pad_truncate(const std::vector<int32_t>& items, int length = kDefaultMaxLength) {
  if (length < 1) throw ValidationError("pad_truncate: length must be >= 1");
  IdRow ids(length, kPadId);
  MaskRow mask(length, 0);
  const int n = std::min<int>(length, static_cast<int>(items.size()));
  std::copy(items.end() - n, items.end(), ids.end() - n);
  std::fill(mask.end() - n, mask.end(), uint8_t{1});
  return {ids, mask};
}

struct SplitSpec {
  UserHistory history;
  int32_t valid_target = kPadId;
  int32_t test_target = kPadId;
  // Favor items strictly before the validation target.
  std::vector<int32_t> train_favor_context;
};

// Holds out the last favor as the test target and the one before it as the
// validation target. Requires at least two favors.
inline SplitSpec split_leave_one_out(const UserHistory& h) {
  const std::size_t n = h.favor_items.size();
  if (n < 2) {
    throw ValidationError("split_leave_one_out: user " + std::to_string(h.user_id) + " has " + std::to_string(n) +
                          " favor events (need >= 2)");
  }
  SplitSpec s;
  s.history = h;
  s.test_target = h.favor_items[n - 1];
  s.valid_target = h.favor_items[n - 2];
  s.train_favor_context.assign(h.favor_items.begin(), h.favor_items.end() - 2);
  return s;
}

struct SplitSet {
  std::vector<SplitSpec> splits;
  int excluded = 0;  // users with fewer than two favors
};

inline SplitSet split_all(const std::map<int64_t, UserHistory>& histories) {
  SplitSet out;
  for (const auto& [_, h] : histories) {
    if (h.favor_items.size() < 2) {
      ++out.excluded;
      continue;
    }
    out.splits.push_back(split_leave_one_out(h));
  }
  return out;
}

// One prediction step: the padded click/favor windows preceding a target.
struct Example {
  int64_t user_id = 0;
  IdRow click_ids;
  MaskRow click_mask;
  IdRow favor_ids;
  MaskRow favor_mask;
  int32_t target = kPadId;
};

// Builds the input window for predicting favor_items[k]: favors before k and
// clicks strictly earlier than that favor's timestamp. Occurrences of the
// target item are removed from both windows.
inline Example make_example(const UserHistory& h, std::size_t k, int length) {
  if (k >= h.favor_items.size()) throw ValidationError("make_example: step beyond favor history");
  const int32_t target = h.favor_items[k];
  const int64_t t_target = h.favor_times[k];
  std::vector<int32_t> favors, clicks;
  for (std::size_t i = 0; i < k; ++i)
    if (h.favor_items[i] != target) favors.push_back(h.favor_items[i]);
  for (std::size_t i = 0; i < h.click_items.size(); ++i)
    if (h.click_times[i] < t_target && h.click_items[i] != target) clicks.push_back(h.click_items[i]);
  Example ex;
  ex.user_id = h.user_id;
  ex.target = target;
  std::tie(ex.click_ids, ex.click_mask) = pad_truncate(clicks, length);
  std::tie(ex.favor_ids, ex.favor_mask) = pad_truncate(favors, length);
  return ex;
}

inline Example make_test_example(const SplitSpec& s, int length) {
  return make_example(s.history, s.history.favor_items.size() - 1, length);
}

inline Example make_valid_example(const SplitSpec& s, int length) {
  return make_example(s.history, s.history.favor_items.size() - 2, length);
}

// Training steps predict every favor before the validation target that has
// at least one context item.
inline std::vector<Example> make_train_examples(const SplitSpec& s, int length) {
  std::vector<Example> out;
  const std::size_t n = s.history.favor_items.size();
  for (std::size_t k = 0; k + 2 < n; ++k) {
    Example ex = make_example(s.history, k, length);
    if (mask_count(ex.click_mask) + mask_count(ex.favor_mask) == 0) continue;
    out.push_back(std::move(ex));
  }
  return out;
}

struct Batch {
  std::vector<IdRow> click_ids, favor_ids;
  std::vector<MaskRow> click_mask, favor_mask;
  std::vector<int32_t> targets;
  std::size_t size() const { return targets.size(); }
};

inline Batch collate(const std::vector<Example>& examples, const std::vector<std::size_t>& indices) {
  Batch b;
  for (std::size_t i : indices) {
    const auto& e = examples[i];
    b.click_ids.push_back(e.click_ids);
    b.favor_ids.push_back(e.favor_ids);
    b.click_mask.push_back(e.click_mask);
    b.favor_mask.push_back(e.favor_mask);
    b.targets.push_back(e.target);
  }
  return b;
}

// Tab-separated interaction log with a header row:
//   user_id  item_id  behavior  timestamp
inline std::vector<InteractionEvent> read_interactions(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("interaction log: missing header row");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "user_id\titem_id\tbehavior\ttimestamp") {
    throw ValidationError("interaction log: bad header '" + line + "'");
  }
  std::vector<InteractionEvent> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string u, i, b, t, extra;
    if (!std::getline(ss, u, '\t') || !std::getline(ss, i, '\t') || !std::getline(ss, b, '\t') ||
        !std::getline(ss, t, '\t') || std::getline(ss, extra, '\t')) {
      throw ValidationError("interaction log line " + std::to_string(lineno) + ": expected 4 tab-separated columns");
    }
    InteractionEvent e;
    try {
      std::size_t pos = 0;
      e.user_id = std::stoll(u, &pos);
      if (pos != u.size()) throw std::invalid_argument(u);
      e.item_id = std::stoll(i, &pos);
      if (pos != i.size()) throw std::invalid_argument(i);
      e.timestamp = std::stoll(t, &pos);
      if (pos != t.size()) throw std::invalid_argument(t);
    } catch (const std::logic_error&) {
      throw ValidationError("interaction log line " + std::to_string(lineno) + ": non-integer field");
    }
    try {
      e.behavior = parse_behavior(b);
    } catch (const ValidationError& err) {
      throw ValidationError("interaction log line " + std::to_string(lineno) + ": " + err.what());
    }
    if (e.user_id < 0 || e.item_id < 0 || e.timestamp < 0) {
      throw ValidationError("interaction log line " + std::to_string(lineno) + ": negative field");
    }
    out.push_back(e);
  }
  return out;
}

inline std::vector<InteractionEvent> read_interactions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open interaction log " + path);
  return read_interactions(in);
}

inline void write_interactions(std::ostream& out, const std::vector<InteractionEvent>& events) {
  out << "user_id\titem_id\tbehavior\ttimestamp\n";
  for (const auto& e : events) {
    out << e.user_id << '\t' << e.item_id << '\t' << behavior_token(e.behavior) << '\t' << e.timestamp << '\n';
  }
}

inline void write_interactions(const std::string& path, const std::vector<InteractionEvent>& events) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write interaction log " + path);
  write_interactions(out, events);
}

}  // namespace m3bsr
