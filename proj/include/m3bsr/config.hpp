#pragma once

// Run configuration: nested `section: {key: value}` YAML text, dotted-path
// overrides (`--set schedule.T=10`), validation, canonical serialisation and
// hashing.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "m3bsr/model.hpp"
#include "m3bsr/synthgen.hpp"
#include "m3bsr/trainer.hpp"

namespace m3bsr {

class ConfigError : public ValidationError {
 public:
  ConfigError(const std::string& key, int line, const std::string& what)
      : ValidationError(format(key, line, what)), key_(key), line_(line) {}
  const std::string& key() const { return key_; }
  int line() const { return line_; }

 private:
  static std::string format(const std::string& key, int line, const std::string& what) {
    std::string s = "config";
    if (line > 0) s += " line " + std::to_string(line);
    if (!key.empty()) s += " key '" + key + "'";
    return s + ": " + what;
  }
  std::string key_;
  int line_;
};

struct DataPaths {
  std::string interactions;
  std::string image_features;
  std::string text_features;
  int min_len = 5;
  int max_len = 50;

  bool operator==(const DataPaths&) const = default;
};

struct RunConfig {
  DataPaths data;
  SynthConfig synth;
  ModelConfig model;  // n_items comes from the data, not the file
  TrainOptions train;
  int n_negatives = kDefaultNegatives;

  RunConfig() {
    synth.d_mod = model.d_mod;
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Field {
  std::string path;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;  // throws std::invalid_argument
  bool quoted = false;
};

inline int parse_int(const std::string& s) {
  std::size_t pos = 0;
  long long v = std::stoll(s, &pos);
  if (pos != s.size() || v < INT32_MIN || v > INT32_MAX) throw std::invalid_argument("expected an integer, got '" + s + "'");
  return static_cast<int>(v);
}

inline uint64_t parse_u64(const std::string& s) {
  if (s.empty() || s[0] == '-') throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
  std::size_t pos = 0;
  unsigned long long v = std::stoull(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
  return v;
}

inline double parse_double(const std::string& s) {
  std::size_t pos = 0;
  double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("expected a number, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw std::invalid_argument("expected true or false, got '" + s + "'");
}

inline std::vector<int> parse_int_list(std::string s) {
  if (!s.empty() && s.front() == '[' && s.back() == ']') s = s.substr(1, s.size() - 2);
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw std::invalid_argument("empty list element");
    out.push_back(parse_int(item.substr(b, e - b + 1)));
  }
  if (out.empty()) throw std::invalid_argument("expected a non-empty integer list");
  return out;
}

inline std::string int_list(const std::vector<int>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s + "]";
}

#define M3BSR_INT(P, M) Field{P, [](const RunConfig& c) { return std::to_string(c.M); }, [](RunConfig& c, const std::string& s) { c.M = parse_int(s); }}
#define M3BSR_U64(P, M) Field{P, [](const RunConfig& c) { return std::to_string(c.M); }, [](RunConfig& c, const std::string& s) { c.M = parse_u64(s); }}
#define M3BSR_DBL(P, M) Field{P, [](const RunConfig& c) { return format_double(c.M); }, [](RunConfig& c, const std::string& s) { c.M = parse_double(s); }}
#define M3BSR_BOOL(P, M) Field{P, [](const RunConfig& c) { return std::string(c.M ? "true" : "false"); }, [](RunConfig& c, const std::string& s) { c.M = parse_bool(s); }}
#define M3BSR_STR(P, M) Field{P, [](const RunConfig& c) { return c.M; }, [](RunConfig& c, const std::string& s) { c.M = s; }, true}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      M3BSR_STR("data.interactions", data.interactions),
      M3BSR_STR("data.image_features", data.image_features),
      M3BSR_STR("data.text_features", data.text_features),
      M3BSR_INT("data.min_len", data.min_len),
      M3BSR_INT("data.max_len", data.max_len),

      M3BSR_INT("synth.n_users", synth.n_users),
      M3BSR_INT("synth.n_items", synth.n_items),
      M3BSR_INT("synth.d_latent", synth.d_latent),
      M3BSR_INT("synth.favor_len", synth.favor_len),
      M3BSR_INT("synth.click_len", synth.click_len),
      M3BSR_INT("synth.n_clusters", synth.n_clusters),
      M3BSR_DBL("synth.cluster_spread", synth.cluster_spread),
      M3BSR_DBL("synth.temperature", synth.temperature),
      M3BSR_DBL("synth.click_noise_rate", synth.click_noise_rate),
      M3BSR_DBL("synth.modality_noise_sigma", synth.modality_noise_sigma),
      M3BSR_U64("synth.seed", synth.seed),

      M3BSR_INT("model.d_id", model.d_id),
      M3BSR_INT("model.d_mod", model.d_mod),
      M3BSR_INT("model.d_h", model.d_h),
      M3BSR_INT("model.heads", model.heads),
      M3BSR_INT("model.expert_depth", model.expert_depth),
      M3BSR_INT("model.ff_width", model.ff_width),
      M3BSR_INT("model.seq_len", model.seq_len),
      M3BSR_BOOL("model.positional", model.positional),
      M3BSR_BOOL("model.id_post_linear", model.id_post_linear),
      M3BSR_BOOL("model.stop_grad_denoise", model.stop_grad_denoise),
      M3BSR_U64("model.init_seed", model.init_seed),

      M3BSR_INT("schedule.T", model.T),
      M3BSR_DBL("schedule.beta_min", model.beta_min),
      M3BSR_DBL("schedule.beta_max", model.beta_max),

      M3BSR_DBL("weights.lambda_c", model.weights.lambda_c),
      M3BSR_DBL("weights.lambda_m", model.weights.lambda_m),
      M3BSR_DBL("weights.lambda_b", model.weights.lambda_b),
      M3BSR_DBL("weights.tau", model.tau),
      Field{"weights.disent_mode", [](const RunConfig& c) { return std::string(disentangle_mode_token(c.model.disent_mode)); },
            [](RunConfig& c, const std::string& s) {
              if (s != "literal" && s != "uniformity") throw std::invalid_argument("expected literal or uniformity, got '" + s + "'");
              c.model.disent_mode = parse_disentangle_mode(s);
            }},

      M3BSR_BOOL("ablation.use_cdmd_m", model.flags.use_cdmd_m),
      M3BSR_BOOL("ablation.use_cdmd_b", model.flags.use_cdmd_b),
      M3BSR_BOOL("ablation.use_meie", model.flags.use_meie),
      M3BSR_BOOL("ablation.use_shared_expert", model.flags.use_shared_expert),
      M3BSR_BOOL("ablation.use_disent", model.flags.use_disent),

      M3BSR_DBL("train.lr", train.lr),
      M3BSR_INT("train.batch_size", train.batch_size),
      M3BSR_INT("train.max_epochs", train.max_epochs),
      M3BSR_INT("train.patience", train.patience),
      M3BSR_U64("train.seed", train.seed),

      Field{"eval.ks", [](const RunConfig& c) { return int_list(c.train.ks); },
            [](RunConfig& c, const std::string& s) { c.train.ks = parse_int_list(s); }},
      M3BSR_INT("eval.n_negatives", n_negatives),
  };
  return f;
}

#undef M3BSR_INT
#undef M3BSR_U64
#undef M3BSR_DBL
#undef M3BSR_BOOL
#undef M3BSR_STR

inline const Field* find_field(const std::string& path) {
  for (const auto& f : fields())
    if (f.path == path) return &f;
  return nullptr;
}

inline void apply(RunConfig& c, const std::string& path, const std::string& value, int line) {
  const Field* f = find_field(path);
  if (!f) throw ConfigError(path, line, "unknown key");
  try {
    f->set(c, value);
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    if (msg == "stoll" || msg == "stoull" || msg == "stod") msg = "type mismatch for value '" + value + "'";
    throw ConfigError(path, line, msg);
  } catch (const std::out_of_range&) {
    throw ConfigError(path, line, "value '" + value + "' out of range");
  }
}

inline void walk(RunConfig& c, const YAML::Node& node, const std::string& prefix, std::vector<std::pair<std::string, int>>& seen) {
  for (auto it = node.begin(); it != node.end(); ++it) {
    const std::string key = it->first.as<std::string>();
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    const YAML::Node& v = it->second;
    const int line = it->first.Mark().line + 1;
    if (v.IsMap()) {
      walk(c, v, path, seen);
    } else if (v.IsSequence()) {
      std::string joined;
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (!v[i].IsScalar()) throw ConfigError(path, line, "nested lists are not allowed");
        joined += (i ? "," : "") + v[i].as<std::string>();
      }
      apply(c, path, joined, line);
      seen.emplace_back(path, line);
    } else if (v.IsScalar()) {
      apply(c, path, v.as<std::string>(), line);
      seen.emplace_back(path, line);
    } else if (v.IsNull()) {
      throw ConfigError(path, line, "missing value");
    }
  }
}

}  // namespace detail

inline int config_line_of(const std::vector<std::pair<std::string, int>>& seen, const std::string& key) {
  for (const auto& [k, l] : seen)
    if (k == key) return l;
  return 0;
}

// Range checks; `lines` maps keys to source lines for error messages.
inline void validate_config(const RunConfig& c, const std::vector<std::pair<std::string, int>>& lines = {}) {
  auto fail = [&](const std::string& key, const std::string& what) {
    throw ConfigError(key, config_line_of(lines, key), what);
  };
  auto unit = [&](const std::string& key, double v) {
    if (!(v >= 0.0 && v <= 1.0)) fail(key, "must lie in [0, 1]");
  };
  const ModelConfig& m = c.model;
  unit("weights.lambda_c", m.weights.lambda_c);
  unit("weights.lambda_m", m.weights.lambda_m);
  unit("weights.lambda_b", m.weights.lambda_b);
  if (!(m.tau > 0)) fail("weights.tau", "must be > 0");
  if (m.T < 1) fail("schedule.T", "must be >= 1");
  if (!(m.beta_min > 0 && m.beta_min < 1)) fail("schedule.beta_min", "must lie in (0, 1)");
  if (!(m.beta_max >= m.beta_min && m.beta_max < 1)) fail("schedule.beta_max", "must lie in [beta_min, 1)");
  if (m.d_id < 1) fail("model.d_id", "must be >= 1");
  if (m.d_mod < 1) fail("model.d_mod", "must be >= 1");
  if (m.d_h < 1) fail("model.d_h", "must be >= 1");
  if (m.heads < 1) fail("model.heads", "must be >= 1");
  if (m.d_h % m.heads != 0) fail("model.heads", "must divide model.d_h");
  if (m.expert_depth < 1) fail("model.expert_depth", "must be >= 1");
  if (m.ff_width < 0) fail("model.ff_width", "must be >= 0");
  if (m.seq_len < 1) fail("model.seq_len", "must be >= 1");
  if (c.data.min_len < 2) fail("data.min_len", "must be >= 2");
  if (c.data.max_len < c.data.min_len) fail("data.max_len", "must be >= data.min_len");
  if (!(c.train.lr >= 0)) fail("train.lr", "must be >= 0");
  if (c.train.batch_size < 1) fail("train.batch_size", "must be >= 1");
  if (c.train.max_epochs < 1) fail("train.max_epochs", "must be >= 1");
  if (c.train.patience < 1) fail("train.patience", "must be >= 1");
  for (int k : c.train.ks)
    if (k < 1) fail("eval.ks", "entries must be >= 1");
  if (c.n_negatives < 1) fail("eval.n_negatives", "must be >= 1");
  for (const auto& [key, path] : {std::pair{"data.interactions", &c.data.interactions},
                                  std::pair{"data.image_features", &c.data.image_features},
                                  std::pair{"data.text_features", &c.data.text_features}}) {
    if (!path->empty() && !std::filesystem::exists(*path)) fail(key, "file '" + *path + "' does not exist");
  }
  try {
    SynthConfig s = c.synth;
    s.d_mod = m.d_mod;
    s.validate();
  } catch (const ValidationError& e) {
    fail("synth", e.what());
  }
}

inline RunConfig parse_config_text(const std::string& text) {
  RunConfig c;
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError("", e.mark.line + 1, e.msg);
  }
  std::vector<std::pair<std::string, int>> seen;
  if (root.IsMap()) {
    detail::walk(c, root, "", seen);
  } else if (!root.IsNull()) {
    throw ConfigError("", 1, "top level must be a mapping");
  }
  c.synth.d_mod = c.model.d_mod;
  validate_config(c, seen);
  return c;
}

inline RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", 0, "cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// Applies one `key=value` override and revalidates.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, 0, "override must look like key=value");
  detail::apply(c, assignment.substr(0, eq), assignment.substr(eq + 1), 0);
  c.synth.d_mod = c.model.d_mod;
  validate_config(c);
}

inline std::string get_config_value(const RunConfig& c, const std::string& path) {
  const detail::Field* f = detail::find_field(path);
  if (!f) throw ConfigError(path, 0, "unknown key");
  return f->get(c);
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : detail::fields()) out.push_back(f.path);
  return out;
}

// Canonical text: every key, grouped by section, in registry order.
inline std::string serialize_config(const RunConfig& c) {
  std::ostringstream out;
  std::string section;
  for (const auto& f : detail::fields()) {
    const auto dot = f.path.find('.');
    const std::string sec = f.path.substr(0, dot);
    if (sec != section) {
      out << sec << ":\n";
      section = sec;
    }
    std::string v = f.get(c);
    if (f.quoted) {
      YAML::Emitter e;
      e << YAML::DoubleQuoted << v;
      v = e.c_str();
    }
    out << "  " << f.path.substr(dot + 1) << ": " << v << "\n";
  }
  return out.str();
}

inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a64(serialize_config(c))); }

// Hash of the keys that fix parameter names and shapes.
inline std::string model_shape_hash(const ModelConfig& m) {
  std::ostringstream s;
  s << "n_items=" << m.n_items << ";d_id=" << m.d_id << ";d_mod=" << m.d_mod << ";d_h=" << m.d_h << ";heads=" << m.heads
    << ";depth=" << m.expert_depth << ";ff=" << m.ff() << ";seq_len=" << m.seq_len << ";T=" << m.T
    << ";positional=" << m.positional << ";id_post=" << m.id_post_linear;
  return hex64(fnv1a64(s.str()));
}

}  // namespace m3bsr
