#pragma once

// Versioned binary checkpoint: named parameter arrays with shapes, optimiser
// moments, training counters, config/shape hashes and the seed from which
// every training stream is derived.
//
// Layout (little endian):
//   "M3CK" u32 version u8 scalar_bytes
//   str config_hash str shape_hash str version_string
//   u64 seed i32 epoch i32 best_epoch f64 best_valid i32 bad_epochs i64 adam_steps
//   u32 n_params { str name u8 pad_row u32 rows u32 cols scalar[rows*cols] x3 (value, m, v) }
// where str is u32 length + bytes.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "m3bsr/params.hpp"

namespace m3bsr {

inline constexpr char kCheckpointMagic[4] = {'M', '3', 'C', 'K'};
inline constexpr uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class S>
struct Checkpoint {
  std::string config_hash;
  std::string shape_hash;
  std::string version;
  uint64_t seed = 0;
  int32_t epoch = 0;       // last completed epoch
  int32_t best_epoch = 0;
  double best_valid = 0.0;
  int32_t bad_epochs = 0;  // patience counter
  int64_t adam_steps = 0;
  std::vector<std::string> names;
  std::vector<uint8_t> pad_rows;
  std::vector<Mat<S>> values, m, v;

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <class T>
  void pod(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(const std::string& s) {
    pod<uint32_t>(static_cast<uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  template <class S>
  void mat(const Mat<S>& m) {
    out_.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(S)));
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string what) : in_(in), what_(std::move(what)) {}
  template <class T>
  T pod() {
    T v;
    read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
  }
  std::string str() {
    const uint32_t n = pod<uint32_t>();
    if (n > (1u << 20)) throw CheckpointError(what_ + ": implausible string length");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  template <class S>
  void mat(Mat<S>& m) {
    read(reinterpret_cast<char*>(m.data()), m.size() * sizeof(S));
  }

 private:
  void read(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw CheckpointError(what_ + ": truncated");
  }
  std::istream& in_;
  std::string what_;
};

}  // namespace detail

// Snapshot of a parameter store and optimiser.
template <class S>
Checkpoint<S> capture(const ParamStore<S>& store, const Adam<S>& adam) {
  Checkpoint<S> c;
  for (int i = 0; i < store.size(); ++i) {
    c.names.push_back(store[i].name);
    c.pad_rows.push_back(store[i].pad_row ? 1 : 0);
    c.values.push_back(store[i].value);
    c.m.push_back(adam.first_moments().empty() ? Mat<S>::Zero(store[i].value.rows(), store[i].value.cols())
                                                : adam.first_moments()[i]);
    c.v.push_back(adam.second_moments().empty() ? Mat<S>::Zero(store[i].value.rows(), store[i].value.cols())
                                                 : adam.second_moments()[i]);
  }
  c.adam_steps = adam.steps();
  return c;
}

// Copies checkpoint arrays into a store registered with the same names and
// shapes (and the optimiser, when given).
template <class S>
void restore(const Checkpoint<S>& c, ParamStore<S>& store, Adam<S>* adam = nullptr) {
  if (static_cast<int>(c.names.size()) != store.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(c.names.size()) + " parameters, model has " +
                          std::to_string(store.size()));
  }
  for (int i = 0; i < store.size(); ++i) {
    const auto& p = store[i];
    if (c.names[i] != p.name) throw CheckpointError("checkpoint parameter " + c.names[i] + " where model expects " + p.name);
    if (c.values[i].rows() != p.value.rows() || c.values[i].cols() != p.value.cols()) {
      throw CheckpointError("shape mismatch for parameter " + p.name);
    }
  }
  for (int i = 0; i < store.size(); ++i) store[i].value = c.values[i];
  if (adam) {
    adam->first_moments() = c.m;
    adam->second_moments() = c.v;
    adam->set_steps(c.adam_steps);
  }
}

template <class S>
void write_checkpoint(std::ostream& out, const Checkpoint<S>& c) {
  detail::Writer w(out);
  out.write(kCheckpointMagic, 4);
  w.pod<uint32_t>(kCheckpointVersion);
  w.pod<uint8_t>(sizeof(S));
  w.str(c.config_hash);
  w.str(c.shape_hash);
  w.str(c.version);
  w.pod<uint64_t>(c.seed);
  w.pod<int32_t>(c.epoch);
  w.pod<int32_t>(c.best_epoch);
  w.pod<double>(c.best_valid);
  w.pod<int32_t>(c.bad_epochs);
  w.pod<int64_t>(c.adam_steps);
  w.pod<uint32_t>(static_cast<uint32_t>(c.names.size()));
  for (std::size_t i = 0; i < c.names.size(); ++i) {
    w.str(c.names[i]);
    w.pod<uint8_t>(c.pad_rows[i]);
    w.pod<uint32_t>(static_cast<uint32_t>(c.values[i].rows()));
    w.pod<uint32_t>(static_cast<uint32_t>(c.values[i].cols()));
    w.mat(c.values[i]);
    w.mat(c.m[i]);
    w.mat(c.v[i]);
  }
}

template <class S>
Checkpoint<S> read_checkpoint(std::istream& in, const std::string& what = "checkpoint") {
  detail::Reader r(in, what);
  char magic[4];
  for (char& ch : magic) ch = r.pod<char>();
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw CheckpointError(what + ": bad magic");
  const uint32_t version = r.pod<uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(what + ": unsupported version " + std::to_string(version));
  }
  const uint8_t bytes = r.pod<uint8_t>();
  if (bytes != sizeof(S)) {
    throw CheckpointError(what + ": stored with " + std::to_string(bytes) + "-byte scalars, expected " +
                          std::to_string(sizeof(S)));
  }
  Checkpoint<S> c;
  c.config_hash = r.str();
  c.shape_hash = r.str();
  c.version = r.str();
  c.seed = r.pod<uint64_t>();
  c.epoch = r.pod<int32_t>();
  c.best_epoch = r.pod<int32_t>();
  c.best_valid = r.pod<double>();
  c.bad_epochs = r.pod<int32_t>();
  c.adam_steps = r.pod<int64_t>();
  const uint32_t n = r.pod<uint32_t>();
  for (uint32_t i = 0; i < n; ++i) {
    c.names.push_back(r.str());
    c.pad_rows.push_back(r.pod<uint8_t>());
    const uint32_t rows = r.pod<uint32_t>(), cols = r.pod<uint32_t>();
    if (static_cast<uint64_t>(rows) * cols > (1ULL << 32)) throw CheckpointError(what + ": implausible shape");
    for (auto* dst : {&c.values, &c.m, &c.v}) {
      Mat<S> m(rows, cols);
      r.mat(m);
      dst->push_back(std::move(m));
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError(what + ": trailing bytes");
  return c;
}

template <class S>
void save_checkpoint(const std::string& path, const Checkpoint<S>& c) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp);
    write_checkpoint(out, c);
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("cannot move " + tmp + " to " + path);
}

template <class S>
Checkpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + path);
  return read_checkpoint<S>(in, path);
}

}  // namespace m3bsr
