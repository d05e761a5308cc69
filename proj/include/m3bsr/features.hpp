#pragma once

// Per-item modality embeddings: a trainable ID table and frozen image/text
// feature matrices, plus the binary feature-file format.
//
// Feature file (little-endian):
//   "M3BF" | u8 modality (1 = image, 2 = text) | u32 n_items | u32 d_mod |
//   n_items * d_mod float32, row-major. The pad row is not stored.

#include <array>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "m3bsr/autograd.hpp"
#include "m3bsr/nn.hpp"

namespace m3bsr {

enum class Modality : uint8_t { kId = 0, kImage = 1, kText = 2 };

inline const char* modality_token(Modality m) {
  switch (m) {
    case Modality::kId: return "id";
    case Modality::kImage: return "im";
    case Modality::kText: return "te";
  }
  return "?";
}

template <class S>
struct FeatureMatrix {
  Modality modality = Modality::kImage;
  Mat<S> values;  // [(n_items + 1) x d_mod], row 0 is the zero pad row

  int n_items() const { return static_cast<int>(values.rows()) - 1; }
  int dim() const { return static_cast<int>(values.cols()); }

  // From an [n_items x d] matrix without the pad row.
  static FeatureMatrix from_items(Modality m, const Mat<S>& items) {
    FeatureMatrix f;
    f.modality = m;
    f.values = Mat<S>::Zero(items.rows() + 1, items.cols());
    f.values.bottomRows(items.rows()) = items;
    return f;
  }
};

struct FeatureLoadError : std::runtime_error {
  enum class Kind { kIo, kMagic, kModality, kDimension, kTruncated, kNonFinite };
  Kind kind;
  FeatureLoadError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

namespace detail {

inline void put_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32(std::istream& in, uint32_t& v) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) return false;
  v = uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
  return true;
}

inline void put_f32(std::ostream& out, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

inline bool get_f32(std::istream& in, float& f) {
  uint32_t bits;
  if (!get_u32(in, bits)) return false;
  std::memcpy(&f, &bits, 4);
  return true;
}

}  // namespace detail

template <class S>
void write_feature_matrix(const std::string& path, const FeatureMatrix<S>& m) {
  if (m.modality == Modality::kId) throw ValidationError("feature files hold image or text features only");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FeatureLoadError(FeatureLoadError::Kind::kIo, "cannot write " + path);
  out.write("M3BF", 4);
  out.put(static_cast<char>(m.modality));
  detail::put_u32(out, static_cast<uint32_t>(m.n_items()));
  detail::put_u32(out, static_cast<uint32_t>(m.dim()));
  for (Eigen::Index r = 1; r < m.values.rows(); ++r)
    for (Eigen::Index c = 0; c < m.values.cols(); ++c) detail::put_f32(out, static_cast<float>(m.values(r, c)));
}

template <class S>
FeatureMatrix<S> load_feature_matrix(const std::string& path, Modality expected_modality, int expected_dim) {
  using K = FeatureLoadError::Kind;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FeatureLoadError(K::kIo, "cannot open feature file " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "M3BF", 4) != 0) {
    throw FeatureLoadError(K::kMagic, path + ": bad magic (expected M3BF)");
  }
  int tag = in.get();
  if (tag == EOF) throw FeatureLoadError(K::kTruncated, path + ": truncated header");
  if (tag != static_cast<int>(expected_modality)) {
    throw FeatureLoadError(K::kModality, path + ": modality tag " + std::to_string(tag) + ", expected " +
                                             std::to_string(static_cast<int>(expected_modality)));
  }
  uint32_t n = 0, d = 0;
  if (!detail::get_u32(in, n) || !detail::get_u32(in, d)) throw FeatureLoadError(K::kTruncated, path + ": truncated header");
  if (static_cast<int>(d) != expected_dim) {
    throw FeatureLoadError(K::kDimension, path + ": dimension " + std::to_string(d) + ", config expects " +
                                              std::to_string(expected_dim));
  }
  FeatureMatrix<S> m;
  m.modality = expected_modality;
  m.values = Mat<S>::Zero(static_cast<Eigen::Index>(n) + 1, d);
  for (uint32_t r = 0; r < n; ++r) {
    for (uint32_t c = 0; c < d; ++c) {
      float f;
      if (!detail::get_f32(in, f)) {
        throw FeatureLoadError(K::kTruncated, path + ": payload truncated at row " + std::to_string(r));
      }
      if (!std::isfinite(f)) throw FeatureLoadError(K::kNonFinite, path + ": non-finite value at row " + std::to_string(r));
      m.values(r + 1, c) = static_cast<S>(f);
    }
  }
  return m;
}

// Trainable leaf rows for the ID modality.
template <class S>
Var<S> embed_id_sequence(const Binder<S>& bind, int table, const IdRow& ids) {
  return ops::gather_rows(bind(table), ids);
}

template <class S>
Var<S> gather_sequence_features(Tape<S>& tape, const FeatureMatrix<S>& m, const IdRow& ids) {
  return ops::gather_rows(tape.constant_ref(m.values), ids);
}

// Batch form [B x L] -> B matrices [L x d] for callers outside a tape.
template <class S>
std::vector<Mat<S>> gather_batch(const Mat<S>& table, const std::vector<IdRow>& ids) {
  std::vector<Mat<S>> out;
  for (std::size_t b = 0; b < ids.size(); ++b) {
    Mat<S> rows(static_cast<Eigen::Index>(ids[b].size()), table.cols());
    for (std::size_t l = 0; l < ids[b].size(); ++l) {
      if (ids[b][l] < 0 || ids[b][l] >= table.rows()) {
        throw IndexError("id " + std::to_string(ids[b][l]) + " out of range at (" + std::to_string(b) + ", " +
                         std::to_string(l) + ")");
      }
      rows.row(static_cast<Eigen::Index>(l)) = table.row(ids[b][l]);
    }
    out.push_back(std::move(rows));
  }
  return out;
}

}  // namespace m3bsr
