#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace m3bsr {

// Row-major dense matrix; sequences are [length x width], vectors are 1 x width.
template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

using IdRow = std::vector<int32_t>;
using MaskRow = std::vector<uint8_t>;

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

template <class S>
bool all_finite(const Mat<S>& m) {
  return m.allFinite();
}

inline int mask_count(const MaskRow& mask) {
  int n = 0;
  for (auto v : mask) n += v ? 1 : 0;
  return n;
}

}  // namespace m3bsr
