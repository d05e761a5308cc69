#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "m3bsr/tensor.hpp"

namespace m3bsr {

// A named trainable array. When pad_row is set, row 0 is a frozen zero row
// (embedding padding); its gradient is discarded before every update.
template <class S>
struct Parameter {
  std::string name;
  Mat<S> value;
  bool pad_row = false;
};

template <class S>
class ParamStore {
 public:
  int add(const std::string& name, Mat<S> init, bool pad_row = false) {
    if (index_.count(name)) throw ValidationError("duplicate parameter name: " + name);
    if (pad_row && init.rows() > 0) init.row(0).setZero();
    int id = static_cast<int>(params_.size());
    params_.push_back({name, std::move(init), pad_row});
    index_[name] = id;
    return id;
  }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  int size() const { return static_cast<int>(params_.size()); }
  Parameter<S>& operator[](int i) { return params_[i]; }
  const Parameter<S>& operator[](int i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  int64_t scalar_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  std::vector<Parameter<S>> params_;
  std::map<std::string, int> index_;
};

// Gradient storage parallel to a ParamStore.
template <class S>
struct GradBuffer {
  std::vector<Mat<S>> grads;

  explicit GradBuffer(const ParamStore<S>& store) {
    grads.reserve(store.size());
    for (const auto& p : store) grads.push_back(Mat<S>::Zero(p.value.rows(), p.value.cols()));
  }

  void zero() {
    for (auto& g : grads) g.setZero();
  }
  Mat<S>& operator[](int i) { return grads[i]; }
  const Mat<S>& operator[](int i) const { return grads[i]; }
};

namespace init {

template <class S>
Mat<S> normal(int rows, int cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat<S> m(rows, cols);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng));
  return m;
}

// Glorot-style scaled normal for a [fan_in x fan_out] weight.
template <class S>
Mat<S> xavier(int fan_in, int fan_out, std::mt19937_64& rng) {
  return normal<S>(fan_in, fan_out, std::sqrt(2.0 / (fan_in + fan_out)), rng);
}

template <class S>
Mat<S> zeros(int rows, int cols) {
  return Mat<S>::Zero(rows, cols);
}

template <class S>
Mat<S> ones(int rows, int cols) {
  return Mat<S>::Ones(rows, cols);
}

}  // namespace init

// Adaptive moment estimation.
template <class S>
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam() = default;
  Adam(const ParamStore<S>& store, Options opt) : opt_(opt) {
    for (const auto& p : store) {
      m_.push_back(Mat<S>::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Mat<S>::Zero(p.value.rows(), p.value.cols()));
    }
  }

  // Throws NumericError naming the parameter if any gradient is non-finite.
  void step(ParamStore<S>& store, GradBuffer<S>& grads) {
    for (int i = 0; i < store.size(); ++i) {
      if (!grads[i].allFinite()) {
        throw NumericError("non-finite gradient in parameter " + store[i].name);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    const S lr = static_cast<S>(opt_.lr);
    if (lr == S(0)) return;
    const S b1 = static_cast<S>(opt_.beta1), b2 = static_cast<S>(opt_.beta2);
    for (int i = 0; i < store.size(); ++i) {
      auto& p = store[i];
      auto& g = grads[i];
      if (p.pad_row) g.row(0).setZero();
      m_[i] = b1 * m_[i] + (S(1) - b1) * g;
      v_[i] = b2 * v_[i] + (S(1) - b2) * g.cwiseProduct(g);
      const S s1 = static_cast<S>(1.0 / bc1), s2 = static_cast<S>(1.0 / bc2);
      const S eps = static_cast<S>(opt_.eps);
      p.value.array() -= lr * (m_[i].array() * s1) / ((v_[i].array() * s2).sqrt() + eps);
      if (p.pad_row) p.value.row(0).setZero();
    }
  }

  int64_t steps() const { return t_; }
  const Options& options() const { return opt_; }
  void set_lr(double lr) { opt_.lr = lr; }
  std::vector<Mat<S>>& first_moments() { return m_; }
  std::vector<Mat<S>>& second_moments() { return v_; }
  const std::vector<Mat<S>>& first_moments() const { return m_; }
  const std::vector<Mat<S>>& second_moments() const { return v_; }
  void set_steps(int64_t t) { t_ = t; }

 private:
  Options opt_;
  std::vector<Mat<S>> m_, v_;
  int64_t t_ = 0;
};

}  // namespace m3bsr
