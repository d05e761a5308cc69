#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include <unistd.h>

#include "m3bsr/params.hpp"

namespace m3bsr::testing {

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("m3bsr_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Largest relative mismatch between the analytic gradient written by
// `loss(&grads)` and central differences, over every entry of the listed
// parameters (all parameters when empty). Entries where both sides are below
// `floor` are compared absolutely.
inline double fd_max_rel_error(ParamStore<double>& store, const std::function<double(GradBuffer<double>*)>& loss,
                               double h = 1e-6, double floor = 1e-7, std::vector<int> which = {}) {
  GradBuffer<double> g(store);
  loss(&g);
  if (which.empty())
    for (int i = 0; i < store.size(); ++i) which.push_back(i);
  double worst = 0;
  for (int i : which) {
    auto& p = store[i];
    for (Eigen::Index k = 0; k < p.value.size(); ++k) {
      if (p.pad_row && k < p.value.cols()) continue;
      double* x = p.value.data() + k;
      const double x0 = *x;
      *x = x0 + h;
      const double a = loss(nullptr);
      *x = x0 - h;
      const double b = loss(nullptr);
      *x = x0;
      const double fd = (a - b) / (2 * h), an = g[i].data()[k];
      worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), floor}));
    }
  }
  return worst;
}

}  // namespace m3bsr::testing
