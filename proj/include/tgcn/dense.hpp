#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "tgcn/error.hpp"

namespace tgcn {

/// Row-major dense matrix of doubles.
struct DenseMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  DenseMatrix() = default;
  DenseMatrix(int r, int c, double fill = 0.0)
      : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, fill) {}

  double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const {
    return v[static_cast<std::size_t>(r) * cols + c];
  }

  double* row(int r) { return v.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const {
    return v.data() + static_cast<std::size_t>(r) * cols;
  }

  void fill(double x) { std::fill(v.begin(), v.end(), x); }

  bool same_shape(const DenseMatrix& o) const {
    return rows == o.rows && cols == o.cols;
  }

  static DenseMatrix identity(int n) {
    DenseMatrix m(n, n);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
  }
};

/// Mean of squared entries; zero for an empty matrix.
inline double mean_square(const DenseMatrix& m) {
  if (m.v.empty()) return 0.0;
  double s = 0.0;
  for (double x : m.v) s += x * x;
  return s / static_cast<double>(m.v.size());
}

inline bool all_finite(const DenseMatrix& m) {
  for (double x : m.v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace tgcn
