#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "tgcn/dense.hpp"
#include "tgcn/error.hpp"

namespace tgcn {

/// One weighted edge, used during construction and file exchange.
struct Edge {
  int row = 0;
  int col = 0;
  double weight = 1.0;
};

enum class NormalizeMode { none, symmetric, row };

inline const char* to_string(NormalizeMode m) {
  switch (m) {
    case NormalizeMode::none: return "none";
    case NormalizeMode::symmetric: return "symmetric";
    case NormalizeMode::row: return "row";
  }
  return "?";
}

inline NormalizeMode normalize_mode_from_string(const std::string& s) {
  if (s == "none") return NormalizeMode::none;
  if (s == "symmetric") return NormalizeMode::symmetric;
  if (s == "row") return NormalizeMode::row;
  throw validation_error("unknown normalize mode: " + s);
}

/// Compressed sparse row matrix. Within a row, column indices are strictly
/// increasing; duplicate coordinates are summed away at construction.
class SparseMatrix {
 public:
  SparseMatrix() = default;
  SparseMatrix(int n_rows, int n_cols)
      : rows_(n_rows), cols_(n_cols), ptr_(n_rows + 1, 0) {
    if (n_rows < 0 || n_cols < 0) throw validation_error("negative dimension");
  }

  /// Build from a triplet list. Out-of-range indices are a structural error,
  /// non-finite weights a validation error. Duplicates are summed. With
  /// `symmetrize`, the result has the union pattern of A and A^T; a pair
  /// present in both directions gets the average of the two weights, a pair
  /// present in one direction keeps its weight.
  static SparseMatrix from_edges(std::vector<Edge> edges, int n_rows,
                                 int n_cols, bool symmetrize = false) {
    if (symmetrize && n_rows != n_cols)
      throw structural_error("symmetrize requires a square matrix");
    for (const Edge& e : edges) {
      if (e.row < 0 || e.row >= n_rows || e.col < 0 || e.col >= n_cols)
        throw structural_error("edge index out of range: (" +
                               std::to_string(e.row) + ", " +
                               std::to_string(e.col) + ")");
      if (!std::isfinite(e.weight))
        throw validation_error("non-finite edge weight at (" +
                               std::to_string(e.row) + ", " +
                               std::to_string(e.col) + ")");
    }
    dedupe(edges);
    if (symmetrize) {
      // Re-run dedupe over both orientations, tracking how many orientations
      // contributed so single-sided edges keep their weight.
      std::vector<Edge> both;
      both.reserve(edges.size() * 2);
      std::vector<int> count;
      for (const Edge& e : edges) {
        both.push_back(e);
        both.push_back({e.col, e.row, e.weight});
      }
      std::sort(both.begin(), both.end(), [](const Edge& a, const Edge& b) {
        return a.row != b.row ? a.row < b.row : a.col < b.col;
      });
      std::vector<Edge> merged;
      for (std::size_t i = 0; i < both.size();) {
        Edge acc = both[i];
        int c = 1;
        std::size_t j = i + 1;
        while (j < both.size() && both[j].row == acc.row &&
               both[j].col == acc.col) {
          acc.weight += both[j].weight;
          ++c;
          ++j;
        }
        acc.weight /= c;
        merged.push_back(acc);
        i = j;
      }
      edges = std::move(merged);
    }
    SparseMatrix m(n_rows, n_cols);
    m.col_.reserve(edges.size());
    m.val_.reserve(edges.size());
    int r = 0;
    for (const Edge& e : edges) {
      while (r < e.row) m.ptr_[++r] = static_cast<int>(m.col_.size());
      m.col_.push_back(e.col);
      m.val_.push_back(e.weight);
    }
    while (r < n_rows) m.ptr_[++r] = static_cast<int>(m.col_.size());
    return m;
  }

  static SparseMatrix identity(int n) {
    std::vector<Edge> es;
    es.reserve(n);
    for (int i = 0; i < n; ++i) es.push_back({i, i, 1.0});
    return from_edges(std::move(es), n, n);
  }

  int n_rows() const { return rows_; }
  int n_cols() const { return cols_; }
  int nnz() const { return static_cast<int>(col_.size()); }

  std::span<const int> row_cols(int r) const {
    return {col_.data() + ptr_[r], static_cast<std::size_t>(ptr_[r + 1] - ptr_[r])};
  }
  std::span<const double> row_vals(int r) const {
    return {val_.data() + ptr_[r], static_cast<std::size_t>(ptr_[r + 1] - ptr_[r])};
  }

  /// Stored value at (r, c), or 0 when the coordinate is absent.
  double value_at(int r, int c) const {
    auto cols = row_cols(r);
    auto it = std::lower_bound(cols.begin(), cols.end(), c);
    if (it == cols.end() || *it != c) return 0.0;
    return val_[ptr_[r] + (it - cols.begin())];
  }

  bool has_entry(int r, int c) const {
    auto cols = row_cols(r);
    return std::binary_search(cols.begin(), cols.end(), c);
  }

  std::vector<Edge> to_edges() const {
    std::vector<Edge> es;
    es.reserve(col_.size());
    for (int r = 0; r < rows_; ++r)
      for (int k = ptr_[r]; k < ptr_[r + 1]; ++k)
        es.push_back({r, col_[k], val_[k]});
    return es;
  }

  /// out = S * z. Sequential row-major accumulation, fixed summation order.
  void apply(const DenseMatrix& z, DenseMatrix& out) const {
    if (z.rows != cols_) throw structural_error("apply: dimension mismatch");
    if (out.rows != rows_ || out.cols != z.cols) out = DenseMatrix(rows_, z.cols);
    const int p = z.cols;
    for (int r = 0; r < rows_; ++r) {
      double* o = out.row(r);
      std::fill(o, o + p, 0.0);
      for (int k = ptr_[r]; k < ptr_[r + 1]; ++k) {
        const double w = val_[k];
        const double* zr = z.row(col_[k]);
        for (int j = 0; j < p; ++j) o[j] += w * zr[j];
      }
    }
  }

  DenseMatrix apply(const DenseMatrix& z) const {
    DenseMatrix out;
    apply(z, out);
    return out;
  }

  /// out = S^T * z, computed by scattering rows; summation order is fixed.
  void apply_transpose(const DenseMatrix& z, DenseMatrix& out) const {
    if (z.rows != rows_)
      throw structural_error("apply_transpose: dimension mismatch");
    if (out.rows != cols_ || out.cols != z.cols) out = DenseMatrix(cols_, z.cols);
    out.fill(0.0);
    const int p = z.cols;
    for (int r = 0; r < rows_; ++r) {
      const double* zr = z.row(r);
      for (int k = ptr_[r]; k < ptr_[r + 1]; ++k) {
        double* o = out.row(col_[k]);
        const double w = val_[k];
        for (int j = 0; j < p; ++j) o[j] += w * zr[j];
      }
    }
  }

  /// Sparse-sparse product this * rhs. Row-wise dense accumulator; per-row
  /// column order is sorted, so the result is deterministic.
  SparseMatrix matmul(const SparseMatrix& rhs) const {
    if (cols_ != rhs.rows_) throw structural_error("matmul: dimension mismatch");
    SparseMatrix out(rows_, rhs.cols_);
    std::vector<double> acc(rhs.cols_, 0.0);
    std::vector<char> mark(rhs.cols_, 0);
    std::vector<int> touched;
    for (int r = 0; r < rows_; ++r) {
      touched.clear();
      for (int k = ptr_[r]; k < ptr_[r + 1]; ++k) {
        const double a = val_[k];
        const int mid = col_[k];
        for (int k2 = rhs.ptr_[mid]; k2 < rhs.ptr_[mid + 1]; ++k2) {
          const int c = rhs.col_[k2];
          if (!mark[c]) {
            mark[c] = 1;
            touched.push_back(c);
          }
          acc[c] += a * rhs.val_[k2];
        }
      }
      std::sort(touched.begin(), touched.end());
      for (int c : touched) {
        out.col_.push_back(c);
        out.val_.push_back(acc[c]);
        acc[c] = 0.0;
        mark[c] = 0;
      }
      out.ptr_[r + 1] = static_cast<int>(out.col_.size());
    }
    return out;
  }

  SparseMatrix transpose() const {
    auto es = to_edges();
    for (Edge& e : es) std::swap(e.row, e.col);
    return from_edges(std::move(es), cols_, rows_);
  }

  /// Entrywise absolute value, same pattern.
  SparseMatrix abs() const {
    SparseMatrix out = *this;
    for (double& w : out.val_) w = std::fabs(w);
    return out;
  }

  /// L = D - S with D = diag(row sums). Requires nonnegative weights; rows of
  /// L sum to zero.
  SparseMatrix laplacian() const {
    if (rows_ != cols_) throw structural_error("laplacian: matrix not square");
    std::vector<Edge> es;
    es.reserve(col_.size() + rows_);
    for (int r = 0; r < rows_; ++r) {
      double deg = 0.0;
      for (int k = ptr_[r]; k < ptr_[r + 1]; ++k) {
        if (val_[k] < 0.0)
          throw validation_error("laplacian: negative weight at row " +
                                 std::to_string(r));
        deg += val_[k];
        es.push_back({r, col_[k], -val_[k]});
      }
      if (deg != 0.0) es.push_back({r, r, deg});
    }
    return from_edges(std::move(es), rows_, cols_);
  }

  /// Degree-normalized copy. Degrees are row sums of |weight|, which matches
  /// plain row sums for nonnegative graphs and stays well defined for
  /// correlation or noise-perturbed weights. Zero-degree rows are left as-is.
  SparseMatrix normalized(NormalizeMode mode) const {
    if (rows_ != cols_) throw structural_error("normalize: matrix not square");
    if (mode == NormalizeMode::none) return *this;
    std::vector<double> deg(rows_, 0.0);
    for (int r = 0; r < rows_; ++r)
      for (int k = ptr_[r]; k < ptr_[r + 1]; ++k) deg[r] += std::fabs(val_[k]);
    SparseMatrix out = *this;
    if (mode == NormalizeMode::row) {
      for (int r = 0; r < rows_; ++r) {
        if (deg[r] == 0.0) continue;
        for (int k = ptr_[r]; k < ptr_[r + 1]; ++k) out.val_[k] = val_[k] / deg[r];
      }
    } else {
      std::vector<double> inv_sqrt(rows_, 0.0);
      for (int r = 0; r < rows_; ++r)
        if (deg[r] > 0.0) inv_sqrt[r] = 1.0 / std::sqrt(deg[r]);
      for (int r = 0; r < rows_; ++r)
        for (int k = ptr_[r]; k < ptr_[r + 1]; ++k)
          out.val_[k] = val_[k] * inv_sqrt[r] * inv_sqrt[col_[k]];
    }
    return out;
  }

  std::vector<double> row_sums(bool absolute = false) const {
    std::vector<double> d(rows_, 0.0);
    for (int r = 0; r < rows_; ++r)
      for (int k = ptr_[r]; k < ptr_[r + 1]; ++k)
        d[r] += absolute ? std::fabs(val_[k]) : val_[k];
    return d;
  }

  DenseMatrix to_dense() const {
    DenseMatrix m(rows_, cols_);
    for (int r = 0; r < rows_; ++r)
      for (int k = ptr_[r]; k < ptr_[r + 1]; ++k) m.at(r, col_[k]) += val_[k];
    return m;
  }

  /// In-place visit of stored values in CSR order.
  template <class F>
  void for_each_entry(F&& f) {
    for (int r = 0; r < rows_; ++r)
      for (int k = ptr_[r]; k < ptr_[r + 1]; ++k) f(r, col_[k], val_[k]);
  }
  template <class F>
  void for_each_entry(F&& f) const {
    for (int r = 0; r < rows_; ++r)
      for (int k = ptr_[r]; k < ptr_[r + 1]; ++k) f(r, col_[k], val_[k]);
  }

 private:
  static void dedupe(std::vector<Edge>& edges) {
    std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
      return a.row != b.row ? a.row < b.row : a.col < b.col;
    });
    std::size_t w = 0;
    for (std::size_t i = 0; i < edges.size();) {
      Edge acc = edges[i];
      std::size_t j = i + 1;
      while (j < edges.size() && edges[j].row == acc.row &&
             edges[j].col == acc.col) {
        acc.weight += edges[j].weight;
        ++j;
      }
      edges[w++] = acc;
      i = j;
    }
    edges.resize(w);
  }

  int rows_ = 0;
  int cols_ = 0;
  std::vector<int> ptr_{0};
  std::vector<int> col_;
  std::vector<double> val_;
};

}  // namespace tgcn
