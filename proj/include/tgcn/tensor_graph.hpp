#pragma once

#include <string>
#include <utility>
#include <vector>

#include "tgcn/sparse.hpp"

namespace tgcn {

/// A fixed node set connected by one or more relations; slab i is the N x N
/// adjacency of relation i. Immutable after construction.
struct TensorGraph {
  int n_nodes = 0;
  std::vector<SparseMatrix> slabs;

  TensorGraph() = default;
  TensorGraph(int nodes, std::vector<SparseMatrix> s)
      : n_nodes(nodes), slabs(std::move(s)) {
    if (slabs.empty()) throw validation_error("tensor graph needs >= 1 relation");
    for (const SparseMatrix& m : slabs)
      if (m.n_rows() != n_nodes || m.n_cols() != n_nodes)
        throw structural_error("slab dimensions do not match node count");
  }

  static TensorGraph single(SparseMatrix m) {
    const int n = m.n_rows();
    std::vector<SparseMatrix> s;
    s.push_back(std::move(m));
    return TensorGraph(n, std::move(s));
  }

  int n_relations() const { return static_cast<int>(slabs.size()); }
};

/// Nodes with a nonzero weight in row `node` of relation `relation`,
/// in increasing order.
inline std::vector<int> neighborhood(const TensorGraph& g, int node,
                                     int relation) {
  if (node < 0 || node >= g.n_nodes)
    throw structural_error("neighborhood: node out of range");
  if (relation < 0 || relation >= g.n_relations())
    throw structural_error("neighborhood: relation out of range");
  std::vector<int> out;
  const SparseMatrix& s = g.slabs[relation];
  auto cols = s.row_cols(node);
  auto vals = s.row_vals(node);
  for (std::size_t k = 0; k < cols.size(); ++k)
    if (vals[k] != 0.0) out.push_back(cols[k]);
  return out;
}

/// Matrix powers S_i^1 .. S_i^R per relation, shared by every layer of the
/// network. Powers up to `kMaxMaterialized` are stored explicitly; higher
/// hops are served by repeated application of the base matrix, which bounds
/// memory when powers densify.
class PropagationSet {
 public:
  static constexpr int kMaxMaterialized = 4;

  PropagationSet() = default;

  PropagationSet(const TensorGraph& g, int hops) : hops_(hops) {
    if (hops < 1) throw validation_error("propagation set needs hops >= 1");
    n_nodes_ = g.n_nodes;
    materialized_ = std::min(hops, kMaxMaterialized);
    powers_.resize(g.n_relations());
    for (int i = 0; i < g.n_relations(); ++i) {
      powers_[i].push_back(g.slabs[i]);
      for (int r = 1; r < materialized_; ++r)
        powers_[i].push_back(powers_[i][r - 1].matmul(powers_[i][0]));
    }
  }

  int hops() const { return hops_; }
  int n_materialized() const { return materialized_; }
  int n_relations() const { return static_cast<int>(powers_.size()); }
  int n_nodes() const { return n_nodes_; }

  /// Materialized S_i^(r+1); r must be below n_materialized().
  const SparseMatrix& power(int relation, int r) const {
    return powers_[relation][r];
  }

  /// out = S_i^(r+1) * z for any r < hops().
  void apply_power(int relation, int r, const DenseMatrix& z, DenseMatrix& out,
                   DenseMatrix& scratch) const {
    const int m = std::min(r + 1, materialized_);
    powers_[relation][m - 1].apply(z, out);
    for (int extra = m; extra <= r; ++extra) {
      powers_[relation][0].apply(out, scratch);
      std::swap(out, scratch);
    }
  }

  /// out = (S_i^(r+1))^T * z. Powers of one matrix commute, so the transpose
  /// factors can be applied in any order.
  void apply_power_transpose(int relation, int r, const DenseMatrix& z,
                             DenseMatrix& out, DenseMatrix& scratch) const {
    const int m = std::min(r + 1, materialized_);
    powers_[relation][m - 1].apply_transpose(z, out);
    for (int extra = m; extra <= r; ++extra) {
      powers_[relation][0].apply_transpose(out, scratch);
      std::swap(out, scratch);
    }
  }

 private:
  int hops_ = 0;
  int materialized_ = 0;
  int n_nodes_ = 0;
  std::vector<std::vector<SparseMatrix>> powers_;  // [relation][r]
};

inline PropagationSet build_propagation_set(const TensorGraph& g, int hops) {
  return PropagationSet(g, hops);
}

}  // namespace tgcn
