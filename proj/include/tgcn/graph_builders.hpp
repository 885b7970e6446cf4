#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <utility>
#include <vector>

#include "tgcn/dataset.hpp"
#include "tgcn/dense.hpp"
#include "tgcn/rng.hpp"
#include "tgcn/sparse.hpp"
#include "tgcn/tensor_graph.hpp"

namespace tgcn {

enum class KnnMetric { euclidean_sq };

/// Connect every node to its k nearest distinct neighbors under squared
/// Euclidean distance, then symmetrize by union. Ties break toward the
/// smaller node index so the result is reproducible.
inline SparseMatrix knn_graph(const DenseMatrix& x, int k,
                              KnnMetric = KnnMetric::euclidean_sq) {
  const int n = x.rows;
  if (k < 1 || k >= n)
    throw validation_error("knn: k must satisfy 1 <= k < n_nodes");
  if (!all_finite(x)) throw validation_error("knn: features contain NaN/inf");

  std::vector<Edge> edges;
  edges.reserve(static_cast<std::size_t>(n) * k);
  std::vector<std::pair<double, int>> dist(n - 1);
  for (int a = 0; a < n; ++a) {
    int m = 0;
    for (int b = 0; b < n; ++b) {
      if (b == a) continue;
      double d = 0.0;
      const double* xa = x.row(a);
      const double* xb = x.row(b);
      for (int j = 0; j < x.cols; ++j) {
        const double diff = xa[j] - xb[j];
        d += diff * diff;
      }
      dist[m++] = {d, b};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    for (int j = 0; j < k; ++j) edges.push_back({a, dist[j].second, 1.0});
  }
  // Union symmetrization; averaged weights are all 1 here.
  return SparseMatrix::from_edges(std::move(edges), n, n, /*symmetrize=*/true);
}

/// Threshold the pairwise sample Pearson correlation of node feature rows.
/// An edge (n, n') exists iff |corr| > eta and carries the signed correlation
/// as weight. Rows with zero variance end up isolated.
inline SparseMatrix correlation_graph(const DenseMatrix& x, double eta) {
  if (eta < 0.0) throw validation_error("correlation: eta must be >= 0");
  const int n = x.rows;
  const int f = x.cols;
  if (!all_finite(x))
    throw validation_error("correlation: features contain NaN/inf");

  std::vector<double> mean(n, 0.0), sd(n, 0.0);
  for (int a = 0; a < n; ++a) {
    const double* xa = x.row(a);
    for (int j = 0; j < f; ++j) mean[a] += xa[j];
    mean[a] /= f;
    for (int j = 0; j < f; ++j) {
      const double c = xa[j] - mean[a];
      sd[a] += c * c;
    }
    sd[a] = std::sqrt(sd[a]);
  }

  std::vector<Edge> edges;
  for (int a = 0; a < n; ++a) {
    if (sd[a] == 0.0) continue;
    for (int b = a + 1; b < n; ++b) {
      if (sd[b] == 0.0) continue;
      double dot = 0.0;
      const double* xa = x.row(a);
      const double* xb = x.row(b);
      for (int j = 0; j < f; ++j) dot += (xa[j] - mean[a]) * (xb[j] - mean[b]);
      const double rho = dot / (sd[a] * sd[b]);
      if (std::fabs(rho) > eta) {
        edges.push_back({a, b, rho});
        edges.push_back({b, a, rho});
      }
    }
  }
  return SparseMatrix::from_edges(std::move(edges), n, n);
}

/// Edge dithering parameters: q1 is the probability an existing edge is
/// retained, q2 the probability a non-edge stays absent, n_samples the
/// number of dithered graphs drawn.
struct DitherConfig {
  double q1 = 1.0;
  double q2 = 1.0;
  int n_samples = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (q1 < 0.0 || q1 > 1.0 || q2 < 0.0 || q2 > 1.0)
      throw validation_error("dither: probabilities must lie in [0, 1]");
    if (n_samples < 1) throw validation_error("dither: n_samples must be >= 1");
  }
};

/// Draw `cfg.n_samples` independent dithered copies of a binary undirected
/// graph: each existing edge survives with probability q1, each absent pair
/// (n != n') is inserted with probability 1 - q2. Pairs are sampled on the
/// upper triangle and mirrored; diagonal entries are copied unchanged. Each
/// slab uses its own RNG substream, so slabs are order-independent.
inline TensorGraph edge_dither(const SparseMatrix& a, const DitherConfig& cfg) {
  cfg.validate();
  if (a.n_rows() != a.n_cols())
    throw structural_error("dither: matrix not square");
  a.for_each_entry([](int, int, double w) {
    if (w != 1.0) throw validation_error("dither: input graph must be binary");
  });
  const int n = a.n_rows();

  std::vector<SparseMatrix> slabs;
  slabs.reserve(cfg.n_samples);
  for (int s = 0; s < cfg.n_samples; ++s) {
    Rng rng = Rng::substream(cfg.seed, static_cast<std::uint64_t>(s));
    std::vector<Edge> edges;
    for (int r = 0; r < n; ++r) {
      if (a.has_entry(r, r)) edges.push_back({r, r, 1.0});
      auto cols = a.row_cols(r);
      std::size_t k = 0;
      while (k < cols.size() && cols[k] <= r) ++k;  // skip lower half + diag
      for (int c = r + 1; c < n; ++c) {
        const bool present = k < cols.size() && cols[k] == c;
        if (present) ++k;
        const double u = rng.uniform();
        const bool keep = present ? (u < cfg.q1) : (u < 1.0 - cfg.q2);
        if (keep) {
          edges.push_back({r, c, 1.0});
          edges.push_back({c, r, 1.0});
        }
      }
    }
    slabs.push_back(SparseMatrix::from_edges(std::move(edges), n, n));
  }
  return TensorGraph(n, std::move(slabs));
}

/// Count of unordered node pairs (n < n') with no edge in either direction.
inline long long absent_pair_count(const SparseMatrix& a) {
  const int n = a.n_rows();
  long long present = 0;
  a.for_each_entry([&](int r, int c, double w) {
    if (w != 0.0 && r < c) ++present;
  });
  // Count also pairs stored only in the lower triangle.
  a.for_each_entry([&](int r, int c, double w) {
    if (w != 0.0 && r > c && a.value_at(c, r) == 0.0) ++present;
  });
  return static_cast<long long>(n) * (n - 1) / 2 - present;
}

/// Insert exactly `count` distinct previously-absent undirected edges chosen
/// uniformly at random (rejection sampling on node pairs).
inline SparseMatrix perturb_insert_edges(const SparseMatrix& a, long long count,
                                         std::uint64_t seed) {
  if (a.n_rows() != a.n_cols())
    throw structural_error("insert_edges: matrix not square");
  if (count < 0) throw validation_error("insert_edges: negative count");
  const long long absent = absent_pair_count(a);
  if (count > absent)
    throw validation_error("insert_edges: count exceeds absent pairs (" +
                           std::to_string(absent) + ")");
  const int n = a.n_rows();
  Rng rng(seed);
  std::set<std::pair<int, int>> chosen;
  while (static_cast<long long>(chosen.size()) < count) {
    int u = static_cast<int>(rng.below(n));
    int v = static_cast<int>(rng.below(n));
    if (u == v) continue;
    if (u > v) std::swap(u, v);
    if (a.value_at(u, v) != 0.0 || a.value_at(v, u) != 0.0) continue;
    chosen.insert({u, v});
  }
  std::vector<Edge> edges = a.to_edges();
  for (auto [u, v] : chosen) {
    edges.push_back({u, v, 1.0});
    edges.push_back({v, u, 1.0});
  }
  return SparseMatrix::from_edges(std::move(edges), n, n);
}

enum class NoiseTarget { features, edges };

struct NoiseConfig {
  double snr = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;
  NoiseTarget target = NoiseTarget::features;

  void validate() const {
    if (!(snr > 0.0)) throw validation_error("noise: snr must be > 0");
  }
};

/// Additive zero-mean Gaussian noise with per-element variance
/// mean(signal^2) / snr. Entries are perturbed in row-major order.
inline DenseMatrix add_noise(const DenseMatrix& x, const NoiseConfig& cfg) {
  cfg.validate();
  const double var = mean_square(x) / cfg.snr;
  DenseMatrix out = x;
  if (var == 0.0) return out;
  const double sigma = std::sqrt(var);
  Rng rng(cfg.seed);
  for (double& v : out.v) v += sigma * rng.normal();
  return out;
}

/// Same noise model on a tensor graph. Only stored nonzero weights are
/// perturbed (the sparsity pattern is preserved); signal power is the mean
/// squared stored weight across all slabs. Slab i draws from substream i.
inline TensorGraph add_noise(const TensorGraph& g, const NoiseConfig& cfg) {
  cfg.validate();
  double power = 0.0;
  long long nnz = 0;
  for (const SparseMatrix& s : g.slabs) {
    s.for_each_entry([&](int, int, double w) {
      power += w * w;
      ++nnz;
    });
  }
  if (nnz > 0) power /= static_cast<double>(nnz);
  const double var = power / cfg.snr;
  TensorGraph out = g;
  if (var == 0.0) return out;
  const double sigma = std::sqrt(var);
  for (int i = 0; i < out.n_relations(); ++i) {
    Rng rng = Rng::substream(cfg.seed, static_cast<std::uint64_t>(i));
    out.slabs[i].for_each_entry(
        [&](int, int, double& w) { w += sigma * rng.normal(); });
  }
  return out;
}

/// Two balanced Gaussian classes: class 0 has all-zero mean, class 1 all-one
/// mean, both with covariance 0.4 * I. All nodes come back labeled; split
/// masks are left empty.
inline Dataset synthetic_gaussian_dataset(int n, int f, std::uint64_t seed) {
  if (n < 2 || n % 2 != 0)
    throw validation_error("synthetic dataset: n must be even and >= 2");
  Dataset d = make_empty_dataset(n, f, 2);
  const double sigma = std::sqrt(0.4);
  Rng rng(seed);
  for (int node = 0; node < n; ++node) {
    const int cls = node < n / 2 ? 0 : 1;
    const double mean = cls == 0 ? 0.0 : 1.0;
    for (int j = 0; j < f; ++j) d.x.at(node, j) = mean + sigma * rng.normal();
    d.set_label(node, cls);
  }
  return d;
}

/// I independent undirected Erdos-Renyi(n, p) graphs, one per slab, each
/// drawn from its own substream.
inline TensorGraph er_realizations(int n, double p, int n_samples,
                                   std::uint64_t seed) {
  if (p < 0.0 || p > 1.0) throw validation_error("er: p must lie in [0, 1]");
  if (n_samples < 1) throw validation_error("er: need >= 1 realization");
  std::vector<SparseMatrix> slabs;
  slabs.reserve(n_samples);
  for (int s = 0; s < n_samples; ++s) {
    Rng rng = Rng::substream(seed, static_cast<std::uint64_t>(s));
    std::vector<Edge> edges;
    for (int a = 0; a < n; ++a)
      for (int b = a + 1; b < n; ++b)
        if (rng.uniform() < p) {
          edges.push_back({a, b, 1.0});
          edges.push_back({b, a, 1.0});
        }
    slabs.push_back(SparseMatrix::from_edges(std::move(edges), n, n));
  }
  return TensorGraph(n, std::move(slabs));
}

}  // namespace tgcn
