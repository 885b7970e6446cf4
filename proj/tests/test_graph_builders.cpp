#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

#include "tgcn/graph_builders.hpp"

using namespace tgcn;

namespace {

bool same_entries(const SparseMatrix& a, const SparseMatrix& b) {
  auto ea = a.to_edges();
  auto eb = b.to_edges();
  if (ea.size() != eb.size()) return false;
  for (std::size_t i = 0; i < ea.size(); ++i)
    if (ea[i].row != eb[i].row || ea[i].col != eb[i].col ||
        ea[i].weight != eb[i].weight)
      return false;
  return true;
}

bool same_graph(const TensorGraph& a, const TensorGraph& b) {
  if (a.n_nodes != b.n_nodes || a.n_relations() != b.n_relations()) return false;
  for (int i = 0; i < a.n_relations(); ++i)
    if (!same_entries(a.slabs[i], b.slabs[i])) return false;
  return true;
}

}  // namespace

TEST_CASE("knn on three collinear points") {
  DenseMatrix x(3, 1);
  x.at(0, 0) = 0.0;
  x.at(1, 0) = 1.0;
  x.at(2, 0) = 10.0;
  SparseMatrix g = knn_graph(x, 1);
  REQUIRE(g.value_at(0, 1) == 1.0);
  REQUIRE(g.value_at(1, 0) == 1.0);
  REQUIRE(g.value_at(1, 2) == 1.0);
  REQUIRE(g.value_at(2, 1) == 1.0);
  REQUIRE(g.value_at(0, 2) == 0.0);
  REQUIRE(g.value_at(2, 0) == 0.0);
}

TEST_CASE("knn with k = n-1 is the complete graph") {
  Rng rng(4);
  DenseMatrix x(6, 2);
  for (double& v : x.v) v = rng.normal();
  SparseMatrix g = knn_graph(x, 5);
  REQUIRE(g.nnz() == 6 * 5);
}

TEST_CASE("knn breaks distance ties toward the lower index") {
  // Unit square: each corner has two neighbors at distance 1.
  DenseMatrix x(4, 2);
  x.at(0, 0) = 0; x.at(0, 1) = 0;
  x.at(1, 0) = 1; x.at(1, 1) = 0;
  x.at(2, 0) = 0; x.at(2, 1) = 1;
  x.at(3, 0) = 1; x.at(3, 1) = 1;
  SparseMatrix g = knn_graph(x, 1);
  // Directed picks: 0->1, 1->0, 2->0, 3->1; union of those pairs.
  REQUIRE(g.value_at(0, 1) == 1.0);
  REQUIRE(g.value_at(0, 2) == 1.0);
  REQUIRE(g.value_at(1, 3) == 1.0);
  REQUIRE(g.value_at(2, 3) == 0.0);
}

TEST_CASE("knn neighbors match a brute-force ranking") {
  Rng rng(9);
  const int n = 30, f = 4, k = 3;
  DenseMatrix x(n, f);
  for (double& v : x.v) v = rng.normal();
  SparseMatrix g = knn_graph(x, k);
  for (int a = 0; a < n; ++a) {
    REQUIRE(g.value_at(a, a) == 0.0);
    std::vector<std::pair<double, int>> d;
    for (int b = 0; b < n; ++b) {
      if (b == a) continue;
      double dist = 0.0;
      for (int j = 0; j < f; ++j) {
        const double diff = x.at(a, j) - x.at(b, j);
        dist += diff * diff;
      }
      d.push_back({dist, b});
    }
    std::sort(d.begin(), d.end());
    // The k nearest must appear among a's neighbors (union only adds edges).
    int degree = 0;
    for (int j = 0; j < k; ++j) REQUIRE(g.value_at(a, d[j].second) == 1.0);
    for (int b = 0; b < n; ++b)
      if (g.value_at(a, b) != 0.0) ++degree;
    REQUIRE(degree >= k);
  }
}

TEST_CASE("knn rejects k >= n and NaN features") {
  DenseMatrix x(3, 1);
  REQUIRE_THROWS_AS(knn_graph(x, 3), validation_error);
  x.at(1, 0) = std::nan("");
  REQUIRE_THROWS_AS(knn_graph(x, 1), validation_error);
}

TEST_CASE("correlation graph on identical and negated rows") {
  DenseMatrix x(2, 3);
  x.at(0, 0) = 1; x.at(0, 1) = 2; x.at(0, 2) = 3;
  for (int j = 0; j < 3; ++j) x.at(1, j) = x.at(0, j);
  SparseMatrix g = correlation_graph(x, 0.5);
  REQUIRE(g.value_at(0, 1) == Catch::Approx(1.0).margin(1e-12));

  for (int j = 0; j < 3; ++j) x.at(1, j) = -x.at(0, j);
  g = correlation_graph(x, 0.5);
  REQUIRE(g.value_at(0, 1) == Catch::Approx(-1.0).margin(1e-12));
  REQUIRE(g.value_at(1, 0) == g.value_at(0, 1));
}

TEST_CASE("correlation graph drops orthogonal centered rows") {
  DenseMatrix x(2, 4);
  const double a[4] = {1, -1, 1, -1};
  const double b[4] = {1, 1, -1, -1};
  for (int j = 0; j < 4; ++j) {
    x.at(0, j) = a[j];
    x.at(1, j) = b[j];
  }
  SparseMatrix g = correlation_graph(x, 0.1);
  REQUIRE(g.nnz() == 0);
}

TEST_CASE("correlation graph isolates zero-variance rows, eta >= 1 empties") {
  DenseMatrix x(3, 3);
  // Row 0 constant; rows 1 and 2 identical ramps.
  for (int j = 0; j < 3; ++j) {
    x.at(0, j) = 2.0;
    x.at(1, j) = j;
    x.at(2, j) = j;
  }
  SparseMatrix g = correlation_graph(x, 0.5);
  REQUIRE(g.row_cols(0).empty());
  REQUIRE(g.value_at(1, 2) == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(correlation_graph(x, 1.0).nnz() == 0);
}

TEST_CASE("correlation weights stay in [-1,1] and the matrix is symmetric") {
  Rng rng(31);
  DenseMatrix x(25, 6);
  for (double& v : x.v) v = rng.normal();
  SparseMatrix g = correlation_graph(x, 0.2);
  g.for_each_entry([&](int r, int c, double w) {
    REQUIRE(std::fabs(w) <= 1.0 + 1e-12);
    REQUIRE(g.value_at(c, r) == w);
  });
}

TEST_CASE("dither with q1=q2=1 reproduces the input exactly") {
  TensorGraph base = er_realizations(12, 0.3, 1, 77);
  DitherConfig cfg{1.0, 1.0, 4, 123};
  TensorGraph out = edge_dither(base.slabs[0], cfg);
  REQUIRE(out.n_relations() == 4);
  for (int i = 0; i < 4; ++i) REQUIRE(same_entries(out.slabs[i], base.slabs[0]));
}

TEST_CASE("dither with q2=1 never inserts a non-edge") {
  TensorGraph base = er_realizations(14, 0.25, 1, 5);
  DitherConfig cfg{0.5, 1.0, 8, 99};
  TensorGraph out = edge_dither(base.slabs[0], cfg);
  for (int i = 0; i < 8; ++i)
    out.slabs[i].for_each_entry([&](int r, int c, double) {
      REQUIRE(base.slabs[0].value_at(r, c) == 1.0);
    });
}

TEST_CASE("dither retention frequency tracks q1") {
  TensorGraph base = er_realizations(15, 0.3, 1, 8);
  const double q1 = 0.8;
  const int samples = 3000;
  DitherConfig cfg{q1, 1.0, samples, 42};
  TensorGraph out = edge_dither(base.slabs[0], cfg);
  const double bound = 5.0 * std::sqrt(q1 * (1 - q1) / samples);
  base.slabs[0].for_each_entry([&](int r, int c, double) {
    int kept = 0;
    for (int i = 0; i < samples; ++i)
      if (out.slabs[i].value_at(r, c) != 0.0) ++kept;
    REQUIRE(std::fabs(static_cast<double>(kept) / samples - q1) < bound);
  });
}

TEST_CASE("an adversarially deleted edge stays deleted in all samples at rate q2^I") {
  // The corrupted value here is an absent edge; each sample keeps it absent
  // with probability q2, independently across the I slabs.
  const double q2 = 0.95;
  const int i_count = 5;
  const int trials = 2000;
  SparseMatrix nominal =
      SparseMatrix::from_edges({{1, 2, 1.0}, {3, 4, 1.0}}, 8, 8, true);
  int all_absent = 0;
  for (int t = 0; t < trials; ++t) {
    DitherConfig cfg{1.0, q2, i_count, 555 + static_cast<std::uint64_t>(t)};
    TensorGraph ed = edge_dither(nominal, cfg);
    bool absent = true;
    for (const SparseMatrix& s : ed.slabs)
      if (s.value_at(0, 5) != 0.0) absent = false;
    if (absent) ++all_absent;
  }
  const double want = std::pow(q2, i_count);
  const double sigma = std::sqrt(want * (1 - want) / trials);
  REQUIRE(std::fabs(static_cast<double>(all_absent) / trials - want) <
          4.0 * sigma);
}

TEST_CASE("dither keeps samples symmetric and is reproducible") {
  TensorGraph base = er_realizations(10, 0.4, 1, 3);
  DitherConfig cfg{0.7, 0.95, 5, 17};
  TensorGraph a = edge_dither(base.slabs[0], cfg);
  TensorGraph b = edge_dither(base.slabs[0], cfg);
  REQUIRE(same_graph(a, b));
  for (const SparseMatrix& s : a.slabs)
    s.for_each_entry(
        [&](int r, int c, double w) { REQUIRE(s.value_at(c, r) == w); });
}

TEST_CASE("dither rejects weighted graphs") {
  SparseMatrix weighted =
      SparseMatrix::from_edges({{0, 1, 0.5}, {1, 0, 0.5}}, 3, 3);
  REQUIRE_THROWS_AS(edge_dither(weighted, DitherConfig{}), validation_error);
}

TEST_CASE("insert_edges count zero is a no-op") {
  TensorGraph base = er_realizations(9, 0.3, 1, 12);
  SparseMatrix out = perturb_insert_edges(base.slabs[0], 0, 55);
  REQUIRE(same_entries(out, base.slabs[0]));
}

TEST_CASE("insert_edges saturates an empty graph to complete") {
  SparseMatrix out = perturb_insert_edges(SparseMatrix(4, 4), 6, 2);
  REQUIRE(out.nnz() == 12);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      REQUIRE(out.value_at(r, c) == (r == c ? 0.0 : 1.0));
}

TEST_CASE("insert_edges completes the path into the triangle") {
  SparseMatrix path =
      SparseMatrix::from_edges({{0, 1, 1.0}, {1, 2, 1.0}}, 3, 3, true);
  SparseMatrix out = perturb_insert_edges(path, 1, 9);
  REQUIRE(out.value_at(0, 2) == 1.0);
  REQUIRE(out.value_at(2, 0) == 1.0);
  REQUIRE(out.nnz() == 6);
}

TEST_CASE("insert_edges validates the requested count") {
  SparseMatrix path =
      SparseMatrix::from_edges({{0, 1, 1.0}, {1, 2, 1.0}}, 3, 3, true);
  REQUIRE_THROWS_AS(perturb_insert_edges(path, 2, 1), validation_error);
}

TEST_CASE("feature noise disappears at infinite snr and on zero signal") {
  Rng rng(6);
  DenseMatrix x(20, 5);
  for (double& v : x.v) v = rng.normal();
  NoiseConfig cfg;
  cfg.snr = std::numeric_limits<double>::infinity();
  DenseMatrix out = add_noise(x, cfg);
  for (std::size_t i = 0; i < x.v.size(); ++i) REQUIRE(out.v[i] == x.v[i]);

  DenseMatrix zeros(20, 5);
  cfg.snr = 1.0;
  out = add_noise(zeros, cfg);
  for (double v : out.v) REQUIRE(v == 0.0);
}

TEST_CASE("feature noise at snr 1 on a unit-power signal has unit variance") {
  DenseMatrix x(1000, 100, 1.0);  // mean square exactly 1
  NoiseConfig cfg;
  cfg.snr = 1.0;
  cfg.seed = 2024;
  DenseMatrix out = add_noise(x, cfg);
  double var = 0.0;
  for (std::size_t i = 0; i < x.v.size(); ++i) {
    const double d = out.v[i] - x.v[i];
    var += d * d;
  }
  var /= static_cast<double>(x.v.size());
  REQUIRE(var == Catch::Approx(1.0).epsilon(0.05));
}

TEST_CASE("edge noise preserves the sparsity pattern") {
  TensorGraph g = er_realizations(12, 0.3, 2, 7);
  NoiseConfig cfg;
  cfg.snr = 2.0;
  cfg.seed = 5;
  cfg.target = NoiseTarget::edges;
  TensorGraph noisy = add_noise(g, cfg);
  for (int i = 0; i < 2; ++i) {
    REQUIRE(noisy.slabs[i].nnz() == g.slabs[i].nnz());
    g.slabs[i].for_each_entry([&](int r, int c, double) {
      REQUIRE(noisy.slabs[i].value_at(r, c) != 0.0);
    });
  }
  REQUIRE_THROWS_AS(add_noise(g, NoiseConfig{0.0, 0, NoiseTarget::edges}),
                    validation_error);
}

TEST_CASE("synthetic dataset has balanced labels and the stated means") {
  const int n = 1000, f = 10;
  Dataset d = synthetic_gaussian_dataset(n, f, 321);
  REQUIRE(d.n_nodes() == n);
  REQUIRE(d.n_features() == f);
  REQUIRE(d.n_classes() == 2);
  int c0 = 0, c1 = 0;
  for (int node = 0; node < n; ++node) {
    REQUIRE(d.labels[node] >= 0);
    (d.labels[node] == 0 ? c0 : c1)++;
    REQUIRE(d.y.at(node, d.labels[node]) == 1.0);
  }
  REQUIRE(c0 == n / 2);
  REQUIRE(c1 == n / 2);

  // Per-class, per-coordinate empirical means within 3*sqrt(0.4/(n/2)).
  const double bound = 3.0 * std::sqrt(0.4 / (n / 2));
  for (int cls = 0; cls < 2; ++cls) {
    for (int j = 0; j < f; ++j) {
      double mean = 0.0;
      int count = 0;
      for (int node = 0; node < n; ++node) {
        if (d.labels[node] != cls) continue;
        mean += d.x.at(node, j);
        ++count;
      }
      mean /= count;
      REQUIRE(std::fabs(mean - static_cast<double>(cls)) < bound);
    }
  }
  REQUIRE_THROWS_AS(synthetic_gaussian_dataset(7, 3, 0), validation_error);
}

TEST_CASE("er realizations span empty to complete") {
  TensorGraph empty = er_realizations(10, 0.0, 3, 1);
  for (const SparseMatrix& s : empty.slabs) REQUIRE(s.nnz() == 0);
  TensorGraph full = er_realizations(10, 1.0, 2, 1);
  for (const SparseMatrix& s : full.slabs) REQUIRE(s.nnz() == 90);
}

TEST_CASE("er edge counts stay within the binomial bound") {
  const int n = 100;
  const double p = 0.1;
  const double mean = p * n * (n - 1) / 2.0;
  const double sigma = std::sqrt(mean * (1 - p));
  TensorGraph g = er_realizations(n, p, 5, 99);
  for (const SparseMatrix& s : g.slabs) {
    const double undirected = s.nnz() / 2.0;
    REQUIRE(std::fabs(undirected - mean) < 3.0 * sigma);
  }
}

TEST_CASE("builders are reproducible and slabs draw independent streams") {
  REQUIRE(same_graph(er_realizations(20, 0.2, 3, 11),
                     er_realizations(20, 0.2, 3, 11)));
  TensorGraph g = er_realizations(20, 0.2, 2, 11);
  REQUIRE(!same_entries(g.slabs[0], g.slabs[1]));

  TensorGraph base = er_realizations(16, 0.3, 1, 2);
  SparseMatrix a = perturb_insert_edges(base.slabs[0], 10, 4);
  SparseMatrix b = perturb_insert_edges(base.slabs[0], 10, 4);
  REQUIRE(same_entries(a, b));

  NoiseConfig nc{1.5, 8, NoiseTarget::features};
  DenseMatrix x(30, 3);
  Rng rng(1);
  for (double& v : x.v) v = rng.normal();
  DenseMatrix na = add_noise(x, nc);
  DenseMatrix nb = add_noise(x, nc);
  for (std::size_t i = 0; i < na.v.size(); ++i) REQUIRE(na.v[i] == nb.v[i]);
}
