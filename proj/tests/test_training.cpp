#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <numeric>

#include "oracles.hpp"
#include "tgcn/experiment.hpp"
#include "tgcn/graph_builders.hpp"
#include "tgcn/training.hpp"

using namespace tgcn;

namespace {

// Minimal fixture: identity graph so the network is a per-node map.
struct ScalarFixture {
  TensorGraph g = TensorGraph::single(SparseMatrix::identity(1));
  ModelConfig cfg;
  PreparedGraph pg;
  DenseMatrix x{1, 1};
  DenseMatrix y{1, 2};
  std::vector<int> labeled{0};

  ScalarFixture() {
    cfg.n_layers = 1;
    cfg.hops = 1;
    cfg.widths = {2};
    cfg.normalize_mode = NormalizeMode::none;
    pg = prepare_graph(g, cfg);
    x.at(0, 0) = 0.7;
    y.at(0, 0) = 1.0;  // true class 0
  }

  ModelParams params(double w1, double w2) const {
    ModelParams p = init_params(make_dims(cfg, 1, 1, 1), 0);
    p.layers[0].z.feat_mix = {w1, w2};
    p.layers[0].x.feat_mix = {0.0, 0.0};
    return p;
  }
};

TensorGraph two_cluster_graph(int n, std::uint64_t seed) {
  // Dense intra-cluster edges, none across.
  Rng rng(seed);
  std::vector<Edge> es;
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b) {
      const bool same = (a < n / 2) == (b < n / 2);
      if (same && rng.uniform() < 0.5) {
        es.push_back({a, b, 1.0});
        es.push_back({b, a, 1.0});
      }
    }
  return TensorGraph::single(SparseMatrix::from_edges(std::move(es), n, n));
}

Dataset small_dataset(int n, std::uint64_t seed) {
  Dataset d = synthetic_gaussian_dataset(n, 4, seed);
  return make_splits(std::move(d), 0.4, 0.2, 0.4, seed + 1);
}

}  // namespace

TEST_CASE("cross entropy hand values") {
  DenseMatrix y(3, 4);
  DenseMatrix yhat(3, 4);
  // Perfect one-hot prediction.
  for (int n = 0; n < 3; ++n) {
    y.at(n, n) = 1.0;
    for (int k = 0; k < 4; ++k) yhat.at(n, k) = (k == n) ? 1.0 : 0.0;
  }
  REQUIRE(cross_entropy(yhat, y, {0, 1, 2}) == Catch::Approx(0.0).margin(1e-12));

  // Uniform prediction, one labeled node, two classes.
  DenseMatrix y2(1, 2), p2(1, 2, 0.5);
  y2.at(0, 1) = 1.0;
  REQUIRE(cross_entropy(p2, y2, {0}) ==
          Catch::Approx(std::log(2.0)).margin(1e-12));

  // p(true) = 0.25 for three labeled nodes over four classes.
  DenseMatrix p4(3, 4, 0.25);
  REQUIRE(cross_entropy(p4, y, {0, 1, 2}) ==
          Catch::Approx(3.0 * std::log(4.0)).margin(1e-12));

  REQUIRE_THROWS_AS(cross_entropy(p4, y, {}), validation_error);
}

TEST_CASE("cross entropy clamps vanishing probabilities") {
  DenseMatrix y(1, 2), p(1, 2);
  y.at(0, 0) = 1.0;
  p.at(0, 0) = 0.0;
  p.at(0, 1) = 1.0;
  REQUIRE(cross_entropy(p, y, {0}) ==
          Catch::Approx(-std::log(1e-12)).margin(1e-9));
}

TEST_CASE("smoothness vanishes for identical rows and empty graphs") {
  TensorGraph g = er_realizations(6, 0.4, 2, 3);
  DenseMatrix yhat(6, 3);
  for (int n = 0; n < 6; ++n)
    for (int k = 0; k < 3; ++k) yhat.at(n, k) = 0.2 * k + 0.1;
  REQUIRE(smoothness_reg(yhat, g) == Catch::Approx(0.0).margin(1e-12));

  TensorGraph empty = TensorGraph::single(SparseMatrix(6, 6));
  REQUIRE(smoothness_reg(yhat, empty) == 0.0);
}

TEST_CASE("smoothness of one disagreeing edge is 2") {
  TensorGraph g = TensorGraph::single(
      SparseMatrix::from_edges({{0, 1, 1.0}}, 2, 2, true));
  DenseMatrix yhat(2, 2);
  yhat.at(0, 0) = 1.0;
  yhat.at(1, 1) = 1.0;
  REQUIRE(smoothness_reg(yhat, g) == Catch::Approx(2.0).margin(1e-12));
}

TEST_CASE("smoothness is nonnegative and zero only on component-constant rows") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 8;
    TensorGraph g = er_realizations(n, 0.25, 1, 40 + trial);

    // Union-find oracle for connected components.
    std::vector<int> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    std::function<int(int)> find = [&](int v) {
      return parent[v] == v ? v : parent[v] = find(parent[v]);
    };
    g.slabs[0].for_each_entry(
        [&](int r, int c, double) { parent[find(r)] = find(c); });

    // Component-constant rows give exactly zero.
    DenseMatrix yhat(n, 2);
    for (int node = 0; node < n; ++node) {
      const double v = 0.1 * find(node);
      yhat.at(node, 0) = v;
      yhat.at(node, 1) = 1.0 - v;
    }
    REQUIRE(smoothness_reg(yhat, g) == Catch::Approx(0.0).margin(1e-12));

    // A perturbation inside a non-singleton component turns it positive.
    int inner = -1;
    for (int node = 0; node < n && inner < 0; ++node)
      if (!neighborhood(g, node, 0).empty()) inner = node;
    if (inner >= 0) {
      yhat.at(inner, 0) += 0.5;
      REQUIRE(smoothness_reg(yhat, g) > 0.0);
    }

    // Random predictions never go negative.
    for (double& v : yhat.v) v = rng.uniform();
    REQUIRE(smoothness_reg(yhat, g) >= 0.0);
  }
}

TEST_CASE("l2 and l1 regularizers") {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.hops = 1;
  cfg.widths = {2};
  ModelParams p = init_params(make_dims(cfg, 4, 2, 3), 0);
  for_each_array(p, [](const std::string&, std::vector<double>& a) {
    for (double& v : a) v = 0.0;
  });
  REQUIRE(l2_reg(p) == 0.0);
  REQUIRE(l1_reg(p) == 0.0);

  p.layers[0].z.feat_mix[0] = 3.0;
  REQUIRE(l2_reg(p) == 9.0);
  p.layers[0].x.feat_mix[0] = -4.0;
  REQUIRE(l2_reg(p) == 25.0);

  // Head bias is exempt from l2; relation weights are not.
  p.head.bias = {5.0, 5.0};
  REQUIRE(l2_reg(p) == 25.0);
  p.head.rel_weights = {1.0, 0.0, 0.0};
  REQUIRE(l2_reg(p) == 26.0);

  // Identity relation mixes on both paths, I=3, one layer.
  ModelParams q = init_params(make_dims(cfg, 4, 2, 3), 0);
  REQUIRE(l1_reg(q) == 6.0);
  q.layers[0].z.rel_mix[1] = -1.0;
  q.layers[0].z.rel_mix[2] = 2.0;
  REQUIRE(l1_reg(q) == 9.0);
}

TEST_CASE("objective decomposes into its four terms") {
  Rng rng(9);
  TensorGraph g = er_realizations(10, 0.3, 2, 6);
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.hops = 2;
  cfg.widths = {3, 2};
  PreparedGraph pg = prepare_graph(g, cfg);
  DenseMatrix x(10, 3);
  for (double& v : x.v) v = rng.normal();
  DenseMatrix y(10, 2);
  std::vector<int> labeled;
  for (int n = 0; n < 10; n += 2) {
    labeled.push_back(n);
    y.at(n, n % 4 == 0 ? 0 : 1) = 1.0;
  }
  ModelParams p = init_params(make_dims(cfg, 10, 3, 2), 4);
  for_each_array(p, [&](const std::string&, std::vector<double>& a) {
    for (double& v : a) v = rng.uniform(-0.5, 0.5);
  });

  TrainConfig tc;
  tc.mu1 = 0.7;
  tc.mu2 = 0.3;
  tc.lambda = 0.11;
  const double total = objective(x, pg, y, labeled, p, tc);

  DenseMatrix yhat = forward(x, pg.prop, p, Mode::train);
  const double want = cross_entropy(yhat, y, labeled) +
                      tc.mu1 * smoothness_reg(yhat, g) + tc.mu2 * l2_reg(p) +
                      tc.lambda * l1_reg(p);
  REQUIRE(total == Catch::Approx(want).margin(1e-12));

  TrainConfig plain;
  plain.mu1 = plain.mu2 = plain.lambda = 0.0;
  REQUIRE(objective(x, pg, y, labeled, p, plain) ==
          Catch::Approx(cross_entropy(yhat, y, labeled)).margin(1e-12));
}

TEST_CASE("objective of all-zero parameters is |M| ln 2") {
  TensorGraph g = er_realizations(8, 0.4, 1, 2);
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.hops = 1;
  cfg.widths = {2};
  PreparedGraph pg = prepare_graph(g, cfg);
  DenseMatrix x(8, 3, 1.0);
  DenseMatrix y(8, 2);
  std::vector<int> labeled{0, 2, 5};
  for (int n : labeled) y.at(n, 0) = 1.0;
  ModelParams p = init_params(make_dims(cfg, 8, 3, 1), 0);
  for_each_array(p, [](const std::string&, std::vector<double>& a) {
    for (double& v : a) v = 0.0;
  });
  TrainConfig tc;
  tc.mu1 = tc.mu2 = tc.lambda = 0.0;
  REQUIRE(objective(x, pg, y, labeled, p, tc) ==
          Catch::Approx(3.0 * std::log(2.0)).margin(1e-12));
}

TEST_CASE("gradient of the decay term alone vanishes at zero parameters") {
  ScalarFixture fx;
  ModelParams p = fx.params(0.0, 0.0);
  for_each_array(p, [](const std::string&, std::vector<double>& a) {
    for (double& v : a) v = 0.0;
  });
  TrainConfig tc;
  tc.mu1 = 0.0;
  tc.lambda = 0.0;
  tc.mu2 = 1.0;
  GradResult gr = gradients(fx.x, fx.pg, fx.y, fx.labeled, p, tc);
  // Cross entropy of the uniform output also has zero logit gradient by
  // symmetry except through the bias; decay contributes nothing at zero.
  for (std::size_t l = 0; l < gr.grads.layers.size(); ++l) {
    for (double v : gr.grads.layers[l].z.rel_mix) REQUIRE(v == 0.0);
    for (double v : gr.grads.layers[l].z.hop_coeff) REQUIRE(v == 0.0);
  }
}

TEST_CASE("cross-entropy gradient matches the analytic softmax derivative") {
  // Single node, identity graph: logits_k = w_k * x, so
  // d(loss)/d(w_k) = (yhat_k - y_k) * x. Both weights positive keeps the
  // ReLU inactive on x > 0.
  ScalarFixture fx;
  const double w1 = 0.4, w2 = 0.9;
  ModelParams p = fx.params(w1, w2);
  TrainConfig tc;
  tc.mu1 = tc.mu2 = tc.lambda = 0.0;
  GradResult gr = gradients(fx.x, fx.pg, fx.y, fx.labeled, p, tc);

  const double xv = fx.x.at(0, 0);
  const double e1 = std::exp(w1 * xv), e2 = std::exp(w2 * xv);
  const double p1 = e1 / (e1 + e2);
  REQUIRE(gr.grads.layers[0].z.feat_mix[0] ==
          Catch::Approx((p1 - 1.0) * xv).margin(1e-12));
  REQUIRE(gr.grads.layers[0].z.feat_mix[1] ==
          Catch::Approx((1.0 - p1) * xv).margin(1e-12));
}

TEST_CASE("full tiny model agrees with central differences") {
  GradcheckOutcome res = gradcheck_tiny(true, true, 3, 1e-5);
  REQUIRE(res.max_rel_error < 1e-4);
  res = gradcheck_tiny(false, false, 3, 1e-5);
  REQUIRE(res.max_rel_error < 1e-4);
}

TEST_CASE("gradients surface non-finite values as numeric errors") {
  ScalarFixture fx;
  fx.x.at(0, 0) = 1e200;  // overflows the first matmul
  ModelParams p = fx.params(1e200, 1e200);
  TrainConfig tc;
  REQUIRE_THROWS_AS(gradients(fx.x, fx.pg, fx.y, fx.labeled, p, tc),
                    numeric_error);
}

TEST_CASE("adam leaves parameters alone under zero gradients") {
  ScalarFixture fx;
  ModelParams p = fx.params(0.3, -0.2);
  ModelParams g = zeros_like(p);
  AdamState st = AdamState::init(p);
  TrainConfig tc;
  ModelParams before = p;
  adam_step(p, g, st, tc);
  for (std::size_t i = 0; i < p.layers[0].z.feat_mix.size(); ++i)
    REQUIRE(p.layers[0].z.feat_mix[i] == before.layers[0].z.feat_mix[i]);
}

TEST_CASE("adam first step magnitude is lr * |g| / (|g| + eps)") {
  ScalarFixture fx;
  ModelParams p = fx.params(1.0, 1.0);
  ModelParams g = zeros_like(p);
  const double grad = 0.37;
  g.layers[0].z.feat_mix[0] = grad;
  AdamState st = AdamState::init(p);
  TrainConfig tc;
  tc.learning_rate = 0.01;
  adam_step(p, g, st, tc);
  const double delta = 1.0 - p.layers[0].z.feat_mix[0];
  REQUIRE(delta ==
          Catch::Approx(tc.learning_rate * grad / (grad + tc.adam_eps))
              .margin(1e-12));
}

TEST_CASE("adam descends monotonically under a constant gradient") {
  ScalarFixture fx;
  ModelParams p = fx.params(5.0, 0.0);
  ModelParams g = zeros_like(p);
  g.layers[0].z.feat_mix[0] = 1.0;
  AdamState st = AdamState::init(p);
  TrainConfig tc;
  double prev = 5.0;
  for (int step = 0; step < 100; ++step) {
    adam_step(p, g, st, tc);
    REQUIRE(p.layers[0].z.feat_mix[0] < prev);
    prev = p.layers[0].z.feat_mix[0];
  }
}

TEST_CASE("train honors patience = max_epochs") {
  Dataset d = small_dataset(40, 11);
  TensorGraph g = two_cluster_graph(40, 3);
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.hops = 1;
  cfg.widths = {4, 2};
  TrainConfig tc;
  tc.max_epochs = 25;
  tc.patience = 25;
  tc.seed = 5;
  TrainOutcome out = train(d, g, cfg, tc);
  REQUIRE(out.history.epochs.size() == 25);
  REQUIRE(out.history.stop_reason == "max_epochs");
}

TEST_CASE("training reduces the objective from its initial value") {
  Dataset d = small_dataset(60, 21);
  TensorGraph g = two_cluster_graph(60, 9);
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.hops = 2;
  cfg.widths = {6, 2};
  TrainConfig tc;
  tc.max_epochs = 60;
  tc.patience = 60;
  tc.seed = 1;
  TrainOutcome out = train(d, g, cfg, tc);
  REQUIRE(out.history.best_epoch >= 0);
  REQUIRE(out.history.epochs[out.history.best_epoch].train_loss <=
          out.history.epochs[0].train_loss);
}

TEST_CASE("training is bitwise reproducible") {
  Dataset d = small_dataset(30, 31);
  TensorGraph g = two_cluster_graph(30, 7);
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.hops = 1;
  cfg.widths = {3, 2};
  TrainConfig tc;
  tc.max_epochs = 20;
  tc.patience = 20;
  tc.seed = 77;
  TrainOutcome a = train(d, g, cfg, tc);
  TrainOutcome b = train(d, g, cfg, tc);
  REQUIRE(a.history.epochs.size() == b.history.epochs.size());
  for (std::size_t e = 0; e < a.history.epochs.size(); ++e) {
    REQUIRE(a.history.epochs[e].train_loss == b.history.epochs[e].train_loss);
    REQUIRE(a.history.epochs[e].val_loss == b.history.epochs[e].val_loss);
    REQUIRE(a.history.epochs[e].val_acc == b.history.epochs[e].val_acc);
  }
  auto pa = detail::array_ptrs(a.params);
  auto pb = detail::array_ptrs(b.params);
  for (std::size_t i = 0; i < pa.size(); ++i) REQUIRE(*pa[i] == *pb[i]);
}

TEST_CASE("train validates its inputs") {
  Dataset d = small_dataset(20, 41);
  TensorGraph g = two_cluster_graph(20, 5);
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.hops = 1;
  cfg.widths = {2};
  TrainConfig tc;

  Dataset no_val = d;
  no_val.val_mask.assign(20, 0);
  REQUIRE_THROWS_AS(train(no_val, g, cfg, tc), validation_error);

  Dataset unlabeled_val = d;
  for (int n = 0; n < 20; ++n)
    if (unlabeled_val.val_mask[n]) unlabeled_val.labels[n] = -1;
  REQUIRE_THROWS_AS(train(unlabeled_val, g, cfg, tc), validation_error);

  ModelConfig bad = cfg;
  bad.widths = {3};
  REQUIRE_THROWS_AS(train(d, g, bad, tc), validation_error);

  TrainConfig bad_tc = tc;
  bad_tc.patience = bad_tc.max_epochs + 1;
  REQUIRE_THROWS_AS(train(d, g, cfg, bad_tc), validation_error);
}

TEST_CASE("training runs with per-node mixing enabled") {
  Dataset d = small_dataset(24, 51);
  TensorGraph g(24, {two_cluster_graph(24, 2).slabs[0],
                     er_realizations(24, 0.2, 1, 4).slabs[0]});
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.hops = 2;
  cfg.widths = {3, 2};
  cfg.share_relation_mix = false;
  cfg.share_feature_mix = false;
  TrainConfig tc;
  tc.max_epochs = 15;
  tc.patience = 15;
  tc.seed = 3;
  TrainOutcome out = train(d, g, cfg, tc);
  REQUIRE(out.history.epochs.size() == 15);
  REQUIRE(out.params.dims.n_star_r() == 24);
  REQUIRE(out.params.dims.n_star_w() == 24);
  REQUIRE(out.history.epochs[out.history.best_epoch].train_loss <=
          out.history.epochs[0].train_loss);
}

TEST_CASE("finite differences are near-exact on a quadratic objective") {
  // Zero features freeze every activation at zero, and a saturated bias
  // pins every labeled probability deep inside the log clamp, so the whole
  // objective reduces to the decay quadratic plus a constant.
  TensorGraph g = er_realizations(6, 0.5, 1, 8);
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.hops = 1;
  cfg.widths = {2, 2};
  PreparedGraph pg = prepare_graph(g, cfg);
  DenseMatrix x(6, 2);  // all zero
  DenseMatrix y(6, 2);
  std::vector<int> labeled{3};
  y.at(3, 1) = 1.0;
  Rng rng(15);
  ModelParams p = init_params(make_dims(cfg, 6, 2, 1), 3);
  for_each_array(p, [&](const std::string&, std::vector<double>& a) {
    for (double& v : a) v = rng.uniform(-1.0, 1.0);
  });
  p.head.bias = {50.0, -50.0};  // true class 1 stays clamped under eps moves
  TrainConfig tc;
  tc.mu1 = 0.0;
  tc.lambda = 0.0;
  tc.mu2 = 0.5;
  FiniteDiffReport rep = finite_diff_check(x, pg, y, labeled, p, tc, 1e-5);
  REQUIRE(rep.max_normwise_error < 1e-9);
  REQUIRE(rep.n_checked > 0);
  REQUIRE(rep.excluded.empty());
}

TEST_CASE("finite_diff_check rejects a zero step") {
  ScalarFixture fx;
  ModelParams p = fx.params(0.1, 0.2);
  TrainConfig tc;
  REQUIRE_THROWS_AS(finite_diff_check(fx.x, fx.pg, fx.y, fx.labeled, p, tc, 0.0),
                    validation_error);
}
