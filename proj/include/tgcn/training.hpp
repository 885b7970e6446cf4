#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "tgcn/dataset.hpp"
#include "tgcn/metrics.hpp"
#include "tgcn/model.hpp"

namespace tgcn {

struct TrainConfig {
  double mu1 = 1e-6;    // label-smoothness weight
  double mu2 = 5e-4;    // weight decay
  double lambda = 1e-6; // l1 weight on the relation mixes
  double learning_rate = 0.005;
  int max_epochs = 300;
  int patience = 60;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (mu1 < 0 || mu2 < 0 || lambda < 0)
      throw validation_error("train: regularizer weights must be >= 0");
    if (learning_rate < 0) throw validation_error("train: negative learning rate");
    if (max_epochs < 1) throw validation_error("train: max_epochs must be >= 1");
    if (patience < 0 || patience > max_epochs)
      throw validation_error("train: need 0 <= patience <= max_epochs");
  }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  std::string stop_reason;  // "early_stop" or "max_epochs"
};

// ---------------------------------------------------------------------------
// Objective terms
// ---------------------------------------------------------------------------

/// Negative log-likelihood summed over the labeled set; probabilities are
/// clamped at 1e-12 before the log.
inline double cross_entropy(const DenseMatrix& yhat, const DenseMatrix& y,
                            const std::vector<int>& labeled) {
  if (labeled.empty()) throw validation_error("cross_entropy: empty labeled set");
  double loss = 0.0;
  for (int n : labeled) {
    const double* yr = y.row(n);
    const double* pr = yhat.row(n);
    for (int k = 0; k < y.cols; ++k)
      if (yr[k] != 0.0) loss -= yr[k] * std::log(std::max(pr[k], 1e-12));
  }
  return loss;
}

/// Laplacians of the entrywise-absolute slabs; the quadratic form below is
/// then a nonnegative disagreement penalty even for signed edge weights.
inline std::vector<SparseMatrix> smoothness_laplacians(const TensorGraph& g) {
  std::vector<SparseMatrix> out;
  out.reserve(g.slabs.size());
  for (const SparseMatrix& s : g.slabs) out.push_back(s.abs().laplacian());
  return out;
}

inline double smoothness_reg(const DenseMatrix& yhat,
                             const std::vector<SparseMatrix>& laplacians,
                             DenseMatrix& scratch) {
  double total = 0.0;
  for (const SparseMatrix& lap : laplacians) {
    lap.apply(yhat, scratch);
    for (std::size_t k = 0; k < yhat.v.size(); ++k)
      total += yhat.v[k] * scratch.v[k];
  }
  return total;
}

/// sum_i Tr(Yhat^T L_i Yhat), equal to the per-edge squared disagreement of
/// prediction rows weighted by |S_nn'i|.
inline double smoothness_reg(const DenseMatrix& yhat, const TensorGraph& g) {
  DenseMatrix scratch;
  auto laps = smoothness_laplacians(g);
  return smoothness_reg(yhat, laps, scratch);
}

/// Squared l2 norm over all path parameters and the head's relation weights;
/// the head bias is exempt.
inline double l2_reg(const ModelParams& p) {
  double total = 0.0;
  for_each_array(p, [&](const std::string& name, const std::vector<double>& a) {
    if (name == "head.bias") return;
    for (double v : a) total += v * v;
  });
  return total;
}

/// l1 norm over the relation-mix tensors of both paths, all layers.
inline double l1_reg(const ModelParams& p) {
  double total = 0.0;
  for (const LayerParams& l : p.layers) {
    for (double v : l.z.rel_mix) total += std::fabs(v);
    for (double v : l.x.rel_mix) total += std::fabs(v);
  }
  return total;
}

/// Per-problem caches: hop products of X, regularizer Laplacians, scratch.
struct TrainCache {
  Workspace ws;
  std::vector<SparseMatrix> laplacians;
  DenseMatrix scratch;
  bool ready = false;

  void prepare(const DenseMatrix& x, const PreparedGraph& pg) {
    ws.prepare(x, pg.prop);
    laplacians = smoothness_laplacians(pg.raw);
    ready = true;
  }
};

namespace detail {

inline double objective_from_trace(const ForwardTrace& tr, const DenseMatrix& y,
                                   const std::vector<int>& labeled,
                                   const ModelParams& params,
                                   const TrainConfig& cfg, TrainCache& cache) {
  double loss = cross_entropy(tr.yhat, y, labeled);
  if (cfg.mu1 != 0.0)
    loss += cfg.mu1 * smoothness_reg(tr.yhat, cache.laplacians, cache.scratch);
  if (cfg.mu2 != 0.0) loss += cfg.mu2 * l2_reg(params);
  if (cfg.lambda != 0.0) loss += cfg.lambda * l1_reg(params);
  return loss;
}

}  // namespace detail

/// Training objective: cross-entropy over the labeled set plus the three
/// regularizers. The forward pass runs with dropout disabled so the value is
/// deterministic.
inline double objective(const DenseMatrix& x, const PreparedGraph& pg,
                        const DenseMatrix& y, const std::vector<int>& labeled,
                        const ModelParams& params, const TrainConfig& cfg,
                        TrainCache* cache = nullptr) {
  TrainCache local;
  TrainCache& c = cache != nullptr ? *cache : local;
  if (!c.ready) c.prepare(x, pg);
  ForwardTrace tr;
  forward_trace(x, pg.prop, params, Mode::train, 0.0, nullptr, c.ws, tr);
  return detail::objective_from_trace(tr, y, labeled, params, cfg, c);
}

struct GradResult {
  ModelParams grads;
  double objective = 0.0;
  DenseMatrix yhat;  // predictions at the evaluated parameters
};

/// Exact reverse-mode gradient of `objective`. The l1 term uses the
/// subgradient sign(x) with sign(0) = 0; ReLU uses derivative 0 at 0.
inline GradResult gradients(const DenseMatrix& x, const PreparedGraph& pg,
                            const DenseMatrix& y,
                            const std::vector<int>& labeled,
                            const ModelParams& params, const TrainConfig& cfg,
                            TrainCache* cache = nullptr) {
  TrainCache local;
  TrainCache& c = cache != nullptr ? *cache : local;
  if (!c.ready) c.prepare(x, pg);

  ForwardTrace tr;
  forward_trace(x, pg.prop, params, Mode::train, 0.0, nullptr, c.ws, tr);

  const int n = tr.yhat.rows;
  const int k_count = tr.yhat.cols;

  // d(loss)/d(yhat): cross entropy on labeled rows plus the smoothness
  // quadratic, whose Laplacians are symmetric.
  DenseMatrix dyhat(n, k_count);
  for (int node : labeled) {
    const double* yr = y.row(node);
    const double* pr = tr.yhat.row(node);
    double* dr = dyhat.row(node);
    for (int k = 0; k < k_count; ++k)
      if (yr[k] != 0.0 && pr[k] > 1e-12) dr[k] -= yr[k] / pr[k];
  }
  if (cfg.mu1 != 0.0) {
    for (const SparseMatrix& lap : c.laplacians) {
      lap.apply(tr.yhat, c.scratch);
      for (std::size_t j = 0; j < dyhat.v.size(); ++j)
        dyhat.v[j] += 2.0 * cfg.mu1 * c.scratch.v[j];
    }
  }

  // Softmax backward per row: dz_k = p_k (dy_k - sum_j dy_j p_j).
  DenseMatrix dlogits(n, k_count);
  for (int node = 0; node < n; ++node) {
    const double* pr = tr.yhat.row(node);
    const double* dr = dyhat.row(node);
    double* dl = dlogits.row(node);
    double inner = 0.0;
    for (int k = 0; k < k_count; ++k) inner += dr[k] * pr[k];
    for (int k = 0; k < k_count; ++k) dl[k] = pr[k] * (dr[k] - inner);
  }

  GradResult res;
  res.grads = zeros_like(params);
  backward_from_dlogits(x, pg.prop, params, tr, dlogits, c.ws, res.grads);

  // Weight decay on everything but the head bias.
  if (cfg.mu2 != 0.0) {
    auto add_decay = [&](const std::vector<double>& src,
                         std::vector<double>& dst) {
      for (std::size_t j = 0; j < src.size(); ++j)
        dst[j] += 2.0 * cfg.mu2 * src[j];
    };
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
      add_decay(params.layers[l].z.hop_coeff, res.grads.layers[l].z.hop_coeff);
      add_decay(params.layers[l].z.rel_mix, res.grads.layers[l].z.rel_mix);
      add_decay(params.layers[l].z.feat_mix, res.grads.layers[l].z.feat_mix);
      add_decay(params.layers[l].x.hop_coeff, res.grads.layers[l].x.hop_coeff);
      add_decay(params.layers[l].x.rel_mix, res.grads.layers[l].x.rel_mix);
      add_decay(params.layers[l].x.feat_mix, res.grads.layers[l].x.feat_mix);
    }
    add_decay(params.head.rel_weights, res.grads.head.rel_weights);
  }

  // l1 subgradient on the relation mixes.
  if (cfg.lambda != 0.0) {
    auto add_sign = [&](const std::vector<double>& src,
                        std::vector<double>& dst) {
      for (std::size_t j = 0; j < src.size(); ++j) {
        if (src[j] > 0.0)
          dst[j] += cfg.lambda;
        else if (src[j] < 0.0)
          dst[j] -= cfg.lambda;
      }
    };
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
      add_sign(params.layers[l].z.rel_mix, res.grads.layers[l].z.rel_mix);
      add_sign(params.layers[l].x.rel_mix, res.grads.layers[l].x.rel_mix);
    }
  }

  for_each_array(res.grads,
                 [](const std::string& name, const std::vector<double>& a) {
                   for (double v : a)
                     if (!std::isfinite(v))
                       throw numeric_error("non-finite gradient in " + name);
                 });

  res.objective = detail::objective_from_trace(tr, y, labeled, params, cfg, c);
  res.yhat = std::move(tr.yhat);
  return res;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamState {
  ModelParams m, v;
  long step = 0;

  static AdamState init(const ModelParams& params) {
    AdamState st;
    st.m = zeros_like(params);
    st.v = zeros_like(params);
    return st;
  }
};

namespace detail {

inline std::vector<std::vector<double>*> array_ptrs(ModelParams& p) {
  std::vector<std::vector<double>*> out;
  for_each_array(p, [&](const std::string&, std::vector<double>& a) {
    out.push_back(&a);
  });
  return out;
}

inline std::vector<const std::vector<double>*> array_ptrs(const ModelParams& p) {
  std::vector<const std::vector<double>*> out;
  for_each_array(p, [&](const std::string&, const std::vector<double>& a) {
    out.push_back(&a);
  });
  return out;
}

}  // namespace detail

/// Bias-corrected Adam update, applied in place.
inline void adam_step(ModelParams& params, const ModelParams& grads,
                      AdamState& st, const TrainConfig& cfg) {
  ++st.step;
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  auto pa = detail::array_ptrs(params);
  auto ga = detail::array_ptrs(grads);
  auto ma = detail::array_ptrs(st.m);
  auto va = detail::array_ptrs(st.v);
  for (std::size_t a = 0; a < pa.size(); ++a) {
    std::vector<double>& p = *pa[a];
    const std::vector<double>& g = *ga[a];
    std::vector<double>& m = *ma[a];
    std::vector<double>& v = *va[a];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      const double mhat = m[j] / corr1;
      const double vhat = v[j] / corr2;
      p[j] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainOutcome {
  ModelParams params;  // parameters from the best validation epoch
  TrainHistory history;
};

/// Full-batch training with early stopping on the validation cross-entropy.
/// Ties count as "no improvement". Bit-reproducible given the seed.
inline TrainOutcome train(const Dataset& data, const TensorGraph& g,
                          const ModelConfig& mcfg, const TrainConfig& tcfg) {
  tcfg.validate();
  mcfg.validate();
  const std::vector<int> train_nodes = data.train_nodes();
  const std::vector<int> val_nodes = data.val_nodes();
  if (train_nodes.empty()) throw validation_error("train: empty train split");
  if (val_nodes.empty()) throw validation_error("train: empty validation split");
  auto any_labeled = [&](const std::vector<int>& nodes) {
    for (int n : nodes)
      if (data.labels[n] >= 0) return true;
    return false;
  };
  if (!any_labeled(train_nodes))
    throw validation_error("train: no labeled node in the train split");
  if (!any_labeled(val_nodes))
    throw validation_error("train: no labeled node in the validation split");
  if (mcfg.widths.back() != data.n_classes())
    throw validation_error("train: final layer width must equal class count");

  PreparedGraph pg = prepare_graph(g, mcfg);
  const ModelDims dims =
      make_dims(mcfg, data.n_nodes(), data.n_features(), g.n_relations());
  ModelParams params = init_params(dims, tcfg.seed);
  AdamState adam = AdamState::init(params);
  TrainCache cache;
  cache.prepare(data.x, pg);

  TrainOutcome out;
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;
  out.history.stop_reason = "max_epochs";

  for (int epoch = 0; epoch < tcfg.max_epochs; ++epoch) {
    GradResult gr;
    try {
      gr = gradients(data.x, pg, data.y, train_nodes, params, tcfg, &cache);
    } catch (const numeric_error& e) {
      throw numeric_error(std::string(e.what()) + " (epoch " +
                          std::to_string(epoch) + ")");
    }
    const double val_loss = cross_entropy(gr.yhat, data.y, val_nodes);
    const double val_acc = accuracy(gr.yhat, data.labels, val_nodes);
    if (!std::isfinite(gr.objective) || !std::isfinite(val_loss))
      throw numeric_error("train: non-finite loss at epoch " +
                          std::to_string(epoch));
    out.history.epochs.push_back({epoch, gr.objective, val_loss, val_acc});

    if (val_loss < best_val) {
      best_val = val_loss;
      out.history.best_epoch = epoch;
      out.params = params;  // snapshot that produced this validation loss
      since_best = 0;
    } else {
      ++since_best;
      if (since_best >= tcfg.patience) {
        out.history.stop_reason = "early_stop";
        break;
      }
    }
    adam_step(params, gr.grads, adam, tcfg);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

struct FiniteDiffReport {
  // Per-coordinate relative error, |fd - an| / max(|fd|, |an|, 1e-5).
  double max_rel_error = 0.0;
  // Largest absolute disagreement relative to the largest gradient entry;
  // this is the roundoff-limited metric (a pure quadratic objective drives
  // it to ~1e-10 at eps = 1e-5, while per-coordinate ratios on near-zero
  // entries saturate at the cancellation floor).
  double max_normwise_error = 0.0;
  std::string worst_coordinate;
  int n_checked = 0;
  std::vector<std::string> excluded;  // kink-adjacent coordinates
};

namespace detail {

// Objective value plus a kink signature: the sign of every pre-activation
// and the clamp state of every labeled probability. A finite difference is
// trustworthy only when the signature matches on both sides; additionally an
// unclamped probability just above the clamp has huge curvature, so the
// smallest unclamped probability is reported for a curvature guard.
inline double objective_probed(const DenseMatrix& x, const PreparedGraph& pg,
                               const DenseMatrix& y,
                               const std::vector<int>& labeled,
                               const ModelParams& params,
                               const TrainConfig& cfg, TrainCache& cache,
                               std::vector<std::uint8_t>& signs,
                               double& min_unclamped_prob) {
  ForwardTrace tr;
  forward_trace(x, pg.prop, params, Mode::train, 0.0, nullptr, cache.ws, tr);
  signs.clear();
  for (const LayerTrace& lt : tr.layers)
    for (const DenseMatrix& s : lt.pre.slabs)
      for (double v : s.v) signs.push_back(v > 0.0 ? 1 : 0);
  min_unclamped_prob = 1.0;
  for (int node : labeled) {
    const double* yr = y.row(node);
    const double* pr = tr.yhat.row(node);
    for (int k = 0; k < y.cols; ++k) {
      if (yr[k] == 0.0) continue;
      const bool clamped = pr[k] <= 1e-12;
      signs.push_back(clamped ? 1 : 0);
      if (!clamped) min_unclamped_prob = std::min(min_unclamped_prob, pr[k]);
    }
  }
  return objective_from_trace(tr, y, labeled, params, cfg, cache);
}

}  // namespace detail

/// Central differences against the analytic gradient, coordinate by
/// coordinate. Coordinates whose perturbation flips a ReLU activation sign,
/// sits within eps of an |.| kink, or drives a labeled probability into the
/// log clamp are excluded and reported.
inline FiniteDiffReport finite_diff_check(const DenseMatrix& x,
                                          const PreparedGraph& pg,
                                          const DenseMatrix& y,
                                          const std::vector<int>& labeled,
                                          const ModelParams& params,
                                          const TrainConfig& cfg, double eps) {
  if (!(eps > 0.0)) throw validation_error("finite_diff_check: eps must be > 0");
  TrainCache cache;
  cache.prepare(x, pg);
  GradResult gr = gradients(x, pg, y, labeled, params, cfg, &cache);

  ModelParams probe = params;
  auto arrays = detail::array_ptrs(probe);
  auto grad_arrays = detail::array_ptrs(gr.grads);
  std::vector<std::string> names;
  for_each_array(probe, [&](const std::string& name, std::vector<double>&) {
    names.push_back(name);
  });

  FiniteDiffReport report;
  double max_abs_diff = 0.0;
  double max_grad_mag = 0.0;
  std::vector<std::uint8_t> signs_plus, signs_minus;
  for (std::size_t a = 0; a < arrays.size(); ++a) {
    std::vector<double>& arr = *arrays[a];
    const bool is_rel_mix = names[a].find("rel_mix") != std::string::npos;
    for (std::size_t j = 0; j < arr.size(); ++j) {
      const double saved = arr[j];
      const std::string coord = names[a] + "[" + std::to_string(j) + "]";

      if (cfg.lambda != 0.0 && is_rel_mix && std::fabs(saved) <= eps) {
        report.excluded.push_back(coord);
        continue;
      }

      double prob_plus = 1.0, prob_minus = 1.0;
      arr[j] = saved + eps;
      const double f_plus = detail::objective_probed(
          x, pg, y, labeled, probe, cfg, cache, signs_plus, prob_plus);
      arr[j] = saved - eps;
      const double f_minus = detail::objective_probed(
          x, pg, y, labeled, probe, cfg, cache, signs_minus, prob_minus);
      arr[j] = saved;

      if (signs_plus != signs_minus || prob_plus < 1e-10 || prob_minus < 1e-10) {
        report.excluded.push_back(coord);
        continue;
      }

      const double fd = (f_plus - f_minus) / (2.0 * eps);
      const double an = (*grad_arrays[a])[j];
      const double rel = std::fabs(fd - an) /
                         std::max({std::fabs(fd), std::fabs(an), 1e-5});
      ++report.n_checked;
      max_abs_diff = std::max(max_abs_diff, std::fabs(fd - an));
      max_grad_mag = std::max({max_grad_mag, std::fabs(fd), std::fabs(an)});
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_coordinate = coord;
      }
    }
  }
  report.max_normwise_error = max_abs_diff / std::max(max_grad_mag, 1e-30);
  return report;
}

}  // namespace tgcn
