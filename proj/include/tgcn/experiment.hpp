#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tgcn/data_io.hpp"
#include "tgcn/graph_builders.hpp"
#include "tgcn/metrics.hpp"
#include "tgcn/model.hpp"
#include "tgcn/training.hpp"

namespace tgcn {

// Substream ids so every stage of a repeat draws independently.
namespace streams {
inline constexpr std::uint64_t synthetic = 1;
inline constexpr std::uint64_t er = 2;
inline constexpr std::uint64_t insert = 3;
inline constexpr std::uint64_t dither = 4;
inline constexpr std::uint64_t noise_edges = 5;
inline constexpr std::uint64_t noise_features = 6;
inline constexpr std::uint64_t splits = 7;
}  // namespace streams

/// A fully parsed experiment description: where the data comes from, how the
/// graph tensor is assembled, the model and training settings, what subset is
/// evaluated, and an optional single swept key.
struct ExperimentSpec {
  // Data source.
  std::string dataset_dir;  // empty when synthetic
  bool synthetic = false;
  int synthetic_n = 1000;
  int synthetic_f = 10;
  bool identity_features = false;
  bool row_normalize = false;

  // Graph assembly, applied in this order.
  bool use_dataset_graph = true;
  std::string graph_load_dir;
  std::vector<int> knn_k;
  std::vector<double> corr_eta;
  double er_p = 0.0;
  int er_samples = 0;
  long long insert_edges = 0;
  int dither_samples = 0;
  double dither_q1 = 1.0;
  double dither_q2 = 1.0;
  double noise_features_snr = 0.0;  // 0 disables
  double noise_edges_snr = 0.0;     // 0 disables

  // Splits.
  bool use_dataset_splits = false;
  double split_train = 0.3, split_val = 0.3, split_test = 0.4;

  // Evaluation subset.
  std::string eval_subset = "test";  // "test" or "attacked"
  std::string attacked_nodes_file;

  // Model and training.
  std::vector<int> hidden_widths;  // final K width is appended per dataset
  int hops = 2;
  bool share_relation_mix = true;
  bool share_feature_mix = true;
  NormalizeMode normalize_mode = NormalizeMode::symmetric;
  bool add_self_loops = false;
  double dropout_rate = 0.0;
  TrainConfig train_cfg;

  int repeats = 1;
  std::uint64_t seed_base = 0;

  std::string sweep_key;
  std::vector<std::string> sweep_values;
};

namespace detail {

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw format_error("bad boolean for " + key + ": " + s);
}

template <class T>
std::vector<T> parse_list(const std::string& s, const std::string& key) {
  std::vector<T> out;
  std::string item;
  std::istringstream ss(s);
  while (std::getline(ss, item, ',')) {
    item = io::trim(item);
    if (item.empty()) continue;
    std::istringstream vs(item);
    T v;
    vs >> v;
    if (vs.fail()) throw format_error("bad list value for " + key + ": " + item);
    out.push_back(v);
  }
  return out;
}

}  // namespace detail

/// Parse a spec from key=value pairs; unknown keys are rejected so typos
/// fail loudly.
inline ExperimentSpec parse_experiment_spec(
    const std::map<std::string, std::string>& kv) {
  static const std::vector<std::string> train_keys = {
      "train.mu1",        "train.mu2",        "train.lambda",
      "train.learning_rate", "train.max_epochs", "train.patience",
      "train.seed",       "train.adam_beta1", "train.adam_beta2",
      "train.adam_eps"};
  ExperimentSpec s;
  s.train_cfg = train_config_from_kv(kv, "train.");
  bool saw_use_dataset_graph = false;
  for (const auto& [key, value] : kv) {
    if (key.rfind("train.", 0) == 0) {
      if (std::find(train_keys.begin(), train_keys.end(), key) ==
          train_keys.end())
        throw format_error("unknown spec key: " + key);
      continue;
    }
    if (key == "dataset") {
      if (value == "synthetic")
        s.synthetic = true;
      else
        s.dataset_dir = value;
    } else if (key == "synthetic.n") {
      s.synthetic_n = std::stoi(value);
    } else if (key == "synthetic.f") {
      s.synthetic_f = std::stoi(value);
    } else if (key == "data.identity_features") {
      s.identity_features = detail::parse_bool(value, key);
    } else if (key == "data.row_normalize") {
      s.row_normalize = detail::parse_bool(value, key);
    } else if (key == "graph.use_dataset") {
      s.use_dataset_graph = detail::parse_bool(value, key);
      saw_use_dataset_graph = true;
    } else if (key == "graph.load") {
      s.graph_load_dir = value;
    } else if (key == "graph.knn") {
      s.knn_k = detail::parse_list<int>(value, key);
    } else if (key == "graph.corr") {
      s.corr_eta = detail::parse_list<double>(value, key);
    } else if (key == "graph.er.p") {
      s.er_p = std::stod(value);
    } else if (key == "graph.er.samples") {
      s.er_samples = std::stoi(value);
    } else if (key == "graph.insert_edges") {
      s.insert_edges = std::stoll(value);
    } else if (key == "graph.dither.samples") {
      s.dither_samples = std::stoi(value);
    } else if (key == "graph.dither.q1") {
      s.dither_q1 = std::stod(value);
    } else if (key == "graph.dither.q2") {
      s.dither_q2 = std::stod(value);
    } else if (key == "noise.features.snr") {
      s.noise_features_snr = std::stod(value);
    } else if (key == "noise.edges.snr") {
      s.noise_edges_snr = std::stod(value);
    } else if (key == "splits.source") {
      if (value == "dataset")
        s.use_dataset_splits = true;
      else if (value == "random")
        s.use_dataset_splits = false;
      else
        throw format_error("splits.source must be 'dataset' or 'random'");
    } else if (key == "splits.fractions") {
      auto f = detail::parse_list<double>(value, key);
      if (f.size() != 3)
        throw format_error("splits.fractions needs three values");
      s.split_train = f[0];
      s.split_val = f[1];
      s.split_test = f[2];
    } else if (key == "eval.subset") {
      if (value != "test" && value != "attacked")
        throw format_error("eval.subset must be 'test' or 'attacked'");
      s.eval_subset = value;
    } else if (key == "eval.attacked_file") {
      s.attacked_nodes_file = value;
    } else if (key == "model.hidden") {
      s.hidden_widths = detail::parse_list<int>(value, key);
    } else if (key == "model.hops") {
      s.hops = std::stoi(value);
    } else if (key == "model.share_rmix") {
      s.share_relation_mix = detail::parse_bool(value, key);
    } else if (key == "model.share_w") {
      s.share_feature_mix = detail::parse_bool(value, key);
    } else if (key == "model.normalize") {
      s.normalize_mode = normalize_mode_from_string(value);
    } else if (key == "model.self_loops") {
      s.add_self_loops = detail::parse_bool(value, key);
    } else if (key == "model.dropout") {
      s.dropout_rate = std::stod(value);
    } else if (key == "repeats") {
      s.repeats = std::stoi(value);
    } else if (key == "seed") {
      s.seed_base = std::stoull(value);
    } else if (key == "sweep.key") {
      s.sweep_key = value;
    } else if (key == "sweep.values") {
      s.sweep_values = detail::parse_list<std::string>(value, key);
    } else {
      throw format_error("unknown spec key: " + key);
    }
  }
  if (s.dataset_dir.empty() && !s.synthetic)
    throw format_error("spec needs dataset=DIR or dataset=synthetic");
  if (s.synthetic && !saw_use_dataset_graph) s.use_dataset_graph = false;
  if (s.repeats < 1) throw validation_error("spec: repeats must be >= 1");
  if (s.eval_subset == "attacked" && s.attacked_nodes_file.empty())
    throw format_error("eval.subset=attacked needs eval.attacked_file");
  if (!s.sweep_key.empty() && s.sweep_values.empty())
    throw format_error("sweep.key given without sweep.values");
  return s;
}

inline ExperimentSpec load_experiment_spec(const std::filesystem::path& path) {
  return parse_experiment_spec(io::parse_kv_file(path));
}

struct RepeatResult {
  int repeat = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  int best_epoch = -1;
  std::string stop_reason;
  std::string error;  // nonempty when the repeat aborted
  TrainHistory history;
  ModelParams params;
  ModelConfig model_cfg;
};

/// One end-to-end repeat: assemble data and graph, train, evaluate.
inline RepeatResult run_repeat(const ExperimentSpec& spec, int repeat) {
  RepeatResult res;
  res.repeat = repeat;
  res.seed = spec.seed_base + static_cast<std::uint64_t>(repeat);
  const std::uint64_t seed = res.seed;

  // Data.
  Dataset data;
  std::vector<SparseMatrix> slabs;
  if (spec.synthetic) {
    data = synthetic_gaussian_dataset(spec.synthetic_n, spec.synthetic_f,
                                      Rng::substream(seed, streams::synthetic)
                                          .next_u64());
  } else {
    auto [d, g] = load_dataset(spec.dataset_dir, spec.row_normalize);
    data = std::move(d);
    if (spec.use_dataset_graph)
      for (SparseMatrix& m : g.slabs) slabs.push_back(std::move(m));
  }
  if (spec.identity_features) data.x = DenseMatrix::identity(data.n_nodes());
  const int n = data.n_nodes();

  // Graph assembly.
  if (!spec.graph_load_dir.empty()) {
    TensorGraph extra = load_graph_bundle(spec.graph_load_dir);
    if (extra.n_nodes != n)
      throw structural_error("loaded graph node count differs from dataset");
    for (SparseMatrix& m : extra.slabs) slabs.push_back(std::move(m));
  }
  for (int k : spec.knn_k) slabs.push_back(knn_graph(data.x, k));
  for (double eta : spec.corr_eta)
    slabs.push_back(correlation_graph(data.x, eta));
  if (spec.er_samples > 0) {
    TensorGraph er = er_realizations(
        n, spec.er_p, spec.er_samples,
        Rng::substream(seed, streams::er).next_u64());
    for (SparseMatrix& m : er.slabs) slabs.push_back(std::move(m));
  }
  if (slabs.empty()) throw validation_error("experiment produced no graph slabs");
  if (spec.insert_edges > 0) {
    for (std::size_t i = 0; i < slabs.size(); ++i)
      slabs[i] = perturb_insert_edges(
          slabs[i], spec.insert_edges,
          Rng::substream(Rng::substream(seed, streams::insert).next_u64(), i)
              .next_u64());
  }
  TensorGraph graph(n, std::move(slabs));
  if (spec.dither_samples > 0) {
    if (graph.n_relations() != 1)
      throw validation_error("dithering expects exactly one slab, have " +
                             std::to_string(graph.n_relations()));
    DitherConfig dc;
    dc.q1 = spec.dither_q1;
    dc.q2 = spec.dither_q2;
    dc.n_samples = spec.dither_samples;
    dc.seed = Rng::substream(seed, streams::dither).next_u64();
    graph = edge_dither(graph.slabs[0], dc);
  }
  if (spec.noise_edges_snr > 0.0) {
    NoiseConfig nc;
    nc.snr = spec.noise_edges_snr;
    nc.target = NoiseTarget::edges;
    nc.seed = Rng::substream(seed, streams::noise_edges).next_u64();
    graph = add_noise(graph, nc);
  }
  if (spec.noise_features_snr > 0.0) {
    NoiseConfig nc;
    nc.snr = spec.noise_features_snr;
    nc.target = NoiseTarget::features;
    nc.seed = Rng::substream(seed, streams::noise_features).next_u64();
    data.x = add_noise(data.x, nc);
  }

  // Splits.
  if (!spec.use_dataset_splits) {
    data = make_splits(std::move(data), spec.split_train, spec.split_val,
                       spec.split_test,
                       Rng::substream(seed, streams::splits).next_u64());
  }

  // Model.
  ModelConfig mcfg;
  mcfg.widths = spec.hidden_widths;
  mcfg.widths.push_back(data.n_classes());
  mcfg.n_layers = static_cast<int>(mcfg.widths.size());
  mcfg.hops = spec.hops;
  mcfg.share_relation_mix = spec.share_relation_mix;
  mcfg.share_feature_mix = spec.share_feature_mix;
  mcfg.normalize_mode = spec.normalize_mode;
  mcfg.add_self_loops = spec.add_self_loops;
  mcfg.dropout_rate = spec.dropout_rate;
  res.model_cfg = mcfg;

  TrainConfig tcfg = spec.train_cfg;
  tcfg.seed = seed;
  TrainOutcome outcome = train(data, graph, mcfg, tcfg);
  res.history = outcome.history;
  res.best_epoch = outcome.history.best_epoch;
  res.stop_reason = outcome.history.stop_reason;
  res.params = std::move(outcome.params);

  // Evaluation subset.
  std::vector<int> subset;
  if (spec.eval_subset == "attacked") {
    std::ifstream in(spec.attacked_nodes_file);
    if (!in)
      throw format_error("cannot open " + spec.attacked_nodes_file);
    long id;
    while (in >> id) {
      if (id < 0 || id >= n)
        throw format_error("attacked node id out of range: " +
                           std::to_string(id));
      subset.push_back(static_cast<int>(id));
    }
  } else {
    subset = data.test_nodes();
  }

  PreparedGraph pg = prepare_graph(graph, mcfg);
  DenseMatrix yhat = forward(data.x, pg.prop, res.params, Mode::eval);
  res.accuracy = accuracy(yhat, data.labels, subset);
  res.macro_f1 = macro_f1(yhat, data.labels, subset);
  return res;
}

struct ExperimentReport {
  nlohmann::json json;
  int n_repeats = 0;
  int n_failed = 0;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

}  // namespace detail

/// Execute every sweep point and repeat, sequentially and in order. Failed
/// repeats are recorded, not fatal; the caller decides the exit code from
/// `n_failed`. When `out_dir` is nonempty, per-repeat models and histories
/// are written next to the report.
inline ExperimentReport run_experiment(
    const std::map<std::string, std::string>& spec_kv,
    const std::filesystem::path& out_dir = {}) {
  ExperimentSpec base = parse_experiment_spec(spec_kv);
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  std::vector<std::string> sweep_values = base.sweep_values;
  if (sweep_values.empty()) sweep_values.push_back("");

  ExperimentReport report;
  nlohmann::json points = nlohmann::json::array();
  for (std::size_t p = 0; p < sweep_values.size(); ++p) {
    std::map<std::string, std::string> kv = spec_kv;
    if (!base.sweep_key.empty()) kv[base.sweep_key] = sweep_values[p];
    kv.erase("sweep.key");
    kv.erase("sweep.values");
    ExperimentSpec spec = parse_experiment_spec(kv);

    nlohmann::json repeats = nlohmann::json::array();
    std::vector<double> accs, f1s;
    for (int r = 0; r < spec.repeats; ++r) {
      ++report.n_repeats;
      nlohmann::json jr;
      jr["repeat"] = r;
      jr["seed"] = spec.seed_base + static_cast<std::uint64_t>(r);
      try {
        RepeatResult res = run_repeat(spec, r);
        jr["accuracy"] = res.accuracy;
        jr["macro_f1"] = res.macro_f1;
        jr["best_epoch"] = res.best_epoch;
        jr["stop_reason"] = res.stop_reason;
        jr["epochs_run"] = res.history.epochs.size();
        accs.push_back(res.accuracy);
        f1s.push_back(res.macro_f1);
        if (!out_dir.empty()) {
          const std::string tag =
              "point" + std::to_string(p) + "_repeat" + std::to_string(r);
          save_model(res.params, res.model_cfg, out_dir / (tag + "_model.bin"));
          save_history_csv(res.history, out_dir / (tag + "_history.csv"));
        }
      } catch (const std::exception& e) {
        jr["error"] = e.what();
        ++report.n_failed;
      }
      repeats.push_back(jr);
    }
    auto [acc_mean, acc_std] = detail::mean_std(accs);
    auto [f1_mean, f1_std] = detail::mean_std(f1s);
    nlohmann::json jp;
    jp["value"] = sweep_values[p];
    jp["repeats"] = repeats;
    jp["n_succeeded"] = accs.size();
    if (!accs.empty()) {
      jp["mean_accuracy"] = acc_mean;
      jp["std_accuracy"] = acc_std;
      jp["mean_macro_f1"] = f1_mean;
      jp["std_macro_f1"] = f1_std;
    }
    points.push_back(jp);
  }

  nlohmann::json spec_echo;
  for (const auto& [k, v] : spec_kv) spec_echo[k] = v;
  report.json["spec"] = spec_echo;
  report.json["rng"] = kRngName;
  report.json["sweep_key"] = base.sweep_key;
  report.json["points"] = points;
  return report;
}

// ---------------------------------------------------------------------------
// Gradient verification harness
// ---------------------------------------------------------------------------

struct GradcheckOutcome {
  double max_rel_error = 0.0;
  std::string worst_coordinate;
  long n_checked = 0;
  long n_excluded = 0;
};

/// Desk-scale gradient check: a small random multi-relational problem with
/// every objective term active, analytic gradients compared against central
/// differences over `n_seeds` random draws.
inline GradcheckOutcome gradcheck_tiny(bool share_relation_mix,
                                       bool share_feature_mix, int n_seeds,
                                       double eps) {
  const int n = 12, i_count = 3, f = 3, k_count = 2;
  GradcheckOutcome out;
  for (int s = 0; s < n_seeds; ++s) {
    const std::uint64_t seed = 1000 + static_cast<std::uint64_t>(s);
    TensorGraph g = er_realizations(n, 0.3, i_count, seed);

    ModelConfig mcfg;
    mcfg.n_layers = 2;
    mcfg.hops = 2;
    mcfg.widths = {4, k_count};
    mcfg.share_relation_mix = share_relation_mix;
    mcfg.share_feature_mix = share_feature_mix;
    PreparedGraph pg = prepare_graph(g, mcfg);

    Rng rng = Rng::substream(seed, 99);
    DenseMatrix x(n, f);
    for (double& v : x.v) v = rng.normal();
    DenseMatrix y(n, k_count);
    std::vector<int> labeled;
    for (int node = 0; node < n; node += 2) {
      labeled.push_back(node);
      y.at(node, static_cast<int>(rng.below(k_count))) = 1.0;
    }

    ModelParams params =
        init_params(make_dims(mcfg, n, f, i_count), seed);
    for_each_array(params, [&](const std::string&, std::vector<double>& a) {
      for (double& v : a) v = rng.uniform(-0.7, 0.7);
    });

    TrainConfig tcfg;
    tcfg.mu1 = 0.3;
    tcfg.mu2 = 0.05;
    tcfg.lambda = 0.2;
    FiniteDiffReport rep =
        finite_diff_check(x, pg, y, labeled, params, tcfg, eps);
    if (rep.max_rel_error > out.max_rel_error) {
      out.max_rel_error = rep.max_rel_error;
      out.worst_coordinate = rep.worst_coordinate;
    }
    out.n_checked += rep.n_checked;
    out.n_excluded += static_cast<long>(rep.excluded.size());
  }
  return out;
}

/// Flatten a report into one CSV row per sweep point.
inline std::string report_to_csv(const nlohmann::json& report) {
  std::string out =
      "sweep_key,sweep_value,n_succeeded,mean_accuracy,std_accuracy,"
      "mean_macro_f1,std_macro_f1\n";
  const std::string key = report.at("sweep_key").get<std::string>();
  char buf[256];
  for (const auto& p : report.at("points")) {
    const int n_ok = p.at("n_succeeded").get<int>();
    if (n_ok > 0) {
      std::snprintf(buf, sizeof(buf), "%s,%s,%d,%.17g,%.17g,%.17g,%.17g\n",
                    key.c_str(), p.at("value").get<std::string>().c_str(), n_ok,
                    p.at("mean_accuracy").get<double>(),
                    p.at("std_accuracy").get<double>(),
                    p.at("mean_macro_f1").get<double>(),
                    p.at("std_macro_f1").get<double>());
    } else {
      std::snprintf(buf, sizeof(buf), "%s,%s,0,,,,\n", key.c_str(),
                    p.at("value").get<std::string>().c_str());
    }
    out += buf;
  }
  return out;
}

}  // namespace tgcn
