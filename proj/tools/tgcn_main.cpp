// Command-line harness: training runs from spec files, model evaluation,
// graph construction, gradient checks and report conversion.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tgcn/tgcn.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

tgcn::DenseMatrix load_features_auto(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw tgcn::format_error("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    if (tgcn::io::trim(line).empty()) continue;
    std::istringstream ss(line);
    std::vector<double> row;
    double v;
    while (ss >> v) row.push_back(v);
    if (!rows.empty() && row.size() != rows.front().size())
      throw tgcn::format_error(path.string() + ": ragged feature rows");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw tgcn::format_error(path.string() + ": no rows");
  tgcn::DenseMatrix x(static_cast<int>(rows.size()),
                      static_cast<int>(rows.front().size()));
  for (int r = 0; r < x.rows; ++r)
    for (int c = 0; c < x.cols; ++c) x.at(r, c) = rows[r][c];
  return x;
}

int cmd_train(const std::string& spec_path, const std::string& out_dir,
              const std::string& report_path, const std::string& csv_path) {
  auto kv = tgcn::io::parse_kv_file(spec_path);
  tgcn::ExperimentReport report = tgcn::run_experiment(kv, out_dir);
  const std::string text = report.json.dump(2);
  if (!report_path.empty()) {
    std::ofstream out(report_path);
    if (!out) throw tgcn::format_error("cannot write " + report_path);
    out << text << "\n";
  } else {
    std::cout << text << "\n";
  }
  if (!csv_path.empty()) {
    std::ofstream out(csv_path);
    if (!out) throw tgcn::format_error("cannot write " + csv_path);
    out << tgcn::report_to_csv(report.json);
  }
  std::fprintf(stderr, "repeats: %d total, %d failed\n", report.n_repeats,
               report.n_failed);
  if (report.n_failed == report.n_repeats) return kExitValidation;
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& dataset_dir,
             bool row_normalize, bool all_labeled) {
  tgcn::SavedModel m = tgcn::load_model(model_path);
  auto [data, graph] = tgcn::load_dataset(dataset_dir, row_normalize);
  if (graph.n_relations() != m.params.dims.n_relations)
    throw tgcn::validation_error(
        "model expects " + std::to_string(m.params.dims.n_relations) +
        " relations, dataset has " + std::to_string(graph.n_relations()));
  if (data.n_features() != m.params.dims.input_dim)
    throw tgcn::validation_error(
        "model expects input_dim " + std::to_string(m.params.dims.input_dim) +
        ", dataset has " + std::to_string(data.n_features()));
  tgcn::PreparedGraph pg = tgcn::prepare_graph(graph, m.cfg);
  tgcn::DenseMatrix yhat =
      tgcn::forward(data.x, pg.prop, m.params, tgcn::Mode::eval);

  std::vector<int> subset;
  if (all_labeled) {
    for (int n = 0; n < data.n_nodes(); ++n)
      if (data.labels[n] >= 0) subset.push_back(n);
  } else {
    subset = data.test_nodes();
    if (subset.empty())
      throw tgcn::validation_error(
          "dataset has no test split; use --all-labeled");
  }
  std::printf("nodes_evaluated=%zu\n", subset.size());
  std::printf("accuracy=%.6f\n", tgcn::accuracy(yhat, data.labels, subset));
  std::printf("macro_f1=%.6f\n", tgcn::macro_f1(yhat, data.labels, subset));
  return 0;
}

int cmd_build_graph(const std::string& method, const std::string& out_dir,
                    const std::string& features_path,
                    const std::string& dataset_dir,
                    const std::string& graph_dir, std::vector<int> knn_k,
                    std::vector<double> corr_eta, double q1, double q2,
                    int samples, int nodes, double er_p, std::uint64_t seed) {
  using P = std::pair<std::string, std::string>;
  std::vector<P> prov = {{"builder", method},
                         {"builder.seed", std::to_string(seed)}};
  auto features = [&]() {
    if (!features_path.empty()) return load_features_auto(features_path);
    if (!dataset_dir.empty()) return tgcn::load_dataset(dataset_dir).first.x;
    throw tgcn::validation_error(method + " needs --features or --dataset");
  };

  tgcn::TensorGraph out(1, {tgcn::SparseMatrix(1, 1)});
  if (method == "knn") {
    if (knn_k.empty()) throw tgcn::validation_error("knn needs --k");
    tgcn::DenseMatrix x = features();
    std::vector<tgcn::SparseMatrix> slabs;
    for (int k : knn_k) {
      slabs.push_back(tgcn::knn_graph(x, k));
      prov.push_back({"builder.k" + std::to_string(slabs.size() - 1),
                      std::to_string(k)});
    }
    out = tgcn::TensorGraph(x.rows, std::move(slabs));
  } else if (method == "corr") {
    if (corr_eta.empty()) throw tgcn::validation_error("corr needs --eta");
    tgcn::DenseMatrix x = features();
    std::vector<tgcn::SparseMatrix> slabs;
    for (double eta : corr_eta) {
      slabs.push_back(tgcn::correlation_graph(x, eta));
      prov.push_back({"builder.eta" + std::to_string(slabs.size() - 1),
                      std::to_string(eta)});
    }
    out = tgcn::TensorGraph(x.rows, std::move(slabs));
  } else if (method == "dither") {
    if (graph_dir.empty()) throw tgcn::validation_error("dither needs --graph");
    tgcn::TensorGraph in_graph = tgcn::load_graph_bundle(graph_dir);
    if (in_graph.n_relations() != 1)
      throw tgcn::validation_error("dither input must have exactly one slab");
    tgcn::DitherConfig cfg{q1, q2, samples, seed};
    out = tgcn::edge_dither(in_graph.slabs[0], cfg);
    prov.push_back({"builder.q1", std::to_string(q1)});
    prov.push_back({"builder.q2", std::to_string(q2)});
    prov.push_back({"builder.samples", std::to_string(samples)});
  } else if (method == "er") {
    if (nodes < 1) throw tgcn::validation_error("er needs --nodes");
    out = tgcn::er_realizations(nodes, er_p, samples, seed);
    prov.push_back({"builder.p", std::to_string(er_p)});
    prov.push_back({"builder.samples", std::to_string(samples)});
  } else {
    throw tgcn::validation_error("unknown method: " + method);
  }
  tgcn::save_graph_bundle(out, out_dir, prov);
  std::printf("wrote %d relation(s) over %d nodes to %s\n", out.n_relations(),
              out.n_nodes, out_dir.c_str());
  return 0;
}

int cmd_gradcheck(const std::string& size, int seeds, double eps) {
  if (size != "tiny") throw tgcn::validation_error("only --size tiny is supported");
  bool ok = true;
  for (const bool share : {true, false}) {
    tgcn::GradcheckOutcome res = tgcn::gradcheck_tiny(share, share, seeds, eps);
    std::printf(
        "sharing=%s  max_rel_error=%.3e  checked=%ld  excluded=%ld  worst=%s\n",
        share ? "on" : "off", res.max_rel_error, res.n_checked, res.n_excluded,
        res.worst_coordinate.c_str());
    ok = ok && res.max_rel_error < 1e-4;
  }
  if (!ok) {
    std::fprintf(stderr, "gradient check FAILED\n");
    return kExitNumeric;
  }
  std::printf("gradient check passed\n");
  return 0;
}

int cmd_report(const std::string& in_path, const std::string& csv_path) {
  std::ifstream in(in_path);
  if (!in) throw tgcn::format_error("cannot open " + in_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw tgcn::format_error(in_path + ": " + e.what());
  }
  const std::string csv = tgcn::report_to_csv(j);
  if (csv_path.empty()) {
    std::cout << csv;
  } else {
    std::ofstream out(csv_path);
    if (!out) throw tgcn::format_error("cannot write " + csv_path);
    out << csv;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tensor-graph convolutional networks for semi-supervised node "
               "classification"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "run a training experiment spec");
  std::string spec_path, out_dir, report_path, csv_path;
  train->add_option("--spec", spec_path, "experiment spec file")->required();
  train->add_option("--out", out_dir, "directory for models and histories");
  train->add_option("--report", report_path, "write the JSON report here");
  train->add_option("--csv", csv_path, "write the sweep CSV here");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a saved model");
  std::string model_path, dataset_dir;
  bool row_normalize = false, all_labeled = false;
  eval->add_option("--model", model_path, "model container")->required();
  eval->add_option("--dataset", dataset_dir, "dataset bundle")->required();
  eval->add_flag("--row-normalize", row_normalize, "L1-normalize feature rows");
  eval->add_flag("--all-labeled", all_labeled,
                 "evaluate every labeled node instead of the test split");

  // build-graph
  auto* build = app.add_subcommand("build-graph", "construct a graph bundle");
  std::string method, features_path, graph_dir, build_out;
  std::vector<int> knn_k;
  std::vector<double> corr_eta;
  double q1 = 0.9, q2 = 1.0, er_p = 0.1;
  int samples = 10, nodes = 0;
  std::uint64_t seed = 0;
  std::string build_dataset;
  build->add_option("--method", method, "knn|corr|dither|er")->required();
  build->add_option("--out", build_out, "output bundle directory")->required();
  build->add_option("--features", features_path, "feature matrix file");
  build->add_option("--dataset", build_dataset, "dataset bundle for features");
  build->add_option("--graph", graph_dir, "input graph bundle (dither)");
  build->add_option("--k", knn_k, "neighbor counts, one slab each");
  build->add_option("--eta", corr_eta, "correlation thresholds, one slab each");
  build->add_option("--q1", q1, "edge retention probability");
  build->add_option("--q2", q2, "non-edge retention probability");
  build->add_option("--samples", samples, "number of slabs to draw");
  build->add_option("--nodes", nodes, "node count (er)");
  build->add_option("--p", er_p, "edge probability (er)");
  build->add_option("--seed", seed, "rng seed");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check");
  std::string size = "tiny";
  int gc_seeds = 20;
  double gc_eps = 1e-5;
  gradcheck->add_option("--size", size, "problem size (tiny)");
  gradcheck->add_option("--seeds", gc_seeds, "number of random draws");
  gradcheck->add_option("--eps", gc_eps, "central difference step");

  // report
  auto* report = app.add_subcommand("report", "convert a JSON report to CSV");
  std::string report_in, report_csv;
  report->add_option("--in", report_in, "JSON report")->required();
  report->add_option("--csv", report_csv, "CSV output (stdout if omitted)");

  try {
    app.parse(argc, argv);
    if (train->parsed())
      return cmd_train(spec_path, out_dir, report_path, csv_path);
    if (eval->parsed())
      return cmd_eval(model_path, dataset_dir, row_normalize, all_labeled);
    if (build->parsed())
      return cmd_build_graph(method, build_out, features_path, build_dataset,
                             graph_dir, knn_k, corr_eta, q1, q2, samples,
                             nodes, er_p, seed);
    if (gradcheck->parsed()) return cmd_gradcheck(size, gc_seeds, gc_eps);
    if (report->parsed()) return cmd_report(report_in, report_csv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  } catch (const tgcn::validation_error& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return kExitValidation;
  } catch (const tgcn::structural_error& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return kExitValidation;
  } catch (const tgcn::numeric_error& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kExitNumeric;
  } catch (const tgcn::format_error& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return kExitIo;
  }
  return 0;
}
