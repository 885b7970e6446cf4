// Drives the installed command-line binary end to end: graph construction,
// spec-file training, evaluation of a saved model, report conversion, and
// the documented exit codes.

#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tgcn/data_io.hpp"
#include "tgcn/graph_builders.hpp"

using namespace tgcn;
namespace fs = std::filesystem;

#ifndef TGCN_CLI_PATH
#error "TGCN_CLI_PATH must point at the tgcn binary"
#endif

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("tgcn_cli_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

int run_cli(const std::string& args, const fs::path& stdout_file = {}) {
  std::string cmd = std::string(TGCN_CLI_PATH) + " " + args;
  if (!stdout_file.empty()) cmd += " > " + stdout_file.string();
  cmd += " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("cli builds graph bundles with provenance") {
  TempDir tmp;
  const fs::path er_dir = tmp.path / "er";
  REQUIRE(run_cli("build-graph --method er --nodes 24 --p 0.2 --samples 1 "
                  "--seed 3 --out " +
                  er_dir.string()) == 0);
  TensorGraph g = load_graph_bundle(er_dir);
  REQUIRE(g.n_nodes == 24);
  REQUIRE(g.n_relations() == 1);
  REQUIRE(slurp(er_dir / "manifest.txt").find("builder=er") !=
          std::string::npos);

  const fs::path ed_dir = tmp.path / "dithered";
  REQUIRE(run_cli("build-graph --method dither --graph " + er_dir.string() +
                  " --q1 0.9 --q2 1.0 --samples 5 --seed 4 --out " +
                  ed_dir.string()) == 0);
  TensorGraph ed = load_graph_bundle(ed_dir);
  REQUIRE(ed.n_relations() == 5);
}

TEST_CASE("cli knn bundle from a features file") {
  TempDir tmp;
  std::ofstream f(tmp.path / "feats.txt");
  f << "0 0\n0.1 0\n5 5\n5.1 5\n";
  f.close();
  const fs::path out = tmp.path / "knn";
  REQUIRE(run_cli("build-graph --method knn --features " +
                  (tmp.path / "feats.txt").string() + " --k 1 --out " +
                  out.string()) == 0);
  TensorGraph g = load_graph_bundle(out);
  REQUIRE(g.slabs[0].value_at(0, 1) == 1.0);
  REQUIRE(g.slabs[0].value_at(2, 3) == 1.0);
  REQUIRE(g.slabs[0].value_at(0, 2) == 0.0);
}

TEST_CASE("cli trains from a spec, evaluates the saved model, converts reports") {
  TempDir tmp;

  // A small on-disk dataset bundle.
  Dataset d = synthetic_gaussian_dataset(80, 4, 9);
  d = make_splits(std::move(d), 0.4, 0.2, 0.4, 10);
  TensorGraph g = TensorGraph::single(knn_graph(d.x, 3));
  const fs::path data_dir = tmp.path / "data";
  save_dataset_bundle(d, g, data_dir);

  std::ofstream spec(tmp.path / "run.spec");
  spec << "dataset=" << data_dir.string() << "\n"
       << "splits.source=dataset\n"
       << "model.hidden=4\n"
       << "model.hops=2\n"
       << "train.max_epochs=30\n"
       << "train.patience=30\n"
       << "repeats=2\n"
       << "seed=5\n";
  spec.close();

  const fs::path out_dir = tmp.path / "out";
  const fs::path report = tmp.path / "report.json";
  REQUIRE(run_cli("train --spec " + (tmp.path / "run.spec").string() +
                  " --out " + out_dir.string() + " --report " +
                  report.string()) == 0);
  REQUIRE(fs::exists(out_dir / "point0_repeat0_model.bin"));
  REQUIRE(fs::exists(out_dir / "point0_repeat0_history.csv"));

  const fs::path eval_out = tmp.path / "eval.txt";
  REQUIRE(run_cli("eval --model " +
                      (out_dir / "point0_repeat0_model.bin").string() +
                      " --dataset " + data_dir.string(),
                  eval_out) == 0);
  const std::string eval_text = slurp(eval_out);
  REQUIRE(eval_text.find("accuracy=") != std::string::npos);
  REQUIRE(eval_text.find("macro_f1=") != std::string::npos);

  const fs::path csv = tmp.path / "report.csv";
  REQUIRE(run_cli("report --in " + report.string() + " --csv " +
                  csv.string()) == 0);
  REQUIRE(slurp(csv).find("mean_accuracy") != std::string::npos);
}

TEST_CASE("cli exit codes follow the documented mapping") {
  TempDir tmp;
  // Missing spec file -> io error (4).
  REQUIRE(run_cli("train --spec " + (tmp.path / "nope.spec").string()) == 4);
  // Bad builder parameters -> validation error (2).
  REQUIRE(run_cli("build-graph --method er --p 0.2 --out " +
                  (tmp.path / "x").string()) == 2);
  // Unknown spec key -> io/format error (4).
  std::ofstream spec(tmp.path / "bad.spec");
  spec << "dataset=synthetic\nbogus.key=1\n";
  spec.close();
  REQUIRE(run_cli("train --spec " + (tmp.path / "bad.spec").string()) == 4);
}
