#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tgcn/dataset.hpp"
#include "tgcn/model.hpp"
#include "tgcn/rng.hpp"
#include "tgcn/tensor_graph.hpp"
#include "tgcn/training.hpp"

namespace tgcn {

namespace io {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

/// key=value lines; '#' starts a comment; later keys win.
inline std::map<std::string, std::string> parse_kv(std::istream& in,
                                                   const std::string& origin) {
  std::map<std::string, std::string> kv;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw format_error(origin + ":" + std::to_string(line_no) +
                         ": expected key=value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline std::map<std::string, std::string> parse_kv_file(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw format_error("cannot open " + path.string());
  return parse_kv(in, path.filename().string());
}

inline long kv_long(const std::map<std::string, std::string>& kv,
                    const std::string& key, const std::string& origin) {
  auto it = kv.find(key);
  if (it == kv.end())
    throw format_error(origin + ": missing required key '" + key + "'");
  try {
    return std::stol(it->second);
  } catch (const std::exception&) {
    throw format_error(origin + ": key '" + key + "' is not an integer");
  }
}

}  // namespace io

// ---------------------------------------------------------------------------
// Graph bundles
// ---------------------------------------------------------------------------

/// One edge per line: `src dst [weight]`, 0-based ids, '#' comments.
inline SparseMatrix load_edge_list(const std::filesystem::path& path,
                                   int n_nodes) {
  std::ifstream in(path);
  if (!in) throw format_error("cannot open " + path.string());
  std::vector<Edge> edges;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = io::trim(line);
    if (line.empty()) continue;
    std::istringstream ss(line);
    long src = -1, dst = -1;
    double w = 1.0;
    if (!(ss >> src >> dst))
      throw format_error(path.filename().string() + ":" +
                         std::to_string(line_no) + ": malformed edge line");
    ss >> w;  // optional weight
    std::string rest;
    if (ss >> rest)
      throw format_error(path.filename().string() + ":" +
                         std::to_string(line_no) + ": trailing tokens");
    if (src < 0 || src >= n_nodes || dst < 0 || dst >= n_nodes)
      throw format_error(path.filename().string() + ":" +
                         std::to_string(line_no) + ": node id out of range");
    edges.push_back({static_cast<int>(src), static_cast<int>(dst), w});
  }
  return SparseMatrix::from_edges(std::move(edges), n_nodes, n_nodes);
}

inline void write_edge_list(const SparseMatrix& m,
                            const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw format_error("cannot write " + path.string());
  char buf[96];
  m.for_each_entry([&](int r, int c, double w) {
    if (w == 1.0)
      std::snprintf(buf, sizeof(buf), "%d %d\n", r, c);
    else
      std::snprintf(buf, sizeof(buf), "%d %d %.17g\n", r, c, w);
    out << buf;
  });
}

/// Directory of per-relation edge lists plus a key=value manifest. Extra
/// manifest keys (builder provenance) are preserved but ignored on load.
inline TensorGraph load_graph_bundle(const std::filesystem::path& dir) {
  auto kv = io::parse_kv_file(dir / "manifest.txt");
  const int n = static_cast<int>(io::kv_long(kv, "nodes", "manifest.txt"));
  const int i_count =
      static_cast<int>(io::kv_long(kv, "relations", "manifest.txt"));
  if (io::kv_long(kv, "format_version", "manifest.txt") != 1)
    throw format_error("manifest.txt: unsupported format_version");
  std::vector<SparseMatrix> slabs;
  for (int i = 0; i < i_count; ++i)
    slabs.push_back(
        load_edge_list(dir / ("relation_" + std::to_string(i) + ".edges"), n));
  return TensorGraph(n, std::move(slabs));
}

inline void save_graph_bundle(
    const TensorGraph& g, const std::filesystem::path& dir,
    const std::vector<std::pair<std::string, std::string>>& provenance = {}) {
  std::filesystem::create_directories(dir);
  std::ofstream mf(dir / "manifest.txt");
  if (!mf) throw format_error("cannot write manifest in " + dir.string());
  mf << "format_version=1\n";
  mf << "nodes=" << g.n_nodes << "\n";
  mf << "relations=" << g.n_relations() << "\n";
  mf << "rng=" << kRngName << "\n";
  for (const auto& [k, v] : provenance) mf << k << "=" << v << "\n";
  for (int i = 0; i < g.n_relations(); ++i)
    write_edge_list(g.slabs[i], dir / ("relation_" + std::to_string(i) + ".edges"));
}

// ---------------------------------------------------------------------------
// Dataset bundles
// ---------------------------------------------------------------------------

namespace io {

inline DenseMatrix load_features(const std::filesystem::path& path, int n,
                                 int f) {
  std::ifstream in(path);
  if (!in) throw format_error("cannot open " + path.string());
  DenseMatrix x(n, f);
  std::string line;
  int line_no = 0;
  int row = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    if (trim(line).empty()) continue;
    if (row >= n)
      throw format_error(path.filename().string() + ":" +
                         std::to_string(line_no) +
                         ": more feature rows than manifest nodes");
    const char* p = line.c_str();
    char* end = nullptr;
    for (int j = 0; j < f; ++j) {
      const double v = std::strtod(p, &end);
      if (end == p)
        throw format_error(path.filename().string() + ":" +
                           std::to_string(line_no) + ": expected " +
                           std::to_string(f) + " values");
      x.at(row, j) = v;
      p = end;
    }
    while (*p == ' ' || *p == '\t' || *p == '\r') ++p;
    if (*p != '\0')
      throw format_error(path.filename().string() + ":" +
                         std::to_string(line_no) + ": trailing tokens");
    ++row;
  }
  if (row != n)
    throw format_error(path.filename().string() + ": expected " +
                       std::to_string(n) + " feature rows, found " +
                       std::to_string(row));
  return x;
}

inline void load_labels(const std::filesystem::path& path, Dataset& d) {
  std::ifstream in(path);
  if (!in) throw format_error("cannot open " + path.string());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    std::istringstream ss(line);
    long node = -1, cls = -1;
    if (!(ss >> node >> cls))
      throw format_error(path.filename().string() + ":" +
                         std::to_string(line_no) + ": malformed label line");
    if (node < 0 || node >= d.n_nodes())
      throw format_error(path.filename().string() + ":" +
                         std::to_string(line_no) + ": node id out of range");
    if (cls < 0 || cls >= d.n_classes())
      throw format_error(path.filename().string() + ":" +
                         std::to_string(line_no) + ": class id out of range");
    d.set_label(static_cast<int>(node), static_cast<int>(cls));
  }
}

inline std::vector<int> parse_id_line(const std::string& line, int n_nodes,
                                      const std::string& origin, int line_no) {
  std::vector<int> out;
  std::istringstream ss(line);
  long id;
  while (ss >> id) {
    if (id < 0 || id >= n_nodes)
      throw format_error(origin + ":" + std::to_string(line_no) +
                         ": node id out of range");
    out.push_back(static_cast<int>(id));
  }
  return out;
}

/// Three lines of node ids: train, validation, test.
inline void load_splits(const std::filesystem::path& path, Dataset& d) {
  std::ifstream in(path);
  if (!in) throw format_error("cannot open " + path.string());
  std::string line;
  std::vector<std::vector<int>> groups;
  int line_no = 0;
  while (std::getline(in, line) && groups.size() < 3) {
    ++line_no;
    groups.push_back(
        parse_id_line(line, d.n_nodes(), path.filename().string(), line_no));
  }
  if (groups.size() != 3)
    throw format_error(path.filename().string() +
                       ": expected three lines (train/val/test)");
  d.train_mask.assign(d.n_nodes(), 0);
  d.val_mask.assign(d.n_nodes(), 0);
  d.test_mask.assign(d.n_nodes(), 0);
  for (int n : groups[0]) d.train_mask[n] = 1;
  for (int n : groups[1]) d.val_mask[n] = 1;
  for (int n : groups[2]) {
    if (d.train_mask[n] || d.val_mask[n])
      throw format_error(path.filename().string() + ": overlapping splits");
    d.test_mask[n] = 1;
  }
  for (int n : groups[0])
    if (d.val_mask[n])
      throw format_error(path.filename().string() + ": overlapping splits");
}

}  // namespace io

/// L1 row normalization of the feature matrix; zero rows stay zero.
inline void row_normalize_features(DenseMatrix& x) {
  for (int r = 0; r < x.rows; ++r) {
    double s = 0.0;
    double* row = x.row(r);
    for (int c = 0; c < x.cols; ++c) s += std::fabs(row[c]);
    if (s == 0.0) continue;
    for (int c = 0; c < x.cols; ++c) row[c] /= s;
  }
}

/// Load a dataset bundle: manifest.txt, features.txt, labels.txt, optional
/// splits.txt, and per-relation edge lists.
inline std::pair<Dataset, TensorGraph> load_dataset(
    const std::filesystem::path& dir, bool row_normalize = false) {
  auto kv = io::parse_kv_file(dir / "manifest.txt");
  const int n = static_cast<int>(io::kv_long(kv, "nodes", "manifest.txt"));
  const int i_count =
      static_cast<int>(io::kv_long(kv, "relations", "manifest.txt"));
  const int f = static_cast<int>(io::kv_long(kv, "features", "manifest.txt"));
  const int k = static_cast<int>(io::kv_long(kv, "classes", "manifest.txt"));
  if (io::kv_long(kv, "format_version", "manifest.txt") != 1)
    throw format_error("manifest.txt: unsupported format_version");
  if (n < 1 || i_count < 1 || f < 1 || k < 1)
    throw format_error("manifest.txt: dimensions must be positive");

  Dataset d = make_empty_dataset(n, f, k);
  d.x = io::load_features(dir / "features.txt", n, f);
  if (row_normalize) row_normalize_features(d.x);
  io::load_labels(dir / "labels.txt", d);
  if (std::filesystem::exists(dir / "splits.txt"))
    io::load_splits(dir / "splits.txt", d);

  std::vector<SparseMatrix> slabs;
  for (int i = 0; i < i_count; ++i)
    slabs.push_back(
        load_edge_list(dir / ("relation_" + std::to_string(i) + ".edges"), n));
  return {std::move(d), TensorGraph(n, std::move(slabs))};
}

/// Write a dataset bundle in the native layout; the inverse of load_dataset.
inline void save_dataset_bundle(const Dataset& d, const TensorGraph& g,
                                const std::filesystem::path& dir) {
  if (g.n_nodes != d.n_nodes())
    throw structural_error("dataset and graph node counts differ");
  std::filesystem::create_directories(dir);
  std::ofstream mf(dir / "manifest.txt");
  if (!mf) throw format_error("cannot write manifest in " + dir.string());
  mf << "format_version=1\n";
  mf << "nodes=" << d.n_nodes() << "\n";
  mf << "relations=" << g.n_relations() << "\n";
  mf << "features=" << d.n_features() << "\n";
  mf << "classes=" << d.n_classes() << "\n";

  std::ofstream ff(dir / "features.txt");
  char buf[64];
  for (int n = 0; n < d.n_nodes(); ++n) {
    for (int j = 0; j < d.n_features(); ++j) {
      std::snprintf(buf, sizeof(buf), j == 0 ? "%.17g" : " %.17g",
                    d.x.at(n, j));
      ff << buf;
    }
    ff << "\n";
  }

  std::ofstream lf(dir / "labels.txt");
  for (int n = 0; n < d.n_nodes(); ++n)
    if (d.labels[n] >= 0) lf << n << " " << d.labels[n] << "\n";

  bool any_mask = false;
  for (int n = 0; n < d.n_nodes(); ++n)
    any_mask = any_mask || d.train_mask[n] || d.val_mask[n] || d.test_mask[n];
  if (any_mask) {
    std::ofstream sf(dir / "splits.txt");
    auto write_ids = [&](const std::vector<std::uint8_t>& mask) {
      bool first = true;
      for (int n = 0; n < d.n_nodes(); ++n)
        if (mask[n]) {
          if (!first) sf << " ";
          sf << n;
          first = false;
        }
      sf << "\n";
    };
    write_ids(d.train_mask);
    write_ids(d.val_mask);
    write_ids(d.test_mask);
  }

  for (int i = 0; i < g.n_relations(); ++i)
    write_edge_list(g.slabs[i], dir / ("relation_" + std::to_string(i) + ".edges"));
}

// ---------------------------------------------------------------------------
// Model container
// ---------------------------------------------------------------------------

namespace io {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& s, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[pos + i]))
         << (8 * i);
  return v;
}

inline double get_f64(const std::string& s, std::size_t pos) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i)
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[pos + i]))
            << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace io

struct SavedModel {
  ModelConfig cfg;
  ModelParams params;
};

/// Binary container: "TGCN" magic, little-endian header length, a JSON header
/// describing dimensions and flags, then all parameter arrays as
/// little-endian 64-bit floats in declaration order.
inline void save_model(const ModelParams& params, const ModelConfig& cfg,
                       const std::filesystem::path& path) {
  nlohmann::json header;
  header["container_version"] = 1;
  header["n_nodes"] = params.dims.n_nodes;
  header["n_relations"] = params.dims.n_relations;
  header["input_dim"] = params.dims.input_dim;
  header["hops"] = params.dims.hops;
  header["widths"] = params.dims.widths;
  header["share_relation_mix"] = params.dims.share_relation_mix;
  header["share_feature_mix"] = params.dims.share_feature_mix;
  header["normalize_mode"] = to_string(cfg.normalize_mode);
  header["dropout_rate"] = cfg.dropout_rate;
  header["add_self_loops"] = cfg.add_self_loops;
  nlohmann::json arrays = nlohmann::json::array();
  for_each_array(params,
                 [&](const std::string& name, const std::vector<double>& a) {
                   arrays.push_back({{"name", name}, {"len", a.size()}});
                 });
  header["arrays"] = arrays;
  const std::string header_text = header.dump();

  std::string blob = "TGCN";
  io::put_u32(blob, static_cast<std::uint32_t>(header_text.size()));
  blob += header_text;
  for_each_array(params,
                 [&](const std::string&, const std::vector<double>& a) {
                   for (double v : a) io::put_f64(blob, v);
                 });

  std::ofstream out(path, std::ios::binary);
  if (!out) throw format_error("cannot write " + path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

inline SavedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw format_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string blob = ss.str();
  if (blob.size() < 8 || blob.substr(0, 4) != "TGCN")
    throw format_error(path.filename().string() + ": bad magic");
  const std::uint32_t header_len = io::get_u32(blob, 4);
  if (blob.size() < 8 + static_cast<std::size_t>(header_len))
    throw format_error(path.filename().string() + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.substr(8, header_len));
  } catch (const nlohmann::json::exception&) {
    throw format_error(path.filename().string() + ": corrupt header");
  }
  SavedModel m;
  try {
    if (header.at("container_version").get<int>() != 1)
      throw format_error(path.filename().string() +
                         ": unsupported container_version");
    m.params.dims.n_nodes = header.at("n_nodes").get<int>();
    m.params.dims.n_relations = header.at("n_relations").get<int>();
    m.params.dims.input_dim = header.at("input_dim").get<int>();
    m.params.dims.hops = header.at("hops").get<int>();
    m.params.dims.widths = header.at("widths").get<std::vector<int>>();
    m.params.dims.share_relation_mix =
        header.at("share_relation_mix").get<bool>();
    m.params.dims.share_feature_mix =
        header.at("share_feature_mix").get<bool>();
    m.cfg.n_layers = m.params.dims.n_layers();
    m.cfg.hops = m.params.dims.hops;
    m.cfg.widths = m.params.dims.widths;
    m.cfg.share_relation_mix = m.params.dims.share_relation_mix;
    m.cfg.share_feature_mix = m.params.dims.share_feature_mix;
    m.cfg.normalize_mode =
        normalize_mode_from_string(header.at("normalize_mode").get<std::string>());
    m.cfg.dropout_rate = header.at("dropout_rate").get<double>();
    m.cfg.add_self_loops = header.at("add_self_loops").get<bool>();
  } catch (const nlohmann::json::exception&) {
    throw format_error(path.filename().string() + ": corrupt header");
  }

  // Rebuild the array skeleton from the recorded dimensions and check every
  // extent against the header's declared arrays.
  ModelParams skeleton = init_params(m.params.dims, 0);
  m.params.layers = skeleton.layers;
  m.params.head = skeleton.head;
  std::vector<std::pair<std::string, std::size_t>> expect;
  for_each_array(m.params,
                 [&](const std::string& name, const std::vector<double>& a) {
                   expect.push_back({name, a.size()});
                 });
  const auto& arrays = header.at("arrays");
  if (arrays.size() != expect.size())
    throw format_error(path.filename().string() +
                       ": array count does not match n_layers");
  for (std::size_t i = 0; i < expect.size(); ++i) {
    const std::string name = arrays[i].at("name").get<std::string>();
    const std::size_t len = arrays[i].at("len").get<std::size_t>();
    if (name != expect[i].first)
      throw format_error(path.filename().string() + ": unexpected array '" +
                         name + "' (want '" + expect[i].first + "')");
    if (len != expect[i].second)
      throw format_error(path.filename().string() + ": array '" + name +
                         "' has length " + std::to_string(len) + ", expected " +
                         std::to_string(expect[i].second));
  }

  std::size_t pos = 8 + header_len;
  std::size_t total = 0;
  for (const auto& [name, len] : expect) total += len;
  if (blob.size() != pos + 8 * total)
    throw format_error(path.filename().string() + ": truncated payload");
  for_each_array(m.params, [&](const std::string&, std::vector<double>& a) {
    for (double& v : a) {
      v = io::get_f64(blob, pos);
      pos += 8;
    }
  });
  return m;
}

// ---------------------------------------------------------------------------
// Histories and train configs
// ---------------------------------------------------------------------------

inline void save_history_csv(const TrainHistory& h,
                             const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw format_error("cannot write " + path.string());
  out << "epoch,train_loss,val_loss,val_acc\n";
  char buf[160];
  for (const EpochRecord& e : h.epochs) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", e.epoch,
                  e.train_loss, e.val_loss, e.val_acc);
    out << buf;
  }
}

inline TrainConfig train_config_from_kv(
    const std::map<std::string, std::string>& kv, const std::string& prefix) {
  TrainConfig cfg;
  auto get = [&](const std::string& key, auto& field) {
    auto it = kv.find(prefix + key);
    if (it == kv.end()) return;
    std::istringstream ss(it->second);
    ss >> field;
    if (ss.fail())
      throw format_error("bad value for " + prefix + key + ": " + it->second);
  };
  get("mu1", cfg.mu1);
  get("mu2", cfg.mu2);
  get("lambda", cfg.lambda);
  get("learning_rate", cfg.learning_rate);
  get("max_epochs", cfg.max_epochs);
  get("patience", cfg.patience);
  get("seed", cfg.seed);
  get("adam_beta1", cfg.adam_beta1);
  get("adam_beta2", cfg.adam_beta2);
  get("adam_eps", cfg.adam_eps);
  cfg.validate();
  return cfg;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  return train_config_from_kv(io::parse_kv_file(path), "");
}

}  // namespace tgcn
