#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tgcn/dense.hpp"
#include "tgcn/error.hpp"
#include "tgcn/rng.hpp"
#include "tgcn/sparse.hpp"
#include "tgcn/tensor_graph.hpp"

namespace tgcn {

enum class Mode { train, eval };

enum class Activation { relu };

/// Architecture knobs. `widths` lists the per-layer output widths
/// P^(1..L); the final width is the class count K.
struct ModelConfig {
  int n_layers = 1;
  int hops = 1;
  std::vector<int> widths;
  bool share_relation_mix = true;  // one I x I mix shared by all nodes
  bool share_feature_mix = true;   // one feature map per relation
  Activation activation = Activation::relu;
  double dropout_rate = 0.0;       // applied post-activation in train mode
  NormalizeMode normalize_mode = NormalizeMode::symmetric;
  bool add_self_loops = false;

  void validate() const {
    if (n_layers < 1) throw validation_error("model: n_layers must be >= 1");
    if (hops < 1) throw validation_error("model: hops must be >= 1");
    if (static_cast<int>(widths.size()) != n_layers)
      throw validation_error("model: widths must list one width per layer");
    for (int w : widths)
      if (w < 1) throw validation_error("model: widths must be positive");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw validation_error("model: dropout_rate must lie in [0, 1)");
  }
};

/// Fixed array extents for one parameter set; embedded in ModelParams so a
/// parameter blob is self-describing.
struct ModelDims {
  int n_nodes = 0;     // N; only sized into arrays when a share flag is off
  int n_relations = 0; // I
  int input_dim = 0;   // F
  int hops = 0;        // R
  std::vector<int> widths;
  bool share_relation_mix = true;
  bool share_feature_mix = true;

  int n_layers() const { return static_cast<int>(widths.size()); }
  int n_classes() const { return widths.back(); }
  int width_in(int layer) const {
    return layer == 0 ? input_dim : widths[layer - 1];
  }
  int width_out(int layer) const { return widths[layer]; }
  int n_star_r() const { return share_relation_mix ? 1 : n_nodes; }
  int n_star_w() const { return share_feature_mix ? 1 : n_nodes; }

  bool operator==(const ModelDims&) const = default;
};

inline ModelDims make_dims(const ModelConfig& cfg, int n_nodes, int input_dim,
                           int n_relations) {
  cfg.validate();
  ModelDims d;
  d.n_nodes = n_nodes;
  d.n_relations = n_relations;
  d.input_dim = input_dim;
  d.hops = cfg.hops;
  d.widths = cfg.widths;
  d.share_relation_mix = cfg.share_relation_mix;
  d.share_feature_mix = cfg.share_feature_mix;
  return d;
}

/// One neighborhood-aggregation / relation-mix / feature-mix chain.
///   hop_coeff: R x I            [r*I + i]
///   rel_mix:   N* x I x I       [(n*I + i)*I + i']
///   feat_mix:  N* x I x P x P'  [((n*I + i)*P + p)*P' + p']
struct PathParams {
  std::vector<double> hop_coeff;
  std::vector<double> rel_mix;
  std::vector<double> feat_mix;
};

struct LayerParams {
  PathParams z;  // acts on the previous layer's output
  PathParams x;  // residual path, acts on the raw input features
};

struct OutputHead {
  std::vector<double> rel_weights;  // I, collapses relations into logits
  std::vector<double> bias;         // K
};

struct ModelParams {
  ModelDims dims;
  std::vector<LayerParams> layers;
  OutputHead head;
};

/// Visit every parameter array in declaration order. This order defines the
/// gradient coordinate numbering and the serialization layout.
template <class Params, class Fn>
void for_each_array(Params& p, Fn&& fn) {
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string base = "layer" + std::to_string(l);
    fn(base + ".z.hop_coeff", p.layers[l].z.hop_coeff);
    fn(base + ".z.rel_mix", p.layers[l].z.rel_mix);
    fn(base + ".z.feat_mix", p.layers[l].z.feat_mix);
    fn(base + ".x.hop_coeff", p.layers[l].x.hop_coeff);
    fn(base + ".x.rel_mix", p.layers[l].x.rel_mix);
    fn(base + ".x.feat_mix", p.layers[l].x.feat_mix);
  }
  fn("head.rel_weights", p.head.rel_weights);
  fn("head.bias", p.head.bias);
}

inline std::size_t parameter_count(const ModelParams& p) {
  std::size_t n = 0;
  for_each_array(p, [&](const std::string&, const std::vector<double>& a) {
    n += a.size();
  });
  return n;
}

inline ModelParams zeros_like(const ModelParams& p) {
  ModelParams out;
  out.dims = p.dims;
  out.layers.resize(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    out.layers[l].z.hop_coeff.assign(p.layers[l].z.hop_coeff.size(), 0.0);
    out.layers[l].z.rel_mix.assign(p.layers[l].z.rel_mix.size(), 0.0);
    out.layers[l].z.feat_mix.assign(p.layers[l].z.feat_mix.size(), 0.0);
    out.layers[l].x.hop_coeff.assign(p.layers[l].x.hop_coeff.size(), 0.0);
    out.layers[l].x.rel_mix.assign(p.layers[l].x.rel_mix.size(), 0.0);
    out.layers[l].x.feat_mix.assign(p.layers[l].x.feat_mix.size(), 0.0);
  }
  out.head.rel_weights.assign(p.head.rel_weights.size(), 0.0);
  out.head.bias.assign(p.head.bias.size(), 0.0);
  return out;
}

namespace detail {

inline PathParams init_path(const ModelDims& dims, int p_in, int p_out,
                            Rng& rng) {
  const int i_count = dims.n_relations;
  const int r_count = dims.hops;
  PathParams path;
  path.hop_coeff.assign(static_cast<std::size_t>(r_count) * i_count,
                        1.0 / r_count);
  path.rel_mix.assign(
      static_cast<std::size_t>(dims.n_star_r()) * i_count * i_count, 0.0);
  for (int n = 0; n < dims.n_star_r(); ++n)
    for (int i = 0; i < i_count; ++i)
      path.rel_mix[(static_cast<std::size_t>(n) * i_count + i) * i_count + i] =
          1.0;
  const double a = std::sqrt(6.0 / (p_in + p_out));
  path.feat_mix.resize(static_cast<std::size_t>(dims.n_star_w()) * i_count *
                       p_out * p_in);
  for (double& w : path.feat_mix) w = rng.uniform(-a, a);
  return path;
}

}  // namespace detail

/// Default initialization: hop coefficients 1/R, relation mix = identity,
/// feature maps Glorot-uniform, head weights 1/I with zero bias. The initial
/// network therefore behaves like an average-over-relations diffusion with
/// bounded activations.
inline ModelParams init_params(const ModelDims& dims, std::uint64_t seed) {
  ModelParams p;
  p.dims = dims;
  p.layers.resize(dims.n_layers());
  for (int l = 0; l < dims.n_layers(); ++l) {
    Rng rng_z = Rng::substream(seed, 2 * static_cast<std::uint64_t>(l));
    Rng rng_x = Rng::substream(seed, 2 * static_cast<std::uint64_t>(l) + 1);
    p.layers[l].z =
        detail::init_path(dims, dims.width_in(l), dims.width_out(l), rng_z);
    p.layers[l].x =
        detail::init_path(dims, dims.input_dim, dims.width_out(l), rng_x);
  }
  p.head.rel_weights.assign(dims.n_relations, 1.0 / dims.n_relations);
  p.head.bias.assign(dims.n_classes(), 0.0);
  return p;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// N x I x P activation block, stored as one N x P matrix per relation.
struct ActivationTensor {
  std::vector<DenseMatrix> slabs;

  ActivationTensor() = default;
  ActivationTensor(int n_relations, int n_nodes, int width)
      : slabs(n_relations, DenseMatrix(n_nodes, width)) {}

  int n_relations() const { return static_cast<int>(slabs.size()); }
  int n_nodes() const { return slabs.empty() ? 0 : slabs[0].rows; }
  int width() const { return slabs.empty() ? 0 : slabs[0].cols; }

  double& at(int i, int n, int p) { return slabs[i].at(n, p); }
  double at(int i, int n, int p) const { return slabs[i].at(n, p); }

  void resize(int n_relations, int n_nodes, int width) {
    if (this->n_relations() == n_relations && this->n_nodes() == n_nodes &&
        this->width() == width)
      return;
    slabs.assign(n_relations, DenseMatrix(n_nodes, width));
  }
  void zero() {
    for (DenseMatrix& s : slabs) s.fill(0.0);
  }
};

/// Replicate the feature matrix into every relation slab.
inline ActivationTensor input_layer(const DenseMatrix& x, int n_relations) {
  if (n_relations < 1) throw validation_error("input_layer: need >= 1 relation");
  ActivationTensor t;
  t.slabs.assign(n_relations, x);
  return t;
}

// ---------------------------------------------------------------------------
// The three linear modules
// ---------------------------------------------------------------------------

/// Hop products S_i^(r+1) * zin_i for r = 0..R-1, built by repeated
/// application of the base matrix (cheaper than applying materialized powers
/// when the graph squares densify; the values agree up to roundoff).
inline void hop_products(const ActivationTensor& zin, const PropagationSet& prop,
                         std::vector<DenseMatrix>& products) {
  const int i_count = prop.n_relations();
  const int r_count = prop.hops();
  if (zin.n_relations() != i_count)
    throw structural_error("hop products: relation count mismatch");
  products.resize(static_cast<std::size_t>(i_count) * r_count);
  for (int i = 0; i < i_count; ++i) {
    prop.power(i, 0).apply(zin.slabs[i], products[i * r_count]);
    for (int r = 1; r < r_count; ++r)
      prop.power(i, 0).apply(products[i * r_count + r - 1],
                             products[i * r_count + r]);
  }
}

/// out_i = sum_r hop_coeff[r,i] * products[i,r].
inline void combine_hops(const std::vector<DenseMatrix>& products, int i_count,
                         int r_count, std::span<const double> hop_coeff,
                         ActivationTensor& out) {
  if (hop_coeff.size() != static_cast<std::size_t>(i_count) * r_count)
    throw structural_error("hop combine: coefficient shape mismatch");
  const int n = products[0].rows;
  const int p = products[0].cols;
  out.resize(i_count, n, p);
  for (int i = 0; i < i_count; ++i) {
    DenseMatrix& o = out.slabs[i];
    o.fill(0.0);
    for (int r = 0; r < r_count; ++r) {
      const double c = hop_coeff[static_cast<std::size_t>(r) * i_count + i];
      if (c == 0.0) continue;
      const DenseMatrix& u = products[static_cast<std::size_t>(i) * r_count + r];
      for (std::size_t k = 0; k < o.v.size(); ++k) o.v[k] += c * u.v[k];
    }
  }
}

/// Neighborhood aggregation: per relation, a learnable combination of the
/// 1..R hop diffusions of the input slab.
inline ActivationTensor aggregate_neighborhood(const ActivationTensor& zin,
                                               const PropagationSet& prop,
                                               std::span<const double> hop_coeff) {
  std::vector<DenseMatrix> products;
  hop_products(zin, prop, products);
  ActivationTensor out;
  combine_hops(products, prop.n_relations(), prop.hops(), hop_coeff, out);
  return out;
}

/// dC[r,i] += <products[i,r], dh_i>; optionally dzin_i += sum_r C[r,i] *
/// (S_i^(r+1))^T dh_i, evaluated as a Horner chain of transposed base applies.
inline void aggregate_neighborhood_backward(
    const std::vector<DenseMatrix>& products, const PropagationSet& prop,
    std::span<const double> hop_coeff, const ActivationTensor& dh,
    std::span<double> dhop_coeff, ActivationTensor* dzin,
    DenseMatrix& scratch_a, DenseMatrix& scratch_b) {
  const int i_count = prop.n_relations();
  const int r_count = prop.hops();
  for (int i = 0; i < i_count; ++i) {
    const DenseMatrix& d = dh.slabs[i];
    for (int r = 0; r < r_count; ++r) {
      const DenseMatrix& u = products[static_cast<std::size_t>(i) * r_count + r];
      double acc = 0.0;
      for (std::size_t k = 0; k < d.v.size(); ++k) acc += u.v[k] * d.v[k];
      dhop_coeff[static_cast<std::size_t>(r) * i_count + i] += acc;
    }
    if (dzin != nullptr) {
      // Horner: S^T (c_0 d + S^T (c_1 d + ... )).
      DenseMatrix& acc = scratch_a;
      acc = d;
      const double c_last =
          hop_coeff[static_cast<std::size_t>(r_count - 1) * i_count + i];
      for (double& vv : acc.v) vv *= c_last;
      for (int r = r_count - 2; r >= 0; --r) {
        prop.power(i, 0).apply_transpose(acc, scratch_b);
        const double c = hop_coeff[static_cast<std::size_t>(r) * i_count + i];
        acc = scratch_b;
        for (std::size_t k = 0; k < acc.v.size(); ++k)
          acc.v[k] += c * d.v[k];
      }
      prop.power(i, 0).apply_transpose(acc, scratch_b);
      DenseMatrix& o = dzin->slabs[i];
      for (std::size_t k = 0; k < o.v.size(); ++k) o.v[k] += scratch_b.v[k];
    }
  }
}

/// Relation mixing: out(i,n,:) = sum_i' rel_mix(i,i',n*) h(i',n,:).
inline void mix_relations(const ActivationTensor& h,
                          std::span<const double> rel_mix, bool shared,
                          ActivationTensor& out) {
  const int i_count = h.n_relations();
  const int n = h.n_nodes();
  const int p = h.width();
  const std::size_t expect =
      static_cast<std::size_t>(shared ? 1 : n) * i_count * i_count;
  if (rel_mix.size() != expect)
    throw structural_error("relation mix: coefficient shape mismatch");
  out.resize(i_count, n, p);
  for (int i = 0; i < i_count; ++i) {
    DenseMatrix& o = out.slabs[i];
    o.fill(0.0);
    for (int i2 = 0; i2 < i_count; ++i2) {
      const DenseMatrix& src = h.slabs[i2];
      if (shared) {
        const double c = rel_mix[static_cast<std::size_t>(i) * i_count + i2];
        if (c == 0.0) continue;
        for (std::size_t k = 0; k < o.v.size(); ++k) o.v[k] += c * src.v[k];
      } else {
        for (int node = 0; node < n; ++node) {
          const double c =
              rel_mix[(static_cast<std::size_t>(node) * i_count + i) * i_count +
                      i2];
          if (c == 0.0) continue;
          double* orow = o.row(node);
          const double* srow = src.row(node);
          for (int j = 0; j < p; ++j) orow[j] += c * srow[j];
        }
      }
    }
  }
}

inline ActivationTensor mix_relations(const ActivationTensor& h,
                                      std::span<const double> rel_mix,
                                      bool shared) {
  ActivationTensor out;
  mix_relations(h, rel_mix, shared, out);
  return out;
}

/// dh(i',n,:) += sum_i R(i,i',n*) dg(i,n,:)
/// dR(i,i',n*) += sum_p dg(i,n,p) h(i',n,p), summed over nodes when shared.
inline void mix_relations_backward(const ActivationTensor& h,
                                   std::span<const double> rel_mix, bool shared,
                                   const ActivationTensor& dg,
                                   ActivationTensor& dh,
                                   std::span<double> drel_mix) {
  const int i_count = h.n_relations();
  const int n = h.n_nodes();
  const int p = h.width();
  dh.resize(i_count, n, p);
  dh.zero();
  for (int i = 0; i < i_count; ++i) {
    const DenseMatrix& d = dg.slabs[i];
    for (int i2 = 0; i2 < i_count; ++i2) {
      const DenseMatrix& src = h.slabs[i2];
      DenseMatrix& dst = dh.slabs[i2];
      if (shared) {
        const std::size_t idx = static_cast<std::size_t>(i) * i_count + i2;
        const double c = rel_mix[idx];
        double acc = 0.0;
        for (std::size_t k = 0; k < d.v.size(); ++k) {
          acc += d.v[k] * src.v[k];
          dst.v[k] += c * d.v[k];
        }
        drel_mix[idx] += acc;
      } else {
        for (int node = 0; node < n; ++node) {
          const std::size_t idx =
              (static_cast<std::size_t>(node) * i_count + i) * i_count + i2;
          const double c = rel_mix[idx];
          const double* drow = d.row(node);
          const double* srow = src.row(node);
          double* dstrow = dst.row(node);
          double acc = 0.0;
          for (int j = 0; j < p; ++j) {
            acc += drow[j] * srow[j];
            dstrow[j] += c * drow[j];
          }
          drel_mix[idx] += acc;
        }
      }
    }
  }
}

/// Feature mixing: out(i,n,p) = sum_p' W(n*,i,p,p') g(i,n,p').
/// With `accumulate`, adds into `out` instead of overwriting.
inline void mix_features(const ActivationTensor& g,
                         std::span<const double> feat_mix, bool shared,
                         int width_out, ActivationTensor& out,
                         bool accumulate = false) {
  const int i_count = g.n_relations();
  const int n = g.n_nodes();
  const int p_in = g.width();
  const std::size_t expect = static_cast<std::size_t>(shared ? 1 : n) *
                             i_count * width_out * p_in;
  if (feat_mix.size() != expect)
    throw structural_error("feature mix: weight shape mismatch");
  if (!accumulate) {
    out.resize(i_count, n, width_out);
    out.zero();
  } else if (out.n_relations() != i_count || out.n_nodes() != n ||
             out.width() != width_out) {
    throw structural_error("feature mix: accumulate target shape mismatch");
  }
  for (int i = 0; i < i_count; ++i) {
    const DenseMatrix& src = g.slabs[i];
    DenseMatrix& o = out.slabs[i];
    for (int node = 0; node < n; ++node) {
      const int nn = shared ? 0 : node;
      const double* w = feat_mix.data() +
                        ((static_cast<std::size_t>(nn) * i_count + i) *
                         width_out) *
                            p_in;
      const double* grow = src.row(node);
      double* orow = o.row(node);
      for (int p = 0; p < width_out; ++p) {
        const double* wp = w + static_cast<std::size_t>(p) * p_in;
        double acc = 0.0;
        for (int j = 0; j < p_in; ++j) acc += wp[j] * grow[j];
        orow[p] += acc;
      }
    }
  }
}

inline ActivationTensor mix_features(const ActivationTensor& g,
                                     std::span<const double> feat_mix,
                                     bool shared, int width_out) {
  ActivationTensor out;
  mix_features(g, feat_mix, shared, width_out, out);
  return out;
}

/// dg(i,n,p') += sum_p W(n*,i,p,p') dz(i,n,p)
/// dW(n*,i,p,p') += dz(i,n,p) g(i,n,p'), summed over nodes when shared.
inline void mix_features_backward(const ActivationTensor& g,
                                  std::span<const double> feat_mix, bool shared,
                                  const ActivationTensor& dz,
                                  ActivationTensor& dg,
                                  std::span<double> dfeat_mix) {
  const int i_count = g.n_relations();
  const int n = g.n_nodes();
  const int p_in = g.width();
  const int p_out = dz.width();
  dg.resize(i_count, n, p_in);
  dg.zero();
  for (int i = 0; i < i_count; ++i) {
    const DenseMatrix& src = g.slabs[i];
    const DenseMatrix& d = dz.slabs[i];
    DenseMatrix& dgs = dg.slabs[i];
    for (int node = 0; node < n; ++node) {
      const int nn = shared ? 0 : node;
      const std::size_t base =
          ((static_cast<std::size_t>(nn) * i_count + i) * p_out) * p_in;
      const double* grow = src.row(node);
      const double* drow = d.row(node);
      double* dgrow = dgs.row(node);
      for (int p = 0; p < p_out; ++p) {
        const double dv = drow[p];
        const double* wp = feat_mix.data() + base + static_cast<std::size_t>(p) * p_in;
        double* dwp = dfeat_mix.data() + base + static_cast<std::size_t>(p) * p_in;
        for (int j = 0; j < p_in; ++j) {
          dgrow[j] += wp[j] * dv;
          dwp[j] += dv * grow[j];
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Layers and full network
// ---------------------------------------------------------------------------

inline void relu_inplace(ActivationTensor& t) {
  for (DenseMatrix& s : t.slabs)
    for (double& v : s.v)
      if (v < 0.0) v = 0.0;
}

/// Inverted dropout; eval mode applies no scaling.
inline void dropout_inplace(ActivationTensor& t, double rate, Rng& rng) {
  const double keep = 1.0 - rate;
  for (DenseMatrix& s : t.slabs)
    for (double& v : s.v) v = (rng.uniform() < keep) ? v / keep : 0.0;
}

/// One residual layer: ReLU( fgn(zprev; theta_z) + fgn(X broadcast; theta_x) )
/// where fgn is feature-mix o relation-mix o neighborhood-aggregation.
inline ActivationTensor layer_forward(const ActivationTensor& zprev,
                                      const DenseMatrix& x,
                                      const LayerParams& lp,
                                      const PropagationSet& prop,
                                      const ModelDims& dims, int layer,
                                      Mode mode = Mode::eval,
                                      double dropout_rate = 0.0,
                                      Rng* rng = nullptr) {
  if (zprev.width() != dims.width_in(layer))
    throw structural_error("layer_forward: input width mismatch");
  if (x.cols != dims.input_dim)
    throw structural_error("layer_forward: feature width mismatch");
  const int p_out = dims.width_out(layer);

  ActivationTensor h = aggregate_neighborhood(zprev, prop, lp.z.hop_coeff);
  ActivationTensor g = mix_relations(h, lp.z.rel_mix, dims.share_relation_mix);
  ActivationTensor pre;
  mix_features(g, lp.z.feat_mix, dims.share_feature_mix, p_out, pre);

  ActivationTensor xb = input_layer(x, dims.n_relations);
  ActivationTensor hx = aggregate_neighborhood(xb, prop, lp.x.hop_coeff);
  ActivationTensor gx = mix_relations(hx, lp.x.rel_mix, dims.share_relation_mix);
  mix_features(gx, lp.x.feat_mix, dims.share_feature_mix, p_out, pre,
               /*accumulate=*/true);

  relu_inplace(pre);
  if (mode == Mode::train && dropout_rate > 0.0) {
    if (rng == nullptr)
      throw validation_error("layer_forward: dropout requires an RNG");
    dropout_inplace(pre, dropout_rate, *rng);
  }
  return pre;
}

inline DenseMatrix head_logits(const ActivationTensor& zl,
                               const OutputHead& head) {
  const int n = zl.n_nodes();
  const int k_count = zl.width();
  if (static_cast<int>(head.rel_weights.size()) != zl.n_relations())
    throw structural_error("output head: relation weight count mismatch");
  if (static_cast<int>(head.bias.size()) != k_count)
    throw structural_error("output head: bias width mismatch");
  DenseMatrix logits(n, k_count);
  for (int node = 0; node < n; ++node) {
    double* row = logits.row(node);
    for (int k = 0; k < k_count; ++k) row[k] = head.bias[k];
  }
  for (int i = 0; i < zl.n_relations(); ++i) {
    const double a = head.rel_weights[i];
    const DenseMatrix& s = zl.slabs[i];
    for (std::size_t k = 0; k < logits.v.size(); ++k)
      logits.v[k] += a * s.v[k];
  }
  return logits;
}

/// Row-wise softmax, max-shifted for stability.
inline DenseMatrix softmax_rows(const DenseMatrix& logits) {
  DenseMatrix out = logits;
  for (int r = 0; r < out.rows; ++r) {
    double* row = out.row(r);
    double m = row[0];
    for (int c = 1; c < out.cols; ++c) m = std::max(m, row[c]);
    double sum = 0.0;
    for (int c = 0; c < out.cols; ++c) {
      row[c] = std::exp(row[c] - m);
      sum += row[c];
    }
    for (int c = 0; c < out.cols; ++c) row[c] /= sum;
  }
  return out;
}

/// Collapse relations with learnable weights, add bias, softmax per node.
inline DenseMatrix output_head(const ActivationTensor& zl,
                               const OutputHead& head) {
  DenseMatrix logits = head_logits(zl, head);
  if (!all_finite(logits)) throw numeric_error("output head: non-finite logits");
  return softmax_rows(logits);
}

/// Normalized (optionally self-looped) propagation powers plus the raw
/// tensor, prepared once and shared by forward passes and training.
struct PreparedGraph {
  TensorGraph raw;
  PropagationSet prop;
};

inline PreparedGraph prepare_graph(TensorGraph g, const ModelConfig& cfg) {
  cfg.validate();
  PreparedGraph pg;
  pg.raw = g;
  std::vector<SparseMatrix> slabs;
  slabs.reserve(g.slabs.size());
  for (const SparseMatrix& s : g.slabs) {
    SparseMatrix m = s;
    if (cfg.add_self_loops) {
      std::vector<Edge> es = m.to_edges();
      for (int i = 0; i < m.n_rows(); ++i) es.push_back({i, i, 1.0});
      m = SparseMatrix::from_edges(std::move(es), m.n_rows(), m.n_cols());
    }
    slabs.push_back(m.normalized(cfg.normalize_mode));
  }
  pg.prop = PropagationSet(TensorGraph(g.n_nodes, std::move(slabs)), cfg.hops);
  return pg;
}

// ---------------------------------------------------------------------------
// Traced forward pass and reverse sweep
// ---------------------------------------------------------------------------

/// Reusable buffers. `hops_x` caches S_i^(r+1) X, which every layer's
/// residual path (and the first layer's main path) consumes; it depends only
/// on the graph and features, so it is built once per training problem.
struct Workspace {
  std::vector<DenseMatrix> hops_x;  // I*R products of the input features
  ActivationTensor h_buf, g_buf, dg_buf, dh_buf;
  DenseMatrix scratch_a, scratch_b;
  int hops = 0;

  void prepare(const DenseMatrix& x, const PropagationSet& prop) {
    const int i_count = prop.n_relations();
    const int r_count = prop.hops();
    hops = r_count;
    hops_x.resize(static_cast<std::size_t>(i_count) * r_count);
    for (int i = 0; i < i_count; ++i) {
      prop.power(i, 0).apply(x, hops_x[static_cast<std::size_t>(i) * r_count]);
      for (int r = 1; r < r_count; ++r)
        prop.power(i, 0).apply(hops_x[static_cast<std::size_t>(i) * r_count + r - 1],
                               hops_x[static_cast<std::size_t>(i) * r_count + r]);
    }
  }
};

struct LayerTrace {
  std::vector<DenseMatrix> prods_z;  // empty at layer 0 (shares hops_x)
  ActivationTensor h_z, g_z;         // empty at layer 0 (recomputed)
  ActivationTensor pre;              // pre-activation, kept for the ReLU mask
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
  ActivationTensor z_last;  // post-activation output of the final layer
  DenseMatrix logits;
  DenseMatrix yhat;
};

/// Full forward pass, recording what the reverse sweep needs. The residual
/// path's intermediates are recomputed during the sweep from `ws.hops_x`
/// instead of being stored, which keeps the trace small when F is large.
inline void forward_trace(const DenseMatrix& x, const PropagationSet& prop,
                          const ModelParams& params, Mode mode,
                          double dropout_rate, Rng* dropout_rng, Workspace& ws,
                          ForwardTrace& tr) {
  const ModelDims& dims = params.dims;
  if (x.cols != dims.input_dim)
    throw structural_error("forward: feature width mismatch");
  if (x.rows != prop.n_nodes())
    throw structural_error("forward: node count mismatch");
  if (prop.n_relations() != dims.n_relations)
    throw structural_error("forward: relation count mismatch");
  if (prop.hops() != dims.hops)
    throw structural_error("forward: hop count mismatch");
  if (ws.hops_x.empty() || ws.hops != dims.hops) ws.prepare(x, prop);

  const int l_count = dims.n_layers();
  const bool shared_r = dims.share_relation_mix;
  const bool shared_w = dims.share_feature_mix;
  tr.layers.resize(l_count);
  ActivationTensor cur;

  for (int l = 0; l < l_count; ++l) {
    LayerTrace& lt = tr.layers[l];
    const LayerParams& lp = params.layers[l];
    const int p_out = dims.width_out(l);

    // Main path.
    if (l == 0) {
      combine_hops(ws.hops_x, dims.n_relations, dims.hops, lp.z.hop_coeff,
                   ws.h_buf);
      mix_relations(ws.h_buf, lp.z.rel_mix, shared_r, ws.g_buf);
      mix_features(ws.g_buf, lp.z.feat_mix, shared_w, p_out, lt.pre);
    } else {
      hop_products(cur, prop, lt.prods_z);
      combine_hops(lt.prods_z, dims.n_relations, dims.hops, lp.z.hop_coeff,
                   lt.h_z);
      mix_relations(lt.h_z, lp.z.rel_mix, shared_r, lt.g_z);
      mix_features(lt.g_z, lp.z.feat_mix, shared_w, p_out, lt.pre);
    }

    // Residual path from the raw features.
    combine_hops(ws.hops_x, dims.n_relations, dims.hops, lp.x.hop_coeff,
                 ws.h_buf);
    mix_relations(ws.h_buf, lp.x.rel_mix, shared_r, ws.g_buf);
    mix_features(ws.g_buf, lp.x.feat_mix, shared_w, p_out, lt.pre,
                 /*accumulate=*/true);

    cur = lt.pre;
    relu_inplace(cur);
    if (mode == Mode::train && dropout_rate > 0.0) {
      if (dropout_rng == nullptr)
        throw validation_error("forward: dropout requires an RNG");
      dropout_inplace(cur, dropout_rate, *dropout_rng);
    }
  }
  tr.z_last = std::move(cur);
  tr.logits = head_logits(tr.z_last, params.head);
  if (!all_finite(tr.logits))
    throw numeric_error("forward: non-finite logits");
  tr.yhat = softmax_rows(tr.logits);
}

/// Inference entry point.
inline DenseMatrix forward(const DenseMatrix& x, const PropagationSet& prop,
                           const ModelParams& params, Mode mode = Mode::eval,
                           double dropout_rate = 0.0, Rng* dropout_rng = nullptr) {
  Workspace ws;
  ForwardTrace tr;
  forward_trace(x, prop, params, mode, dropout_rate, dropout_rng, ws, tr);
  return tr.yhat;
}

/// Convenience overload that prepares the graph on the fly.
inline DenseMatrix forward(const DenseMatrix& x, const TensorGraph& g,
                           const ModelParams& params, const ModelConfig& cfg,
                           Mode mode = Mode::eval, Rng* dropout_rng = nullptr) {
  PreparedGraph pg = prepare_graph(g, cfg);
  return forward(x, pg.prop, params, mode, cfg.dropout_rate, dropout_rng);
}

/// Reverse sweep from d(loss)/d(logits). Accumulates into `grads`, which must
/// be zeros_like(params) or already hold other gradient contributions.
/// The forward must have run without dropout.
inline void backward_from_dlogits(const DenseMatrix& x,
                                  const PropagationSet& prop,
                                  const ModelParams& params,
                                  const ForwardTrace& tr,
                                  const DenseMatrix& dlogits, Workspace& ws,
                                  ModelParams& grads) {
  const ModelDims& dims = params.dims;
  const int l_count = dims.n_layers();
  const int i_count = dims.n_relations;
  const bool shared_r = dims.share_relation_mix;
  const bool shared_w = dims.share_feature_mix;

  // Output head.
  for (int i = 0; i < i_count; ++i) {
    const DenseMatrix& s = tr.z_last.slabs[i];
    double acc = 0.0;
    for (std::size_t k = 0; k < s.v.size(); ++k) acc += dlogits.v[k] * s.v[k];
    grads.head.rel_weights[i] += acc;
  }
  for (int node = 0; node < dlogits.rows; ++node) {
    const double* row = dlogits.row(node);
    for (int k = 0; k < dlogits.cols; ++k) grads.head.bias[k] += row[k];
  }
  ActivationTensor dout(i_count, dlogits.rows, dlogits.cols);
  for (int i = 0; i < i_count; ++i) {
    const double a = params.head.rel_weights[i];
    DenseMatrix& d = dout.slabs[i];
    for (std::size_t k = 0; k < d.v.size(); ++k) d.v[k] = a * dlogits.v[k];
  }

  ActivationTensor dzin;
  for (int l = l_count - 1; l >= 0; --l) {
    const LayerTrace& lt = tr.layers[l];
    const LayerParams& lp = params.layers[l];
    LayerParams& gl = grads.layers[l];

    // ReLU mask; derivative at exactly zero is zero.
    ActivationTensor dpre = dout;
    for (int i = 0; i < i_count; ++i) {
      const DenseMatrix& pre = lt.pre.slabs[i];
      DenseMatrix& d = dpre.slabs[i];
      for (std::size_t k = 0; k < d.v.size(); ++k)
        if (pre.v[k] <= 0.0) d.v[k] = 0.0;
    }

    // Residual path (recomputed intermediates; no input gradient needed).
    combine_hops(ws.hops_x, i_count, dims.hops, lp.x.hop_coeff, ws.h_buf);
    mix_relations(ws.h_buf, lp.x.rel_mix, shared_r, ws.g_buf);
    mix_features_backward(ws.g_buf, lp.x.feat_mix, shared_w, dpre, ws.dg_buf,
                          gl.x.feat_mix);
    mix_relations_backward(ws.h_buf, lp.x.rel_mix, shared_r, ws.dg_buf,
                           ws.dh_buf, gl.x.rel_mix);
    aggregate_neighborhood_backward(ws.hops_x, prop, lp.x.hop_coeff, ws.dh_buf,
                                    gl.x.hop_coeff, nullptr, ws.scratch_a,
                                    ws.scratch_b);

    // Main path.
    if (l == 0) {
      combine_hops(ws.hops_x, i_count, dims.hops, lp.z.hop_coeff, ws.h_buf);
      mix_relations(ws.h_buf, lp.z.rel_mix, shared_r, ws.g_buf);
      mix_features_backward(ws.g_buf, lp.z.feat_mix, shared_w, dpre, ws.dg_buf,
                            gl.z.feat_mix);
      mix_relations_backward(ws.h_buf, lp.z.rel_mix, shared_r, ws.dg_buf,
                             ws.dh_buf, gl.z.rel_mix);
      aggregate_neighborhood_backward(ws.hops_x, prop, lp.z.hop_coeff,
                                      ws.dh_buf, gl.z.hop_coeff, nullptr,
                                      ws.scratch_a, ws.scratch_b);
    } else {
      mix_features_backward(lt.g_z, lp.z.feat_mix, shared_w, dpre, ws.dg_buf,
                            gl.z.feat_mix);
      mix_relations_backward(lt.h_z, lp.z.rel_mix, shared_r, ws.dg_buf,
                             ws.dh_buf, gl.z.rel_mix);
      dzin.resize(i_count, dims.n_nodes, dims.width_in(l));
      dzin.zero();
      aggregate_neighborhood_backward(lt.prods_z, prop, lp.z.hop_coeff,
                                      ws.dh_buf, gl.z.hop_coeff, &dzin,
                                      ws.scratch_a, ws.scratch_b);
      dout = std::move(dzin);
    }
  }
}

}  // namespace tgcn
