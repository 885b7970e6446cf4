#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "tgcn/dense.hpp"
#include "tgcn/error.hpp"
#include "tgcn/rng.hpp"

namespace tgcn {

/// Node features, one-hot labels and split masks. Unlabeled nodes carry
/// label -1 and an all-zero row in Y; loss and metrics only ever index
/// labeled nodes inside a mask.
struct Dataset {
  DenseMatrix x;                    // N x F
  DenseMatrix y;                    // N x K, one-hot (zero row = unlabeled)
  std::vector<int> labels;          // per-node class id, -1 when unknown
  std::vector<std::uint8_t> train_mask, val_mask, test_mask;
  std::vector<std::string> names;   // optional node identifiers

  int n_nodes() const { return x.rows; }
  int n_features() const { return x.cols; }
  int n_classes() const { return y.cols; }

  std::vector<int> mask_nodes(const std::vector<std::uint8_t>& mask) const {
    std::vector<int> out;
    for (int n = 0; n < static_cast<int>(mask.size()); ++n)
      if (mask[n]) out.push_back(n);
    return out;
  }
  std::vector<int> train_nodes() const { return mask_nodes(train_mask); }
  std::vector<int> val_nodes() const { return mask_nodes(val_mask); }
  std::vector<int> test_nodes() const { return mask_nodes(test_mask); }

  void set_label(int node, int cls) {
    labels[node] = cls;
    for (int k = 0; k < y.cols; ++k) y.at(node, k) = (k == cls) ? 1.0 : 0.0;
  }
};

inline Dataset make_empty_dataset(int n, int f, int k) {
  Dataset d;
  d.x = DenseMatrix(n, f);
  d.y = DenseMatrix(n, k);
  d.labels.assign(n, -1);
  d.train_mask.assign(n, 0);
  d.val_mask.assign(n, 0);
  d.test_mask.assign(n, 0);
  return d;
}

/// Draw disjoint train/val/test masks of sizes floor(f_train*N) and
/// floor(f_val*N), with every remaining node going to test. Deterministic
/// given the seed.
inline Dataset make_splits(Dataset d, double f_train, double f_val,
                           double f_test, std::uint64_t seed) {
  if (f_train < 0 || f_val < 0 || f_test < 0)
    throw validation_error("split fractions must be nonnegative");
  if (std::fabs(f_train + f_val + f_test - 1.0) > 1e-9)
    throw validation_error("split fractions must sum to 1");
  const int n = d.n_nodes();
  const int n_train = static_cast<int>(std::floor(f_train * n));
  const int n_val = static_cast<int>(std::floor(f_val * n));

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (int i = n - 1; i > 0; --i)
    std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i) + 1)]);

  d.train_mask.assign(n, 0);
  d.val_mask.assign(n, 0);
  d.test_mask.assign(n, 0);
  for (int i = 0; i < n; ++i) {
    if (i < n_train)
      d.train_mask[order[i]] = 1;
    else if (i < n_train + n_val)
      d.val_mask[order[i]] = 1;
    else
      d.test_mask[order[i]] = 1;
  }
  return d;
}

}  // namespace tgcn
