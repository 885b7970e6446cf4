#pragma once

#include <vector>

#include "tgcn/dense.hpp"
#include "tgcn/error.hpp"

namespace tgcn {

/// Predicted class of one prediction row; argmax with ties broken toward the
/// smallest class index.
inline int predicted_class(const DenseMatrix& yhat, int node) {
  const double* row = yhat.row(node);
  int best = 0;
  for (int k = 1; k < yhat.cols; ++k)
    if (row[k] > row[best]) best = k;
  return best;
}

/// Fraction of labeled subset nodes whose argmax prediction matches the
/// label. Unlabeled nodes (label < 0) inside the subset are skipped.
inline double accuracy(const DenseMatrix& yhat, const std::vector<int>& labels,
                       const std::vector<int>& subset) {
  if (subset.empty()) throw validation_error("accuracy: empty subset");
  long correct = 0;
  long counted = 0;
  for (int n : subset) {
    if (labels[n] < 0) continue;
    ++counted;
    if (predicted_class(yhat, n) == labels[n]) ++correct;
  }
  if (counted == 0)
    throw validation_error("accuracy: subset has no labeled nodes");
  return static_cast<double>(correct) / static_cast<double>(counted);
}

/// Unweighted mean of per-class F1 over all K classes. A class absent from
/// both predictions and truth contributes F1 = 0 and is still counted; 0/0
/// precision or recall is treated as 0.
inline double macro_f1(const DenseMatrix& yhat, const std::vector<int>& labels,
                       const std::vector<int>& subset) {
  if (subset.empty()) throw validation_error("macro_f1: empty subset");
  const int k_count = yhat.cols;
  std::vector<long> tp(k_count, 0), fp(k_count, 0), fn(k_count, 0);
  long counted = 0;
  for (int n : subset) {
    if (labels[n] < 0) continue;
    ++counted;
    const int pred = predicted_class(yhat, n);
    const int truth = labels[n];
    if (pred == truth) {
      ++tp[pred];
    } else {
      ++fp[pred];
      ++fn[truth];
    }
  }
  if (counted == 0)
    throw validation_error("macro_f1: subset has no labeled nodes");
  double sum = 0.0;
  for (int k = 0; k < k_count; ++k) {
    const double p =
        tp[k] + fp[k] == 0 ? 0.0 : static_cast<double>(tp[k]) / (tp[k] + fp[k]);
    const double r =
        tp[k] + fn[k] == 0 ? 0.0 : static_cast<double>(tp[k]) / (tp[k] + fn[k]);
    sum += (p + r == 0.0) ? 0.0 : 2.0 * p * r / (p + r);
  }
  return sum / k_count;
}

}  // namespace tgcn
