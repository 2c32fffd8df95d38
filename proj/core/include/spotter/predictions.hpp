#pragma once

#include <vector>

#include "spotter/diff/tensor.hpp"

namespace spotter {

/// Class order of the classification branch.
enum ClassIndex : int { kTextClass = 0, kBackgroundClass = 1, kNoTextClass = 2, kNumClasses = 3 };

/// Differentiable per-query outputs of the three heads.
template <typename T>
struct QueryOutputs {
  diff::Tensor<T> class_logits;  // [N, 3]
  diff::Tensor<T> mask_logits;   // [N, h, w], pre-sigmoid
  diff::Tensor<T> rec_logits;    // [N, K, C]
};

/// Value snapshot of QueryOutputs used by matching and post-processing.
struct RawPredictions {
  int queries = 0;
  int mask_height = 0;
  int mask_width = 0;
  int char_slots = 0;
  int classes = 0;
  std::vector<double> class_probs;  // [N, 3], softmaxed
  std::vector<double> mask_logits;  // [N, h, w]
  std::vector<double> rec_logits;   // [N, K, C]

  const double* class_row(int q) const { return class_probs.data() + static_cast<std::size_t>(q) * kNumClasses; }
  const double* mask_of(int q) const {
    return mask_logits.data() + static_cast<std::size_t>(q) * mask_height * mask_width;
  }
  const double* rec_of(int q) const { return rec_logits.data() + static_cast<std::size_t>(q) * char_slots * classes; }
};

template <typename T>
RawPredictions snapshot(const QueryOutputs<T>& outputs);

}  // namespace spotter
