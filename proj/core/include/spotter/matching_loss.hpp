#pragma once

// Bipartite matching between ground-truth text instances and queries, and the
// set-prediction loss with its text-only and weak-supervision variants.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "spotter/predictions.hpp"
#include "spotter/synthdata.hpp"

namespace spotter {

struct LossWeights {
  double lambda_mask = 5.0;
  double lambda_rec = 1.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  /// Excludes [PAD] positions from the recognition loss (off by default).
  bool rec_ignore_pad = false;

  /// Throws std::invalid_argument for negative or non-finite weights.
  void validate() const;
};

/// One real (non-"no text") ground-truth instance.
struct TargetInstance {
  std::vector<std::uint8_t> mask;  // [mask_height, mask_width]; empty unless Full
  std::vector<int> text;           // exactly char_slots indices, [PAD]-padded
};

/// Real targets for one image. The remaining num_queries - size() slots are
/// implicitly "no text".
struct TargetSet {
  synth::SampleKind kind = synth::SampleKind::kFull;
  int num_queries = 0;
  int mask_height = 0;
  int mask_width = 0;
  int char_slots = 0;
  std::vector<TargetInstance> instances;

  int size() const { return static_cast<int>(instances.size()); }
  /// Throws std::invalid_argument when the set violates its invariants.
  void validate() const;
};

/// Downsamples a full-resolution mask by an integer factor. A cell is set when
/// at least half of its pixels are; if that leaves the mask empty, any
/// covered cell is set instead so small instances never vanish.
std::vector<std::uint8_t> downsample_mask(std::span<const std::uint8_t> mask, int height, int width, int factor);

/// Builds targets from a labelled sample. Masks are downsampled to
/// mask_height x mask_width; transcriptions are encoded and padded to
/// char_slots.
TargetSet build_targets(const synth::SceneSample& sample, const synth::Charset& charset, int num_queries,
                        int char_slots, int mask_height, int mask_width);

/// Mean over positions of the softmax probability of the target index.
double recognition_cost(std::span<const int> target_text, const double* logits, int char_slots, int classes);
/// Dice loss plus mean binary cross-entropy of sigmoid(logits) against target.
double mask_cost(std::span<const std::uint8_t> target, std::span<const double> logits);
/// Probability of the text class.
double classification_cost(const double* probs);

/// Plain-value dice and focal losses on probabilities (used for matching and
/// as reference values).
double dice_loss_value(std::span<const double> probs, std::span<const std::uint8_t> target);
double focal_loss_value(std::span<const double> probs, std::span<const std::uint8_t> target, double alpha,
                        double gamma);

struct CostMatrix {
  int rows = 0;  // real targets
  int cols = 0;  // queries
  std::vector<double> costs;

  double at(int r, int c) const { return costs[static_cast<std::size_t>(r) * cols + c]; }
  double& at(int r, int c) { return costs[static_cast<std::size_t>(r) * cols + c]; }
};

/// Full: mask_cost - recognition_cost - classification_cost.
/// Text-only / weak: -recognition_cost - classification_cost.
CostMatrix cost_matrix(const TargetSet& targets, const RawPredictions& preds);

/// sigma[target] = query; injective.
struct Assignment {
  std::vector<int> sigma;

  bool operator==(const Assignment&) const = default;
};

/// Minimum-cost injective assignment of rows to columns (rows <= cols),
/// ties broken toward the lexicographically smallest sigma. Throws
/// std::invalid_argument for non-finite entries or rows > cols.
Assignment hungarian(const CostMatrix& costs);

/// Sum of the assigned costs.
double assignment_cost(const CostMatrix& costs, const Assignment& assignment);

/// Differentiable dice loss, 1 - (2 sum p g + 1) / (sum p + sum g + 1), for
/// one raster of probabilities (any shape).
template <typename T>
diff::Tensor<T> dice_loss(const diff::Tensor<T>& probs, std::span<const std::uint8_t> target);

/// Differentiable focal loss averaged over pixels; probabilities are clamped
/// to [1e-7, 1 - 1e-7].
template <typename T>
diff::Tensor<T> focal_loss(const diff::Tensor<T>& probs, std::span<const std::uint8_t> target, double alpha,
                           double gamma);

inline constexpr double kFocalClamp = 1e-7;

template <typename T>
struct LossReport {
  diff::Tensor<T> loss;  // scalar, differentiable
  double total = 0.0;
  double cls = 0.0;
  double dice = 0.0;
  double focal = 0.0;
  double rec = 0.0;
};

/// L = L_cls + lambda_mask (L_focal + L_dice) + lambda_rec L_rec.
/// Full: class loss over all queries (matched -> text, others -> no-text),
/// mask and recognition losses averaged over matched pairs.
/// Text-only: no mask terms. Weak: recognition and class loss on the single
/// matched query only.
template <typename T>
LossReport<T> total_loss(const TargetSet& targets, const QueryOutputs<T>& preds, const Assignment& sigma,
                         const LossWeights& weights);

}  // namespace spotter
