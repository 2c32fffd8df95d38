#pragma once

// Detection precision / recall / F at mask IoU 0.5, dataset 1-NED and
// end-to-end F-measure.

#include <span>
#include <string>
#include <vector>

#include "spotter/heads.hpp"
#include "spotter/synthdata.hpp"

namespace spotter {

std::size_t levenshtein(const std::string& a, const std::string& b);
/// 1 - Levenshtein / max(|pred|, |gt|); 1 when both are empty.
double one_minus_ned(const std::string& pred, const std::string& gt);

/// Intersection over union of two equally sized binary masks (0 if both empty).
double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

struct Metrics {
  double det_precision = 0.0;
  double det_recall = 0.0;
  double det_f = 0.0;
  double one_minus_ned = 0.0;  // mean over ground-truth instances
  double e2e_precision = 0.0;
  double e2e_recall = 0.0;  // share of ground truth detected with an exact transcription
  double e2e_f = 0.0;
  int ground_truth = 0;
  int predictions = 0;
  int true_positives = 0;
  int exact_matches = 0;
};

inline constexpr double kIouThreshold = 0.5;

/// Harmonic mean, 0 when both inputs are 0.
double f_measure(double precision, double recall);

/// Scores predictions against Full ground truth. Within each image,
/// prediction/ground-truth pairs are taken greedily by descending IoU; a pair
/// with IoU >= 0.5 is a detection true positive. Throws std::invalid_argument
/// for an empty dataset, non-Full samples or mismatched sizes.
Metrics evaluate_predictions(std::span<const synth::SceneSample> dataset,
                             std::span<const std::vector<InstanceResult>> predictions);

}  // namespace spotter
