#include "spotter/metrics.hpp"

#include <algorithm>
#include <stdexcept>
#include <tuple>

namespace spotter {

std::size_t levenshtein(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double one_minus_ned(const std::string& pred, const std::string& gt) {
  const std::size_t longest = std::max(pred.size(), gt.size());
  if (longest == 0) return 1.0;
  return 1.0 - static_cast<double>(levenshtein(pred, gt)) / static_cast<double>(longest);
}

double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) throw std::invalid_argument("mask_iou: size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double f_measure(double precision, double recall) {
  return precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

Metrics evaluate_predictions(std::span<const synth::SceneSample> dataset,
                             std::span<const std::vector<InstanceResult>> predictions) {
  if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
  if (dataset.size() != predictions.size()) throw std::invalid_argument("evaluate: one prediction list per sample");
  Metrics m;
  double ned_sum = 0;
  for (std::size_t s = 0; s < dataset.size(); ++s) {
    const auto& sample = dataset[s];
    if (sample.kind != synth::SampleKind::kFull) {
      throw std::invalid_argument("evaluate: sample " + sample.id + " is not fully annotated");
    }
    const auto& preds = predictions[s];
    const std::size_t pixels = static_cast<std::size_t>(sample.height) * static_cast<std::size_t>(sample.width);
    for (const auto& p : preds) {
      if (p.mask.size() != pixels) throw std::invalid_argument("evaluate: prediction mask size mismatch");
    }
    std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;  // (iou, gt, pred)
    for (std::size_t g = 0; g < sample.instances.size(); ++g)
      for (std::size_t p = 0; p < preds.size(); ++p) {
        const double iou = mask_iou(sample.instances[g].mask, preds[p].mask);
        if (iou >= kIouThreshold) pairs.emplace_back(iou, g, p);
      }
    std::stable_sort(pairs.begin(), pairs.end(),
                     [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });
    std::vector<int> gt_match(sample.instances.size(), -1);
    std::vector<char> pred_used(preds.size(), 0);
    for (const auto& [iou, g, p] : pairs) {
      if (gt_match[g] >= 0 || pred_used[p]) continue;
      gt_match[g] = static_cast<int>(p);
      pred_used[p] = 1;
    }
    for (std::size_t g = 0; g < sample.instances.size(); ++g) {
      const std::string& truth = sample.instances[g].transcription;
      const std::string guess = gt_match[g] >= 0 ? preds[static_cast<std::size_t>(gt_match[g])].transcription : "";
      ned_sum += one_minus_ned(guess, truth);
      if (gt_match[g] >= 0) {
        ++m.true_positives;
        if (guess == truth) ++m.exact_matches;
      }
    }
    m.ground_truth += static_cast<int>(sample.instances.size());
    m.predictions += static_cast<int>(preds.size());
  }
  auto ratio = [](int num, int den) { return den > 0 ? static_cast<double>(num) / den : 0.0; };
  m.det_precision = ratio(m.true_positives, m.predictions);
  m.det_recall = ratio(m.true_positives, m.ground_truth);
  m.det_f = f_measure(m.det_precision, m.det_recall);
  m.e2e_precision = ratio(m.exact_matches, m.predictions);
  m.e2e_recall = ratio(m.exact_matches, m.ground_truth);
  m.e2e_f = f_measure(m.e2e_precision, m.e2e_recall);
  m.one_minus_ned = m.ground_truth > 0 ? ned_sum / m.ground_truth : 0.0;
  return m;
}

}  // namespace spotter
