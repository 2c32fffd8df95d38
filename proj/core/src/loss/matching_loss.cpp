#include "spotter/matching_loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "spotter/diff/ops.hpp"

namespace spotter {

namespace d = spotter::diff;
using synth::SampleKind;

void LossWeights::validate() const {
  for (double v : {lambda_mask, lambda_rec, focal_alpha, focal_gamma}) {
    if (!std::isfinite(v) || v < 0) throw std::invalid_argument("loss weights must be finite and non-negative");
  }
  if (focal_alpha > 1) throw std::invalid_argument("focal_alpha must lie in [0, 1]");
}

void TargetSet::validate() const {
  if (size() > num_queries) {
    throw std::invalid_argument("more targets (" + std::to_string(size()) + ") than queries (" +
                                std::to_string(num_queries) + ")");
  }
  if (kind == SampleKind::kWeak && size() != 1) throw std::invalid_argument("weak targets need exactly one instance");
  const std::size_t cells = static_cast<std::size_t>(mask_height) * static_cast<std::size_t>(mask_width);
  for (const auto& inst : instances) {
    if (static_cast<int>(inst.text.size()) != char_slots) {
      throw std::invalid_argument("target text must have exactly char_slots entries");
    }
    if (kind == SampleKind::kFull && inst.mask.size() != cells) {
      throw std::invalid_argument("full target mask has the wrong size");
    }
    if (kind != SampleKind::kFull && !inst.mask.empty()) {
      throw std::invalid_argument("only full targets carry masks");
    }
  }
}

std::vector<std::uint8_t> downsample_mask(std::span<const std::uint8_t> mask, int height, int width, int factor) {
  if (factor < 1 || height % factor != 0 || width % factor != 0) {
    throw std::invalid_argument("downsample factor must divide the mask size");
  }
  if (mask.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
    throw std::invalid_argument("mask size does not match height x width");
  }
  const int h = height / factor, w = width / factor;
  std::vector<int> counts(static_cast<std::size_t>(h) * w, 0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (mask[static_cast<std::size_t>(y) * width + x]) ++counts[static_cast<std::size_t>(y / factor) * w + x / factor];
  const int half = (factor * factor + 1) / 2;
  std::vector<std::uint8_t> out(counts.size(), 0);
  bool any = false;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    out[i] = counts[i] >= half;
    any = any || out[i];
  }
  if (!any)
    for (std::size_t i = 0; i < counts.size(); ++i) out[i] = counts[i] > 0;
  return out;
}

TargetSet build_targets(const synth::SceneSample& sample, const synth::Charset& charset, int num_queries,
                        int char_slots, int mask_height, int mask_width) {
  if (mask_height <= 0 || mask_width <= 0 || sample.height % mask_height != 0 ||
      sample.width % mask_width != 0 || sample.height / mask_height != sample.width / mask_width) {
    throw std::invalid_argument("mask resolution must evenly divide the image");
  }
  TargetSet set;
  set.kind = sample.kind;
  set.num_queries = num_queries;
  set.mask_height = mask_height;
  set.mask_width = mask_width;
  set.char_slots = char_slots;
  const int factor = sample.height / mask_height;
  for (const auto& inst : sample.instances) {
    TargetInstance t;
    t.text = charset.encode(inst.transcription, char_slots);
    if (sample.kind == SampleKind::kFull) t.mask = downsample_mask(inst.mask, sample.height, sample.width, factor);
    set.instances.push_back(std::move(t));
  }
  set.validate();
  return set;
}

namespace {

double stable_sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// log(sigmoid(x)) without overflow.
double log_sigmoid(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

}  // namespace

double recognition_cost(std::span<const int> target_text, const double* logits, int char_slots, int classes) {
  if (static_cast<int>(target_text.size()) != char_slots) {
    throw std::invalid_argument("target text length does not match char_slots");
  }
  double total = 0;
  for (int k = 0; k < char_slots; ++k) {
    const double* row = logits + static_cast<std::size_t>(k) * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0;
    for (int c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const int t = target_text[static_cast<std::size_t>(k)];
    if (t < 0 || t >= classes) throw std::invalid_argument("target index out of range");
    total += std::exp(row[t] - mx) / z;
  }
  return total / char_slots;
}

double dice_loss_value(std::span<const double> probs, std::span<const std::uint8_t> target) {
  if (probs.size() != target.size()) throw std::invalid_argument("dice_loss: size mismatch");
  double inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double g = target[i] ? 1.0 : 0.0;
    inter += probs[i] * g;
    sp += probs[i];
    sg += g;
  }
  return 1.0 - (2.0 * inter + 1.0) / (sp + sg + 1.0);
}

double focal_loss_value(std::span<const double> probs, std::span<const std::uint8_t> target, double alpha,
                        double gamma) {
  if (probs.size() != target.size()) throw std::invalid_argument("focal_loss: size mismatch");
  if (probs.empty()) return 0.0;
  double total = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], kFocalClamp, 1.0 - kFocalClamp);
    const bool pos = target[i] != 0;
    const double pt = pos ? p : 1.0 - p;
    const double at = pos ? alpha : 1.0 - alpha;
    total += -at * std::pow(1.0 - pt, gamma) * std::log(pt);
  }
  return total / static_cast<double>(probs.size());
}

double mask_cost(std::span<const std::uint8_t> target, std::span<const double> logits) {
  if (target.size() != logits.size()) throw std::invalid_argument("mask_cost: size mismatch");
  if (logits.empty()) return 0.0;
  std::vector<double> probs(logits.size());
  double bce = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = stable_sigmoid(logits[i]);
    bce -= target[i] ? log_sigmoid(logits[i]) : log_sigmoid(-logits[i]);
  }
  return dice_loss_value(probs, target) + bce / static_cast<double>(logits.size());
}

double classification_cost(const double* probs) { return probs[kTextClass]; }

CostMatrix cost_matrix(const TargetSet& targets, const RawPredictions& preds) {
  if (targets.num_queries != preds.queries) throw std::invalid_argument("target set and predictions disagree on N");
  CostMatrix m;
  m.rows = targets.size();
  m.cols = preds.queries;
  m.costs.assign(static_cast<std::size_t>(m.rows) * m.cols, 0.0);
  const std::size_t cells = static_cast<std::size_t>(preds.mask_height) * preds.mask_width;
  for (int r = 0; r < m.rows; ++r) {
    const auto& t = targets.instances[static_cast<std::size_t>(r)];
    for (int j = 0; j < m.cols; ++j) {
      double c = -recognition_cost(t.text, preds.rec_of(j), preds.char_slots, preds.classes) -
                 classification_cost(preds.class_row(j));
      if (targets.kind == SampleKind::kFull) c += mask_cost(t.mask, std::span<const double>(preds.mask_of(j), cells));
      m.at(r, j) = c;
    }
  }
  return m;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// O(n^2 m) shortest augmenting path assignment over the given rows and
// columns (rows.size() <= cols.size()). Returns the optimal total and writes
// the chosen column per row.
double solve_assignment(const CostMatrix& m, const std::vector<int>& rows, const std::vector<int>& cols,
                        std::vector<int>* chosen) {
  const int n = static_cast<int>(rows.size());
  const int k = static_cast<int>(cols.size());
  if (chosen) chosen->assign(static_cast<std::size_t>(n), -1);
  if (n == 0) return 0.0;
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(k) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(k) + 1, 0), way(static_cast<std::size_t>(k) + 1, 0);
  auto cost = [&](int i, int j) { return m.at(rows[static_cast<std::size_t>(i - 1)], cols[static_cast<std::size_t>(j - 1)]); };
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(k) + 1, kInf);
    std::vector<char> used(static_cast<std::size_t>(k) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= k; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0, j) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= k; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  double total = 0;
  for (int j = 1; j <= k; ++j) {
    const int i = p[static_cast<std::size_t>(j)];
    if (i == 0) continue;
    total += cost(i, j);
    if (chosen) (*chosen)[static_cast<std::size_t>(i - 1)] = cols[static_cast<std::size_t>(j - 1)];
  }
  return total;
}

}  // namespace

Assignment hungarian(const CostMatrix& costs) {
  if (costs.rows > costs.cols) {
    throw std::invalid_argument("hungarian needs rows <= cols, got " + std::to_string(costs.rows) + "x" +
                                std::to_string(costs.cols));
  }
  if (costs.costs.size() != static_cast<std::size_t>(costs.rows) * costs.cols) {
    throw std::invalid_argument("cost matrix storage does not match its shape");
  }
  for (double c : costs.costs)
    if (!std::isfinite(c)) throw std::invalid_argument("cost matrix contains a non-finite entry");

  Assignment out;
  if (costs.rows == 0) return out;
  std::vector<int> rows(static_cast<std::size_t>(costs.rows)), cols(static_cast<std::size_t>(costs.cols));
  std::iota(rows.begin(), rows.end(), 0);
  std::iota(cols.begin(), cols.end(), 0);
  std::vector<int> chosen;
  const double optimum = solve_assignment(costs, rows, cols, &chosen);
  double scale = 1.0;
  for (double c : costs.costs) scale += std::abs(c);
  const double tol = 1e-12 * scale;

  // Fix rows in order, each to the smallest column that still admits an
  // optimal completion.
  out.sigma.assign(static_cast<std::size_t>(costs.rows), -1);
  double fixed = 0;
  for (int r = 0; r < costs.rows; ++r) {
    std::vector<int> rest_rows(rows.begin() + r + 1, rows.end());
    for (int c : cols) {
      std::vector<int> rest_cols;
      for (int o : cols)
        if (o != c) rest_cols.push_back(o);
      const double value = fixed + costs.at(r, c) + solve_assignment(costs, rest_rows, rest_cols, nullptr);
      if (value <= optimum + tol) {
        out.sigma[static_cast<std::size_t>(r)] = c;
        fixed += costs.at(r, c);
        cols.erase(std::find(cols.begin(), cols.end(), c));
        break;
      }
    }
    if (out.sigma[static_cast<std::size_t>(r)] < 0) {
      // Rounding left no candidate within tolerance; fall back to the solver's choice.
      const int c = chosen[static_cast<std::size_t>(r)];
      auto it = std::find(cols.begin(), cols.end(), c);
      if (it == cols.end()) return Assignment{chosen};
      out.sigma[static_cast<std::size_t>(r)] = c;
      fixed += costs.at(r, c);
      cols.erase(it);
    }
  }
  return out;
}

double assignment_cost(const CostMatrix& costs, const Assignment& assignment) {
  double total = 0;
  for (std::size_t r = 0; r < assignment.sigma.size(); ++r) total += costs.at(static_cast<int>(r), assignment.sigma[r]);
  return total;
}

template <typename T>
d::Tensor<T> dice_loss(const d::Tensor<T>& probs, std::span<const std::uint8_t> target) {
  if (probs.size() != target.size()) throw d::ShapeError("dice_loss: size mismatch");
  std::vector<T> g(target.size());
  T sg = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = target[i] ? T(1) : T(0);
    sg += g[i];
  }
  const auto gt = d::Tensor<T>::from_values(probs.shape(), std::move(g));
  const auto inter = d::sum_all(d::mul(probs, gt));
  const auto numer = d::add_scalar(d::mul_scalar(inter, T(2)), T(1));
  const auto denom = d::add_scalar(d::sum_all(probs), sg + T(1));
  return d::add_scalar(d::neg(d::div(numer, denom)), T(1));
}

template <typename T>
d::Tensor<T> focal_loss(const d::Tensor<T>& probs, std::span<const std::uint8_t> target, double alpha, double gamma) {
  if (probs.size() != target.size()) throw d::ShapeError("focal_loss: size mismatch");
  std::vector<T> g(target.size()), a(target.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = target[i] ? T(1) : T(0);
    a[i] = static_cast<T>(target[i] ? alpha : 1.0 - alpha);
  }
  const auto gt = d::Tensor<T>::from_values(probs.shape(), g);
  for (auto& v : g) v = T(1) - v;
  const auto inv_gt = d::Tensor<T>::from_values(probs.shape(), std::move(g));
  const auto at = d::Tensor<T>::from_values(probs.shape(), std::move(a));
  const auto p = d::clamp(probs, static_cast<T>(kFocalClamp), static_cast<T>(1.0 - kFocalClamp));
  // p_t = g p + (1 - g)(1 - p)
  const auto pt = d::add(d::mul(gt, p), d::mul(inv_gt, d::add_scalar(d::neg(p), T(1))));
  const auto modulating = d::pow_scalar(d::add_scalar(d::neg(pt), T(1)), static_cast<T>(gamma));
  return d::neg(d::mean_all(d::mul(d::mul(at, modulating), d::log(pt))));
}

template <typename T>
LossReport<T> total_loss(const TargetSet& targets, const QueryOutputs<T>& preds, const Assignment& sigma,
                         const LossWeights& weights) {
  weights.validate();
  const int n = preds.class_logits.dim(0);
  if (targets.num_queries != n) throw std::invalid_argument("target set and predictions disagree on N");
  if (static_cast<int>(sigma.sigma.size()) != targets.size()) {
    throw std::invalid_argument("assignment does not cover every target");
  }
  std::vector<char> taken(static_cast<std::size_t>(n), 0);
  for (int q : sigma.sigma) {
    if (q < 0 || q >= n || taken[static_cast<std::size_t>(q)]) throw std::invalid_argument("assignment is not injective");
    taken[static_cast<std::size_t>(q)] = 1;
  }
  const bool weak = targets.kind == SampleKind::kWeak;
  const int matched = targets.size();

  // Classification: cross-entropy against text (matched) / no-text (others);
  // under weak supervision only the matched query contributes.
  std::vector<T> onehot(static_cast<std::size_t>(n) * kNumClasses, T(0));
  for (int q = 0; q < n; ++q) {
    if (taken[static_cast<std::size_t>(q)]) {
      onehot[static_cast<std::size_t>(q) * kNumClasses + kTextClass] = T(1);
    } else if (!weak) {
      onehot[static_cast<std::size_t>(q) * kNumClasses + kNoTextClass] = T(1);
    }
  }
  const int cls_terms = weak ? matched : n;
  LossReport<T> report;
  d::Tensor<T> cls = d::Tensor<T>::scalar(T(0));
  if (cls_terms > 0) {
    const auto target_tensor = d::Tensor<T>::from_values({n, kNumClasses}, std::move(onehot));
    cls = d::mul_scalar(d::sum_all(d::mul(target_tensor, d::log_softmax(preds.class_logits, -1))),
                        static_cast<T>(-1.0 / cls_terms));
  }

  d::Tensor<T> dice = d::Tensor<T>::scalar(T(0));
  d::Tensor<T> focal = d::Tensor<T>::scalar(T(0));
  d::Tensor<T> rec = d::Tensor<T>::scalar(T(0));
  if (matched > 0) {
    const std::span<const int> queries(sigma.sigma);
    if (targets.kind == SampleKind::kFull) {
      const int h = preds.mask_logits.dim(1), w = preds.mask_logits.dim(2);
      if (h != targets.mask_height || w != targets.mask_width) {
        throw std::invalid_argument("mask target resolution does not match predictions");
      }
      const auto probs = d::sigmoid(d::index_select(preds.mask_logits, 0, queries));  // [M, h, w]
      std::vector<d::Tensor<T>> dice_terms, focal_terms;
      for (int r = 0; r < matched; ++r) {
        const auto p = d::slice(probs, 0, r, 1);
        const auto& g = targets.instances[static_cast<std::size_t>(r)].mask;
        dice_terms.push_back(d::reshape(dice_loss(p, g), {1}));
        focal_terms.push_back(d::reshape(focal_loss(p, g, weights.focal_alpha, weights.focal_gamma), {1}));
      }
      dice = d::mean_all(d::concat(dice_terms, 0));
      focal = d::mean_all(d::concat(focal_terms, 0));
    }

    const int k = preds.rec_logits.dim(1), c = preds.rec_logits.dim(2);
    if (k != targets.char_slots) throw std::invalid_argument("char_slots of targets and predictions differ");
    const int pad = c - 1;
    std::vector<T> rec_target(static_cast<std::size_t>(matched) * k * c, T(0));
    int positions = 0;
    for (int r = 0; r < matched; ++r)
      for (int s = 0; s < k; ++s) {
        const int t = targets.instances[static_cast<std::size_t>(r)].text[static_cast<std::size_t>(s)];
        if (t < 0 || t >= c) throw std::invalid_argument("target character index out of range");
        if (weights.rec_ignore_pad && t == pad) continue;
        rec_target[(static_cast<std::size_t>(r) * k + s) * c + t] = T(1);
        ++positions;
      }
    if (positions > 0) {
      const auto logp = d::log_softmax(d::index_select(preds.rec_logits, 0, queries), -1);
      const auto tt = d::Tensor<T>::from_values({matched, k, c}, std::move(rec_target));
      rec = d::mul_scalar(d::sum_all(d::mul(tt, logp)), static_cast<T>(-1.0 / positions));
    }
  }

  report.loss = d::add(d::add(cls, d::mul_scalar(d::add(focal, dice), static_cast<T>(weights.lambda_mask))),
                       d::mul_scalar(rec, static_cast<T>(weights.lambda_rec)));
  report.total = static_cast<double>(report.loss.item());
  report.cls = static_cast<double>(cls.item());
  report.dice = static_cast<double>(dice.item());
  report.focal = static_cast<double>(focal.item());
  report.rec = static_cast<double>(rec.item());
  return report;
}

template d::Tensor<float> dice_loss(const d::Tensor<float>&, std::span<const std::uint8_t>);
template d::Tensor<double> dice_loss(const d::Tensor<double>&, std::span<const std::uint8_t>);
template d::Tensor<float> focal_loss(const d::Tensor<float>&, std::span<const std::uint8_t>, double, double);
template d::Tensor<double> focal_loss(const d::Tensor<double>&, std::span<const std::uint8_t>, double, double);
template LossReport<float> total_loss(const TargetSet&, const QueryOutputs<float>&, const Assignment&,
                                      const LossWeights&);
template LossReport<double> total_loss(const TargetSet&, const QueryOutputs<double>&, const Assignment&,
                                       const LossWeights&);

}  // namespace spotter
