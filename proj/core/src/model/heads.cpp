#include "spotter/heads.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace spotter {

namespace d = spotter::diff;

template <typename T>
RawPredictions snapshot(const QueryOutputs<T>& outputs) {
  RawPredictions raw;
  raw.queries = outputs.class_logits.dim(0);
  raw.mask_height = outputs.mask_logits.dim(1);
  raw.mask_width = outputs.mask_logits.dim(2);
  raw.char_slots = outputs.rec_logits.dim(1);
  raw.classes = outputs.rec_logits.dim(2);
  const auto logits = outputs.class_logits.values();
  raw.class_probs.resize(logits.size());
  for (int q = 0; q < raw.queries; ++q) {
    const T* row = logits.data() + static_cast<std::size_t>(q) * kNumClasses;
    const double mx = static_cast<double>(*std::max_element(row, row + kNumClasses));
    double total = 0;
    for (int c = 0; c < kNumClasses; ++c) total += std::exp(static_cast<double>(row[c]) - mx);
    for (int c = 0; c < kNumClasses; ++c) {
      raw.class_probs[static_cast<std::size_t>(q) * kNumClasses + static_cast<std::size_t>(c)] =
          std::exp(static_cast<double>(row[c]) - mx) / total;
    }
  }
  raw.mask_logits.assign(outputs.mask_logits.values().begin(), outputs.mask_logits.values().end());
  raw.rec_logits.assign(outputs.rec_logits.values().begin(), outputs.rec_logits.values().end());
  return raw;
}

// ---------------------------------------------------------------------------

template <typename T>
ClassificationHead<T>::ClassificationHead(nn::ParameterSet<T>& params, const std::string& prefix, int dm, Rng& rng)
    : fc1(params, prefix + ".fc1", dm, dm, rng),
      fc2(params, prefix + ".fc2", dm, dm, rng),
      fc3(params, prefix + ".fc3", dm, kNumClasses, rng) {}

template <typename T>
ClassProbs<T> ClassificationHead<T>::classify(const SemanticFeatures<T>& features) const {
  const Tensor<T> pooled = d::mean(features.per_query, {1, 2});  // [N, d]
  ClassProbs<T> out;
  out.logits = fc3(d::relu(fc2(d::relu(fc1(pooled)))));
  out.probs = d::softmax(out.logits, -1);
  return out;
}

template <typename T>
SegmentationHead<T>::SegmentationHead(nn::ParameterSet<T>& params, const std::string& prefix, int dm, int hidden,
                                      Rng& rng)
    : conv1(params, prefix + ".conv1", dm, hidden, 3, 1, rng),
      conv2(params, prefix + ".conv2", hidden, hidden, 3, 1, rng),
      out(params, prefix + ".out", hidden, 1, 1, 1, rng) {}

template <typename T>
Tensor<T> SegmentationHead<T>::segment(const Tensor<T>& per_query) const {
  if (per_query.rank() != 4) throw d::ShapeError("segment expects [N, h, w, d], got " + d::to_string(per_query.shape()));
  const Tensor<T> logits = out(d::relu(conv2(d::relu(conv1(per_query)))));
  return d::reshape(logits, {per_query.dim(0), per_query.dim(1), per_query.dim(2)});
}

// ---------------------------------------------------------------------------

template <typename T>
DirectionalFeatures<T> agg_directional(const Tensor<T>& features, const Tensor<T>& attention) {
  if (features.shape() != attention.shape() || features.rank() != 4) {
    throw d::ShapeError("agg_directional expects matching [N, h, w, d] inputs, got " +
                        d::to_string(features.shape()) + " and " + d::to_string(attention.shape()));
  }
  const Tensor<T> weighted = d::mul(features, attention);
  const T eps = static_cast<T>(kAggEpsilon);
  DirectionalFeatures<T> out;
  out.horizontal = d::div(d::sum(weighted, {1}), d::add_scalar(d::sum(attention, {1}), eps));
  out.vertical = d::div(d::sum(weighted, {2}), d::add_scalar(d::sum(attention, {2}), eps));
  return out;
}

template <typename T>
Tensor<T> sine_positions_1d(int length, int dm) {
  if (length <= 0 || dm <= 0 || dm % 2 != 0) throw d::ShapeError("sine_positions_1d needs positive length and even d");
  std::vector<T> values(static_cast<std::size_t>(length) * dm);
  for (int p = 0; p < length; ++p)
    for (int i = 0; i < dm; i += 2) {
      const double angle = p / std::pow(10000.0, static_cast<double>(i) / dm);
      values[static_cast<std::size_t>(p) * dm + i] = static_cast<T>(std::sin(angle));
      values[static_cast<std::size_t>(p) * dm + i + 1] = static_cast<T>(std::cos(angle));
    }
  return Tensor<T>::from_values({length, dm}, std::move(values));
}

template <typename T>
Tensor<T> assemble_sequence(const DirectionalFeatures<T>& features, const Tensor<T>& e_h, const Tensor<T>& e_v,
                            const Tensor<T>& e_d) {
  const int dm = features.horizontal.dim(-1);
  if (e_d.shape() != diff::Shape{2, dm}) throw d::ShapeError("direction embedding must be [2, d]");
  const int row0[1] = {0};
  const int row1[1] = {1};
  const Tensor<T> horizontal =
      d::add(d::add(features.horizontal, e_h), d::index_select(e_d, 0, std::span<const int>(row0)));
  const Tensor<T> vertical =
      d::add(d::add(features.vertical, e_v), d::index_select(e_d, 0, std::span<const int>(row1)));
  return d::concat(std::vector<Tensor<T>>{horizontal, vertical}, 1);
}

template <typename T>
AggModule<T>::AggModule(nn::ParameterSet<T>& params, const std::string& prefix, int dm, Rng& rng)
    : conv(params, prefix + ".attn_conv", dm, dm, rng),
      direction_embed(params.create(prefix + ".direction_embed", {2, dm}, diff::Init::kUniformSmall, rng)) {}

template <typename T>
Tensor<T> AggModule<T>::attention(const Tensor<T>& per_query) const {
  return d::sigmoid(conv(per_query));
}

template <typename T>
Tensor<T> AggModule<T>::sequence(const Tensor<T>& per_query) const {
  const int h = per_query.dim(1), w = per_query.dim(2), dm = per_query.dim(3);
  const DirectionalFeatures<T> dir = agg_directional(per_query, attention(per_query));
  return assemble_sequence(dir, sine_positions_1d<T>(w, dm), sine_positions_1d<T>(h, dm), direction_embed);
}

template <typename T>
Recognizer<T>::Recognizer(nn::ParameterSet<T>& params, const std::string& prefix, int dm, int layers, int heads,
                          int ffn_dim, int char_slots, int classes, Rng& rng)
    : d_(dm) {
  char_queries_ = params.create(prefix + ".char_queries", {char_slots, dm}, diff::Init::kUniformSmall, rng);
  for (int i = 0; i < layers; ++i) {
    const std::string p = prefix + ".layer" + std::to_string(i);
    layers_.push_back(Layer{nn::LayerNorm<T>(params, p + ".norm_self", dm, rng),
                            nn::LayerNorm<T>(params, p + ".norm_cross", dm, rng),
                            nn::LayerNorm<T>(params, p + ".norm_ffn", dm, rng),
                            nn::MultiHeadAttention<T>(params, p + ".self", dm, heads, rng),
                            nn::MultiHeadAttention<T>(params, p + ".cross", dm, heads, rng),
                            nn::FeedForward<T>(params, p + ".ffn", dm, ffn_dim, rng)});
  }
  final_norm_ = nn::LayerNorm<T>(params, prefix + ".final_norm", dm, rng);
  classifier_ = nn::Linear<T>(params, prefix + ".classifier", dm, classes, rng);
}

template <typename T>
Tensor<T> Recognizer<T>::recognize(const Tensor<T>& sequence) const {
  return recognize(sequence, char_queries_);
}

template <typename T>
Tensor<T> Recognizer<T>::recognize(const Tensor<T>& sequence, const Tensor<T>& char_queries) const {
  if (sequence.rank() != 3 || sequence.dim(2) != d_) {
    throw d::ShapeError("recognize expects [N, S, d], got " + d::to_string(sequence.shape()));
  }
  const int n = sequence.dim(0);
  const int k = char_queries.dim(0);
  Tensor<T> q = d::broadcast_to(char_queries, {n, k, d_});
  for (const auto& layer : layers_) {
    const Tensor<T> h = layer.norm_self(q);
    q = d::add(q, layer.self(h, h));
    q = d::add(q, layer.cross(layer.norm_cross(q), sequence));
    q = d::add(q, layer.ffn(layer.norm_ffn(q)));
  }
  return classifier_(final_norm_(q));
}

// ---------------------------------------------------------------------------

std::string decode_transcription(const double* logits, int char_slots, int classes, const synth::Charset& charset) {
  if (classes != charset.size()) throw std::invalid_argument("recognition classes do not match the charset");
  std::string out;
  for (int k = 0; k < char_slots; ++k) {
    const double* row = logits + static_cast<std::size_t>(k) * classes;
    const int best = static_cast<int>(std::max_element(row, row + classes) - row);
    if (best == charset.pad_index()) break;
    out.push_back(charset.symbol(best));
  }
  return out;
}

namespace {

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Largest 8-connected component of pixels equal to `label`; empty if none.
std::vector<std::uint8_t> largest_component(const std::vector<int>& labels, int label, int height, int width) {
  std::vector<int> comp(labels.size(), -1);
  std::vector<std::size_t> stack;
  int best_id = -1;
  std::size_t best_size = 0;
  int next_id = 0;
  for (std::size_t start = 0; start < labels.size(); ++start) {
    if (labels[start] != label || comp[start] >= 0) continue;
    const int id = next_id++;
    std::size_t count = 0;
    stack.push_back(start);
    comp[start] = id;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++count;
      const int y = static_cast<int>(p) / width, x = static_cast<int>(p) % width;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= height || xx < 0 || xx >= width) continue;
          const std::size_t qi = static_cast<std::size_t>(yy) * width + xx;
          if (labels[qi] == label && comp[qi] < 0) {
            comp[qi] = id;
            stack.push_back(qi);
          }
        }
    }
    if (count > best_size) {
      best_size = count;
      best_id = id;
    }
  }
  std::vector<std::uint8_t> mask;
  if (best_id < 0) return mask;
  mask.assign(labels.size(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) mask[i] = comp[i] == best_id;
  return mask;
}

}  // namespace

std::vector<InstanceResult> assemble_instances(const RawPredictions& preds, const synth::Charset& charset,
                                               double score_thresh, int out_height, int out_width) {
  const int h = preds.mask_height, w = preds.mask_width;
  std::vector<int> kept;
  for (int q = 0; q < preds.queries; ++q)
    if (preds.class_row(q)[kTextClass] >= score_thresh) kept.push_back(q);

  std::vector<int> owner(static_cast<std::size_t>(h) * w, -1);
  for (std::size_t p = 0; p < owner.size(); ++p) {
    double best = 0.5;
    for (int q : kept) {
      const double prob = sigmoid(preds.mask_of(q)[p]);
      if (prob > best || (prob == best && owner[p] < 0 && prob >= 0.5)) {
        best = prob;
        owner[p] = q;
      }
    }
  }

  std::vector<int> full(static_cast<std::size_t>(out_height) * out_width);
  for (int y = 0; y < out_height; ++y)
    for (int x = 0; x < out_width; ++x) {
      const int sy = static_cast<int>(static_cast<long>(y) * h / out_height);
      const int sx = static_cast<int>(static_cast<long>(x) * w / out_width);
      full[static_cast<std::size_t>(y) * out_width + x] = owner[static_cast<std::size_t>(sy) * w + sx];
    }

  std::vector<InstanceResult> results;
  for (int q : kept) {
    auto mask = largest_component(full, q, out_height, out_width);
    if (mask.empty()) continue;
    InstanceResult r;
    r.height = out_height;
    r.width = out_width;
    r.mask = std::move(mask);
    r.transcription = decode_transcription(preds.rec_of(q), preds.char_slots, preds.classes, charset);
    r.score = preds.class_row(q)[kTextClass];
    r.query = q;
    results.push_back(std::move(r));
  }
  return results;
}

template RawPredictions snapshot(const QueryOutputs<float>&);
template RawPredictions snapshot(const QueryOutputs<double>&);
template DirectionalFeatures<float> agg_directional(const Tensor<float>&, const Tensor<float>&);
template DirectionalFeatures<double> agg_directional(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> sine_positions_1d<float>(int, int);
template Tensor<double> sine_positions_1d<double>(int, int);
template Tensor<float> assemble_sequence(const DirectionalFeatures<float>&, const Tensor<float>&, const Tensor<float>&,
                                         const Tensor<float>&);
template Tensor<double> assemble_sequence(const DirectionalFeatures<double>&, const Tensor<double>&,
                                          const Tensor<double>&, const Tensor<double>&);
template class ClassificationHead<float>;
template class ClassificationHead<double>;
template class SegmentationHead<float>;
template class SegmentationHead<double>;
template class AggModule<float>;
template class AggModule<double>;
template class Recognizer<float>;
template class Recognizer<double>;

}  // namespace spotter
