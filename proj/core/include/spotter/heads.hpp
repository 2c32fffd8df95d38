#pragma once

// Classification, segmentation and recognition (AGG + character-query
// decoder) branches over the shared semantic features, plus instance
// assembly for inference.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "spotter/predictions.hpp"
#include "spotter/query_decoder.hpp"
#include "spotter/synthdata.hpp"

namespace spotter {

template <typename T>
struct ClassProbs {
  Tensor<T> logits;  // [N, 3]
  Tensor<T> probs;   // [N, 3], rows sum to 1
};

/// Global average pooling of S_i, three affine layers, softmax over
/// {text, background, no-text}.
template <typename T>
class ClassificationHead {
 public:
  ClassificationHead() = default;
  ClassificationHead(nn::ParameterSet<T>& params, const std::string& prefix, int d, Rng& rng);
  ClassProbs<T> classify(const SemanticFeatures<T>& features) const;

  nn::Linear<T> fc1, fc2, fc3;
};

/// Two 3x3 convolutions with ReLU and a 1x1 convolution to one channel,
/// shared across queries. Returns pre-sigmoid logits [N, h, w].
template <typename T>
class SegmentationHead {
 public:
  SegmentationHead() = default;
  SegmentationHead(nn::ParameterSet<T>& params, const std::string& prefix, int d, int hidden, Rng& rng);
  Tensor<T> segment(const Tensor<T>& per_query) const;

  nn::Conv2d<T> conv1, conv2, out;
};

/// Column- and row-wise aggregates of one or more queries' features.
template <typename T>
struct DirectionalFeatures {
  Tensor<T> horizontal;  // [N, w, d]: one vector per column
  Tensor<T> vertical;    // [N, h, d]: one vector per row
};

inline constexpr double kAggEpsilon = 1e-6;

/// F_h[x] = sum_y S*M / (sum_y M + eps), F_v[y] = sum_x S*M / (sum_x M + eps),
/// per channel. S and M are [N, h, w, d].
template <typename T>
DirectionalFeatures<T> agg_directional(const Tensor<T>& features, const Tensor<T>& attention);

/// Standard transformer sinusoid table [length, d].
template <typename T>
Tensor<T> sine_positions_1d(int length, int d);

/// concat[F_h + e_h, F_v + e_v] along the sequence axis, with direction row 0
/// added to the horizontal block and row 1 to the vertical block.
/// e_h: [w, d], e_v: [h, d], e_d: [2, d]. Output [N, w + h, d].
template <typename T>
Tensor<T> assemble_sequence(const DirectionalFeatures<T>& features, const Tensor<T>& e_h, const Tensor<T>& e_v,
                            const Tensor<T>& e_d);

/// Adaptive global aggregation: attention mask, directional pooling and
/// sequence assembly.
template <typename T>
class AggModule {
 public:
  AggModule() = default;
  AggModule(nn::ParameterSet<T>& params, const std::string& prefix, int d, Rng& rng);

  /// sigmoid(1x1 conv(S)), [N, h, w, d], entries in (0, 1).
  Tensor<T> attention(const Tensor<T>& per_query) const;
  /// attention -> agg_directional -> assemble_sequence.
  Tensor<T> sequence(const Tensor<T>& per_query) const;

  nn::Linear<T> conv;        // the 1x1 convolution
  Tensor<T> direction_embed;  // [2, d]
};

/// Non-autoregressive recognizer: K learned character queries decoded in
/// parallel against the AGG sequence, then an affine map to C classes.
template <typename T>
class Recognizer {
 public:
  Recognizer() = default;
  Recognizer(nn::ParameterSet<T>& params, const std::string& prefix, int d, int layers, int heads, int ffn_dim,
             int char_slots, int classes, Rng& rng);

  /// x_seq: [N, S, d] -> logits [N, K, C].
  Tensor<T> recognize(const Tensor<T>& sequence) const;
  Tensor<T> recognize(const Tensor<T>& sequence, const Tensor<T>& char_queries) const;

  const Tensor<T>& char_queries() const { return char_queries_; }

 private:
  struct Layer {
    nn::LayerNorm<T> norm_self, norm_cross, norm_ffn;
    nn::MultiHeadAttention<T> self, cross;
    nn::FeedForward<T> ffn;
  };
  int d_ = 0;
  Tensor<T> char_queries_;  // [K, d]
  std::vector<Layer> layers_;
  nn::LayerNorm<T> final_norm_;
  nn::Linear<T> classifier_;
};

struct InstanceResult {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> mask;  // [height, width]
  std::string transcription;
  double score = 0.0;  // text-class probability
  int query = -1;
};

/// Greedy per-position decoding; stops at the first [PAD].
std::string decode_transcription(const double* logits, int char_slots, int classes, const synth::Charset& charset);

/// Keeps queries with text probability >= score_thresh, assigns each pixel to
/// the kept query with the highest mask probability (if >= 0.5), upsamples
/// the assignment map by nearest neighbour to out_height x out_width and
/// keeps the largest 8-connected component per query.
std::vector<InstanceResult> assemble_instances(const RawPredictions& preds, const synth::Charset& charset,
                                               double score_thresh, int out_height, int out_width);

extern template class ClassificationHead<float>;
extern template class ClassificationHead<double>;
extern template class SegmentationHead<float>;
extern template class SegmentationHead<double>;
extern template class AggModule<float>;
extern template class AggModule<double>;
extern template class Recognizer<float>;
extern template class Recognizer<double>;

}  // namespace spotter
