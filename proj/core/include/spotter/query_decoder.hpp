#pragma once

// Text-query decoder with masked cross-attention, the pixel embedding, and
// the per-query shared semantic features consumed by every head.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "spotter/encoder.hpp"

namespace spotter {

template <typename T>
struct PixelEmbedding {
  Tensor<T> map;  // [h, w, d] at 1/4 scale
};

template <typename T>
struct SemanticFeatures {
  Tensor<T> per_query;        // [N, h, w, d]; row i is S_i
  Tensor<T> text_embeddings;  // [N, d]
};

/// 1x1 projection of P2. P2 already sits at 1/4 scale, so nothing is resampled.
template <typename T>
class PixelEmbedder {
 public:
  PixelEmbedder() = default;
  PixelEmbedder(nn::ParameterSet<T>& params, const std::string& prefix, int d, Rng& rng);
  PixelEmbedding<T> operator()(const Tensor<T>& p2) const;

  nn::Linear<T> projection;
};

/// S_i[y, x, c] = text[i, c] * pixel[y, x, c].
template <typename T>
SemanticFeatures<T> semantic_features(const Tensor<T>& text_embeddings, const PixelEmbedding<T>& pixel);

/// Binary per-query region at pixel-embedding resolution, row-major [N, h, w].
struct RegionMask {
  int queries = 0;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> inside;

  static RegionMask full(int queries, int height, int width);
  bool empty_for(int query) const;
};

/// Maps (normalized) query embeddings [N, d] to predicted regions. Called
/// without gradient recording.
template <typename T>
using RegionPredictor = std::function<RegionMask(const Tensor<T>& query_embeddings)>;

struct DecodeOptions {
  /// Disables masked attention in every layer.
  bool unmasked = false;
  /// Replaces the predicted region for a layer (1-based; layer 1 is always unmasked).
  std::function<std::optional<RegionMask>(int layer)> region_override;
};

/// Cross-attention block mask [1, 1, N, L] for `tokens`. A token is open to a
/// query when any pixel of its cell lies inside the query's region; queries
/// with an empty region are left fully open.
template <typename T>
nn::BlockMask cross_attention_mask(const RegionMask& region, const TokenSequence<T>& tokens);

template <typename T>
class QueryDecoder {
 public:
  QueryDecoder() = default;
  QueryDecoder(nn::ParameterSet<T>& params, const std::string& prefix, int d, int layers, int heads, int ffn_dim,
               int num_queries, Rng& rng);

  /// Returns the text embeddings [N, d]. Layer l > 1 restricts cross-attention
  /// to the region predicted from layer l-1's (normalized) queries,
  /// thresholded at 0.5 by the predictor.
  Tensor<T> decode(const TokenSequence<T>& tokens, const RegionPredictor<T>& predict_region,
                   const DecodeOptions& options = {}) const;

  int num_queries() const { return queries_.dim(0); }
  const Tensor<T>& queries() const { return queries_; }
  /// Final normalization applied to decoder outputs.
  Tensor<T> normalize(const Tensor<T>& q) const { return final_norm_(q); }

 private:
  struct Layer {
    nn::LayerNorm<T> norm_cross, norm_self, norm_ffn;
    nn::MultiHeadAttention<T> cross, self;
    nn::FeedForward<T> ffn;
  };
  int d_ = 0;
  Tensor<T> queries_;  // [N, d]
  std::vector<Layer> layers_;
  nn::LayerNorm<T> final_norm_;
};

extern template class PixelEmbedder<float>;
extern template class PixelEmbedder<double>;
extern template class QueryDecoder<float>;
extern template class QueryDecoder<double>;

}  // namespace spotter
