#pragma once

// Convolutional backbone with a top-down fusion pathway (P2..P5) and a dense
// transformer encoder over the flattened P5, P4, P3 tokens.

#include <array>
#include <string>
#include <vector>

#include "spotter/diff/layers.hpp"

namespace spotter {

using diff::Tensor;

/// Levels at 1/4, 1/8, 1/16 and 1/32 scale, each [h, w, d].
template <typename T>
struct FeaturePyramid {
  Tensor<T> p2, p3, p4, p5;
};

/// Flattened encoder tokens, coarsest level first (P5, P4, P3).
template <typename T>
struct TokenSequence {
  Tensor<T> tokens;  // [L, d]
  std::array<int, 3> level_offsets{};
  std::array<int, 3> level_heights{};
  std::array<int, 3> level_widths{};
  /// Downsampling factor of each level relative to P2.
  static constexpr std::array<int, 3> kStrideFromP2{8, 4, 2};

  int length() const { return tokens.dim(0); }
};

template <typename T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(nn::ParameterSet<T>& params, const std::string& prefix, int d, Rng& rng);

  /// image: [H, W, 1] with H and W multiples of 32.
  FeaturePyramid<T> extract_pyramid(const Tensor<T>& image) const;

 private:
  nn::Conv2d<T> stem1_, stem2_, stage3_, stage4_, stage5_;
  nn::Conv2d<T> lateral2_, lateral3_, lateral4_, lateral5_;
};

/// Parameter-free 2D sine embedding, [h, w, d]. The first d/2 channels encode
/// the row and the rest the column, each as interleaved sin/cos pairs at
/// geometric frequencies. Requires d % 4 == 0.
template <typename T>
Tensor<T> pos2d(int h, int w, int d);

template <typename T>
class TransformerEncoder {
 public:
  TransformerEncoder() = default;
  TransformerEncoder(nn::ParameterSet<T>& params, const std::string& prefix, int d, int layers, int heads,
                     int ffn_dim, Rng& rng);

  /// Flattens P5, P4, P3, adds positions and level embeddings, then runs the
  /// layer stack.
  TokenSequence<T> encode(const FeaturePyramid<T>& pyramid) const;

  /// Pre-norm self-attention + feed-forward stack over [L, d] inputs that
  /// already carry their positional terms.
  Tensor<T> apply_layers(const Tensor<T>& tokens) const;

  static constexpr int kMaxTokens = 4096;

 private:
  struct Layer {
    nn::LayerNorm<T> norm1, norm2;
    nn::MultiHeadAttention<T> attn;
    nn::FeedForward<T> ffn;
  };
  int d_ = 0;
  std::vector<Layer> layers_;
  nn::LayerNorm<T> final_norm_;
  Tensor<T> level_embed_;  // [3, d]
};

extern template class Backbone<float>;
extern template class Backbone<double>;
extern template class TransformerEncoder<float>;
extern template class TransformerEncoder<double>;

}  // namespace spotter
