#pragma once

// The full network: backbone + transformer encoder, text-query decoder,
// pixel embedding and the three heads over shared semantic features.

#include <string>
#include <vector>

#include "spotter/heads.hpp"
#include "spotter/synthdata.hpp"

namespace spotter {

struct ModelConfig {
  int d = 64;
  int heads = 4;
  int ffn_dim = 128;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int recognizer_layers = 2;
  int num_queries = 8;
  int char_slots = 8;
  int seg_hidden = 32;
  std::string charset = synth::Charset::desk().symbols();

  /// Throws std::invalid_argument for inconsistent dimensions.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Scales a [0, 1] grayscale image to [-1, 1] as an [H, W, 1] tensor.
template <typename T>
Tensor<T> image_tensor(int height, int width, std::span<const double> pixels);

template <typename T>
class SpotterModel {
 public:
  SpotterModel(const ModelConfig& config, std::uint64_t seed);

  SpotterModel(const SpotterModel&) = delete;
  SpotterModel& operator=(const SpotterModel&) = delete;

  /// image: [H, W, 1]; H and W multiples of 32.
  QueryOutputs<T> forward(const Tensor<T>& image, const DecodeOptions& options = {}) const;
  QueryOutputs<T> forward(const synth::SceneSample& sample) const;

  /// Detected instances at input resolution. Runs without gradient recording.
  std::vector<InstanceResult> infer(int height, int width, std::span<const double> pixels,
                                    double score_thresh = 0.5) const;

  const ModelConfig& config() const { return config_; }
  const synth::Charset& charset() const { return charset_; }
  nn::ParameterSet<T>& parameters() { return params_; }
  const nn::ParameterSet<T>& parameters() const { return params_; }

  /// Mask resolution for a given input size (1/4 scale).
  static int mask_extent(int image_extent) { return image_extent / 4; }

 private:
  ModelConfig config_;
  synth::Charset charset_;
  nn::ParameterSet<T> params_;
  Backbone<T> backbone_;
  TransformerEncoder<T> encoder_;
  PixelEmbedder<T> pixel_embedder_;
  QueryDecoder<T> decoder_;
  ClassificationHead<T> classifier_;
  SegmentationHead<T> segmenter_;
  AggModule<T> agg_;
  Recognizer<T> recognizer_;
};

extern template class SpotterModel<float>;
extern template class SpotterModel<double>;

}  // namespace spotter
