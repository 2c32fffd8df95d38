#include "spotter/model.hpp"

#include <stdexcept>

namespace spotter {

namespace d = spotter::diff;

void ModelConfig::validate() const {
  if (d <= 0 || heads <= 0 || d % heads != 0) throw std::invalid_argument("d must be a positive multiple of heads");
  if (d % 4 != 0) throw std::invalid_argument("d must be a multiple of 4 for the 2-D position embedding");
  if (ffn_dim <= 0 || seg_hidden <= 0) throw std::invalid_argument("ffn_dim and seg_hidden must be positive");
  if (encoder_layers < 0 || decoder_layers < 1 || recognizer_layers < 1) {
    throw std::invalid_argument("need encoder_layers >= 0, decoder_layers >= 1, recognizer_layers >= 1");
  }
  if (num_queries < 1 || char_slots < 1) throw std::invalid_argument("num_queries and char_slots must be positive");
  if (charset.empty()) throw std::invalid_argument("charset must not be empty");
  synth::Charset cs(charset);
  for (char c : charset) synth::glyph_for(c);
}

template <typename T>
Tensor<T> image_tensor(int height, int width, std::span<const double> pixels) {
  if (height <= 0 || width <= 0 || height % 32 != 0 || width % 32 != 0) {
    throw d::ShapeError("image size must be a positive multiple of 32, got " + std::to_string(height) + "x" +
                         std::to_string(width));
  }
  if (pixels.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
    throw std::invalid_argument("pixel count does not match the image size");
  }
  std::vector<T> values(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) values[i] = static_cast<T>(2.0 * pixels[i] - 1.0);
  return Tensor<T>::from_values({height, width, 1}, std::move(values));
}

namespace {

ModelConfig checked(const ModelConfig& config) {
  config.validate();
  return config;
}

}  // namespace

template <typename T>
SpotterModel<T>::SpotterModel(const ModelConfig& config, std::uint64_t seed)
    : config_(checked(config)), charset_(config.charset) {
  Rng rng(seed);
  const int dm = config_.d;
  backbone_ = Backbone<T>(params_, "backbone", dm, rng);
  encoder_ = TransformerEncoder<T>(params_, "encoder", dm, config_.encoder_layers, config_.heads, config_.ffn_dim, rng);
  pixel_embedder_ = PixelEmbedder<T>(params_, "pixel", dm, rng);
  decoder_ = QueryDecoder<T>(params_, "decoder", dm, config_.decoder_layers, config_.heads, config_.ffn_dim,
                             config_.num_queries, rng);
  classifier_ = ClassificationHead<T>(params_, "cls", dm, rng);
  segmenter_ = SegmentationHead<T>(params_, "seg", dm, config_.seg_hidden, rng);
  agg_ = AggModule<T>(params_, "agg", dm, rng);
  recognizer_ = Recognizer<T>(params_, "rec", dm, config_.recognizer_layers, config_.heads, config_.ffn_dim,
                              config_.char_slots, charset_.size(), rng);
}

template <typename T>
QueryOutputs<T> SpotterModel<T>::forward(const Tensor<T>& image, const DecodeOptions& options) const {
  if (image.rank() != 3 || image.dim(2) != 1 || image.dim(0) % 32 != 0 || image.dim(1) % 32 != 0) {
    throw std::invalid_argument("forward expects an [H, W, 1] image with H, W multiples of 32, got " +
                                d::to_string(image.shape()));
  }
  const FeaturePyramid<T> pyramid = backbone_.extract_pyramid(image);
  const TokenSequence<T> tokens = encoder_.encode(pyramid);
  const PixelEmbedding<T> pixel = pixel_embedder_(pyramid.p2);

  const RegionPredictor<T> predict_region = [&](const Tensor<T>& normed_queries) {
    const SemanticFeatures<T> s = semantic_features(normed_queries, pixel);
    const Tensor<T> logits = segmenter_.segment(s.per_query);
    RegionMask region;
    region.queries = logits.dim(0);
    region.height = logits.dim(1);
    region.width = logits.dim(2);
    region.inside.resize(logits.size());
    const auto v = logits.values();
    for (std::size_t i = 0; i < v.size(); ++i) region.inside[i] = v[i] >= T(0);  // sigmoid >= 0.5
    return region;
  };

  const Tensor<T> text = decoder_.decode(tokens, predict_region, options);
  const SemanticFeatures<T> s = semantic_features(text, pixel);
  QueryOutputs<T> out;
  out.class_logits = classifier_.classify(s).logits;
  out.mask_logits = segmenter_.segment(s.per_query);
  out.rec_logits = recognizer_.recognize(agg_.sequence(s.per_query));
  return out;
}

template <typename T>
QueryOutputs<T> SpotterModel<T>::forward(const synth::SceneSample& sample) const {
  return forward(image_tensor<T>(sample.height, sample.width, sample.image));
}

template <typename T>
std::vector<InstanceResult> SpotterModel<T>::infer(int height, int width, std::span<const double> pixels,
                                                   double score_thresh) const {
  d::NoGradGuard no_grad;
  const QueryOutputs<T> out = forward(image_tensor<T>(height, width, pixels));
  return assemble_instances(snapshot(out), charset_, score_thresh, height, width);
}

template Tensor<float> image_tensor<float>(int, int, std::span<const double>);
template Tensor<double> image_tensor<double>(int, int, std::span<const double>);
template class SpotterModel<float>;
template class SpotterModel<double>;

}  // namespace spotter
