#include "spotter/query_decoder.hpp"

#include <algorithm>
#include <stdexcept>

namespace spotter {

namespace d = spotter::diff;

template <typename T>
PixelEmbedder<T>::PixelEmbedder(nn::ParameterSet<T>& params, const std::string& prefix, int dm, Rng& rng)
    : projection(params, prefix + ".proj", dm, dm, rng) {}

template <typename T>
PixelEmbedding<T> PixelEmbedder<T>::operator()(const Tensor<T>& p2) const {
  if (p2.rank() != 3) throw d::ShapeError("pixel embedding expects [h, w, d], got " + d::to_string(p2.shape()));
  return {projection(p2)};
}

template <typename T>
SemanticFeatures<T> semantic_features(const Tensor<T>& text, const PixelEmbedding<T>& pixel) {
  if (text.rank() != 2 || pixel.map.rank() != 3 || text.dim(1) != pixel.map.dim(2)) {
    throw d::ShapeError("semantic_features channel mismatch: " + d::to_string(text.shape()) + " vs " +
                        d::to_string(pixel.map.shape()));
  }
  const int n = text.dim(0), dm = text.dim(1);
  const int h = pixel.map.dim(0), w = pixel.map.dim(1);
  SemanticFeatures<T> out;
  out.text_embeddings = text;
  out.per_query = d::mul(d::reshape(text, {n, 1, 1, dm}), d::reshape(pixel.map, {1, h, w, dm}));
  return out;
}

RegionMask RegionMask::full(int queries, int height, int width) {
  return {queries, height, width,
          std::vector<std::uint8_t>(static_cast<std::size_t>(queries) * height * width, 1)};
}

bool RegionMask::empty_for(int query) const {
  const auto begin = inside.begin() + static_cast<std::ptrdiff_t>(query) * height * width;
  return std::none_of(begin, begin + static_cast<std::ptrdiff_t>(height) * width, [](std::uint8_t v) { return v != 0; });
}

template <typename T>
nn::BlockMask cross_attention_mask(const RegionMask& region, const TokenSequence<T>& tokens) {
  const int L = tokens.length();
  nn::BlockMask mask{std::vector<std::uint8_t>(static_cast<std::size_t>(region.queries) * L, 1),
                     {1, 1, region.queries, L}};
  for (int q = 0; q < region.queries; ++q) {
    std::uint8_t* row = mask.blocked.data() + static_cast<std::size_t>(q) * L;
    if (region.empty_for(q)) {
      std::fill(row, row + L, 0);
      continue;
    }
    const std::uint8_t* reg = region.inside.data() + static_cast<std::size_t>(q) * region.height * region.width;
    for (int lvl = 0; lvl < 3; ++lvl) {
      const int s = TokenSequence<T>::kStrideFromP2[static_cast<std::size_t>(lvl)];
      const int th = tokens.level_heights[static_cast<std::size_t>(lvl)];
      const int tw = tokens.level_widths[static_cast<std::size_t>(lvl)];
      const int off = tokens.level_offsets[static_cast<std::size_t>(lvl)];
      for (int y = 0; y < region.height; ++y)
        for (int x = 0; x < region.width; ++x) {
          if (!reg[y * region.width + x]) continue;
          const int ty = std::min(y / s, th - 1), tx = std::min(x / s, tw - 1);
          row[off + ty * tw + tx] = 0;
        }
    }
  }
  return mask;
}

template <typename T>
QueryDecoder<T>::QueryDecoder(nn::ParameterSet<T>& params, const std::string& prefix, int dm, int layers,
                              int heads, int ffn_dim, int num_queries, Rng& rng)
    : d_(dm) {
  queries_ = params.create(prefix + ".queries", {num_queries, dm}, diff::Init::kUniformSmall, rng);
  for (int i = 0; i < layers; ++i) {
    const std::string p = prefix + ".layer" + std::to_string(i);
    layers_.push_back(Layer{nn::LayerNorm<T>(params, p + ".norm_cross", dm, rng),
                            nn::LayerNorm<T>(params, p + ".norm_self", dm, rng),
                            nn::LayerNorm<T>(params, p + ".norm_ffn", dm, rng),
                            nn::MultiHeadAttention<T>(params, p + ".cross", dm, heads, rng),
                            nn::MultiHeadAttention<T>(params, p + ".self", dm, heads, rng),
                            nn::FeedForward<T>(params, p + ".ffn", dm, ffn_dim, rng)});
  }
  final_norm_ = nn::LayerNorm<T>(params, prefix + ".final_norm", dm, rng);
}

template <typename T>
Tensor<T> QueryDecoder<T>::decode(const TokenSequence<T>& tokens, const RegionPredictor<T>& predict_region,
                                  const DecodeOptions& options) const {
  const int n = num_queries();
  const int L = tokens.length();
  const Tensor<T> memory = d::reshape(tokens.tokens, {1, L, d_});
  Tensor<T> q = d::reshape(queries_, {1, n, d_});
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const Layer& layer = layers_[li];
    const int layer_no = static_cast<int>(li) + 1;
    std::optional<nn::BlockMask> mask;
    if (layer_no > 1 && !options.unmasked) {
      std::optional<RegionMask> region;
      if (options.region_override) region = options.region_override(layer_no);
      if (!region) {
        if (!predict_region) throw std::invalid_argument("masked decoding needs a region predictor");
        d::NoGradGuard no_grad;
        region = predict_region(final_norm_(d::reshape(q.detach(), {n, d_})));
      }
      if (region->queries != n) throw d::ShapeError("region mask query count mismatch");
      mask = cross_attention_mask(*region, tokens);
    }
    q = d::add(q, layer.cross(layer.norm_cross(q), memory, mask ? &*mask : nullptr));
    const Tensor<T> h = layer.norm_self(q);
    q = d::add(q, layer.self(h, h));
    q = d::add(q, layer.ffn(layer.norm_ffn(q)));
  }
  return final_norm_(d::reshape(q, {n, d_}));
}

template SemanticFeatures<float> semantic_features(const Tensor<float>&, const PixelEmbedding<float>&);
template SemanticFeatures<double> semantic_features(const Tensor<double>&, const PixelEmbedding<double>&);
template nn::BlockMask cross_attention_mask(const RegionMask&, const TokenSequence<float>&);
template nn::BlockMask cross_attention_mask(const RegionMask&, const TokenSequence<double>&);
template class PixelEmbedder<float>;
template class PixelEmbedder<double>;
template class QueryDecoder<float>;
template class QueryDecoder<double>;

}  // namespace spotter
