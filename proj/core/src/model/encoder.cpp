#include "spotter/encoder.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace spotter {

namespace d = spotter::diff;

namespace {
constexpr int kStemWidth = 16;
constexpr int kC2Width = 32;
constexpr int kC3Width = 64;
constexpr int kC4Width = 64;
constexpr int kC5Width = 64;
}  // namespace

template <typename T>
Backbone<T>::Backbone(nn::ParameterSet<T>& params, const std::string& prefix, int dm, Rng& rng)
    : stem1_(params, prefix + ".stem1", 1, kStemWidth, 3, 2, rng),
      stem2_(params, prefix + ".stem2", kStemWidth, kC2Width, 3, 2, rng),
      stage3_(params, prefix + ".stage3", kC2Width, kC3Width, 3, 2, rng),
      stage4_(params, prefix + ".stage4", kC3Width, kC4Width, 3, 2, rng),
      stage5_(params, prefix + ".stage5", kC4Width, kC5Width, 3, 2, rng),
      lateral2_(params, prefix + ".lateral2", kC2Width, dm, 1, 1, rng),
      lateral3_(params, prefix + ".lateral3", kC3Width, dm, 1, 1, rng),
      lateral4_(params, prefix + ".lateral4", kC4Width, dm, 1, 1, rng),
      lateral5_(params, prefix + ".lateral5", kC5Width, dm, 1, 1, rng) {}

template <typename T>
FeaturePyramid<T> Backbone<T>::extract_pyramid(const Tensor<T>& image) const {
  if (image.rank() != 3 || image.dim(2) != 1) {
    throw d::ShapeError("backbone expects an [H, W, 1] image, got " + d::to_string(image.shape()));
  }
  if (image.dim(0) % 32 != 0 || image.dim(1) % 32 != 0) {
    throw d::ShapeError("image extents must be multiples of 32, got " + d::to_string(image.shape()));
  }
  const Tensor<T> c2 = d::relu(stem2_(d::relu(stem1_(image))));
  const Tensor<T> c3 = d::relu(stage3_(c2));
  const Tensor<T> c4 = d::relu(stage4_(c3));
  const Tensor<T> c5 = d::relu(stage5_(c4));

  FeaturePyramid<T> out;
  out.p5 = lateral5_(c5);
  out.p4 = d::add(lateral4_(c4), d::upsample_nearest(out.p5, 2));
  out.p3 = d::add(lateral3_(c3), d::upsample_nearest(out.p4, 2));
  out.p2 = d::add(lateral2_(c2), d::upsample_nearest(out.p3, 2));
  return out;
}

template <typename T>
Tensor<T> pos2d(int h, int w, int dm) {
  if (h <= 0 || w <= 0) throw d::ShapeError("pos2d extents must be positive");
  if (dm <= 0 || dm % 4 != 0) throw d::ShapeError("pos2d channel count must be divisible by 4, got " + std::to_string(dm));
  constexpr double kTemperature = 10000.0;
  constexpr double kScale = 2.0 * std::numbers::pi;
  const int half = dm / 2;
  std::vector<T> values(static_cast<std::size_t>(h) * w * dm);
  auto encode = [&](double p, int channel) {
    const double freq = std::pow(kTemperature, 2.0 * (channel / 2) / half);
    return static_cast<T>(channel % 2 == 0 ? std::sin(p / freq) : std::cos(p / freq));
  };
  for (int y = 0; y < h; ++y) {
    const double py = (y + 1) / (h + 1e-6) * kScale;
    for (int x = 0; x < w; ++x) {
      const double px = (x + 1) / (w + 1e-6) * kScale;
      T* dst = values.data() + (static_cast<std::size_t>(y) * w + x) * dm;
      for (int c = 0; c < half; ++c) {
        dst[c] = encode(py, c);
        dst[half + c] = encode(px, c);
      }
    }
  }
  return Tensor<T>::from_values({h, w, dm}, std::move(values));
}

template <typename T>
TransformerEncoder<T>::TransformerEncoder(nn::ParameterSet<T>& params, const std::string& prefix, int dm,
                                          int layers, int heads, int ffn_dim, Rng& rng)
    : d_(dm) {
  for (int i = 0; i < layers; ++i) {
    const std::string p = prefix + ".layer" + std::to_string(i);
    layers_.push_back(Layer{nn::LayerNorm<T>(params, p + ".norm1", dm, rng),
                            nn::LayerNorm<T>(params, p + ".norm2", dm, rng),
                            nn::MultiHeadAttention<T>(params, p + ".attn", dm, heads, rng),
                            nn::FeedForward<T>(params, p + ".ffn", dm, ffn_dim, rng)});
  }
  final_norm_ = nn::LayerNorm<T>(params, prefix + ".final_norm", dm, rng);
  level_embed_ = params.create(prefix + ".level_embed", {3, dm}, diff::Init::kUniformSmall, rng);
}

template <typename T>
Tensor<T> TransformerEncoder<T>::apply_layers(const Tensor<T>& tokens) const {
  const int L = tokens.dim(0);
  Tensor<T> x = d::reshape(tokens, {1, L, d_});
  for (const auto& layer : layers_) {
    const Tensor<T> h = layer.norm1(x);
    x = d::add(x, layer.attn(h, h));
    x = d::add(x, layer.ffn(layer.norm2(x)));
  }
  return d::reshape(final_norm_(x), {L, d_});
}

template <typename T>
TokenSequence<T> TransformerEncoder<T>::encode(const FeaturePyramid<T>& pyramid) const {
  TokenSequence<T> seq;
  const Tensor<T>* levels[3] = {&pyramid.p5, &pyramid.p4, &pyramid.p3};
  std::vector<Tensor<T>> parts;
  int offset = 0;
  for (int i = 0; i < 3; ++i) {
    const Tensor<T>& f = *levels[i];
    if (f.rank() != 3 || f.dim(2) != d_) {
      throw d::ShapeError("pyramid level must be [h, w, " + std::to_string(d_) + "], got " + d::to_string(f.shape()));
    }
    const int h = f.dim(0), w = f.dim(1);
    seq.level_offsets[static_cast<std::size_t>(i)] = offset;
    seq.level_heights[static_cast<std::size_t>(i)] = h;
    seq.level_widths[static_cast<std::size_t>(i)] = w;
    offset += h * w;
    const int idx[1] = {i};
    const Tensor<T> level = d::index_select(level_embed_, 0, std::span<const int>(idx));  // [1, d]
    Tensor<T> flat = d::reshape(d::add(f, pos2d<T>(h, w, d_)), {h * w, d_});
    parts.push_back(d::add(flat, level));
  }
  if (offset > kMaxTokens) {
    throw d::ShapeError("encoder token count " + std::to_string(offset) + " exceeds " + std::to_string(kMaxTokens));
  }
  seq.tokens = apply_layers(d::concat(parts, 0));
  return seq;
}

template Tensor<float> pos2d<float>(int, int, int);
template Tensor<double> pos2d<double>(int, int, int);
template class Backbone<float>;
template class Backbone<double>;
template class TransformerEncoder<float>;
template class TransformerEncoder<double>;

}  // namespace spotter
