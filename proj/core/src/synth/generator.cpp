#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "spotter/random.hpp"
#include "spotter/synthdata.hpp"

namespace spotter::synth {

namespace {

constexpr int kPlacementGrid = 4;
constexpr int kAttemptsPerInstance = 60;
constexpr int kMinGap = 2;  // pixels between neighbouring masks
constexpr double kVerticalProbability = 0.3;

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

struct Box {
  int x0, y0, w, h;
  bool overlaps(const Box& o, int gap) const {
    return x0 < o.x0 + o.w + gap && o.x0 < x0 + w + gap && y0 < o.y0 + o.h + gap && o.y0 < y0 + h + gap;
  }
};

struct WordLayout {
  int length;
  int scale;
  Orientation orientation;
  // Mask box (ink box grown by the one-pixel dilation).
  int mask_w() const {
    return orientation == Orientation::kHorizontal ? length * (kGlyphWidth + 1) * scale - scale + 2
                                                   : kGlyphWidth * scale + 2;
  }
  int mask_h() const {
    return orientation == Orientation::kHorizontal ? kGlyphHeight * scale + 2
                                                   : length * (kGlyphHeight + 1) * scale - scale + 2;
  }
};

int max_length_that_fits(Orientation o, int scale, int width, int height) {
  if (o == Orientation::kHorizontal) return (width - 2 + scale) / ((kGlyphWidth + 1) * scale);
  return (height - 2 + scale) / ((kGlyphHeight + 1) * scale);
}

void render_word(const std::string& text, const WordLayout& layout, int ink_x, int ink_y, int width,
                 std::vector<std::uint8_t>& ink) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    const Glyph& g = glyph_for(text[i]);
    const int gx = layout.orientation == Orientation::kHorizontal
                       ? ink_x + static_cast<int>(i) * (kGlyphWidth + 1) * layout.scale
                       : ink_x;
    const int gy = layout.orientation == Orientation::kVertical
                       ? ink_y + static_cast<int>(i) * (kGlyphHeight + 1) * layout.scale
                       : ink_y;
    for (int r = 0; r < kGlyphHeight; ++r)
      for (int c = 0; c < kGlyphWidth; ++c) {
        if (!g.ink(r, c)) continue;
        for (int sy = 0; sy < layout.scale; ++sy)
          for (int sx = 0; sx < layout.scale; ++sx) {
            const int y = gy + r * layout.scale + sy;
            const int x = gx + c * layout.scale + sx;
            ink[static_cast<std::size_t>(y * width + x)] = 1;
          }
      }
  }
}

std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& src, int height, int width) {
  std::vector<std::uint8_t> out(src.size(), 0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      if (!src[static_cast<std::size_t>(y * width + x)]) continue;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < height && xx >= 0 && xx < width) out[static_cast<std::size_t>(yy * width + xx)] = 1;
        }
    }
  return out;
}

}  // namespace

SceneSample generate_sample(const GenConfig& config, std::uint64_t seed) {
  const int H = config.height, W = config.width;
  if (H <= 0 || W <= 0 || H % 32 != 0 || W % 32 != 0) {
    throw std::invalid_argument("image size must be a positive multiple of 32, got " + std::to_string(H) + "x" +
                                std::to_string(W));
  }
  if (config.max_instances < 1) throw std::invalid_argument("max_instances must be >= 1");
  if (config.min_length < 1 || config.max_length < config.min_length) {
    throw std::invalid_argument("invalid word length range");
  }
  if (!(config.noise_level >= 0.0)) throw std::invalid_argument("noise_level must be non-negative");
  for (char c : config.charset.symbols()) glyph_for(c);

  Rng rng(seed);
  SceneSample sample;
  char id[32];
  std::snprintf(id, sizeof id, "%08llu", static_cast<unsigned long long>(seed));
  sample.id = id;
  sample.height = H;
  sample.width = W;
  sample.kind = SampleKind::kFull;
  sample.seed = seed;

  const double background = quantize(rng.uniform(0.0, 0.3));
  const int wanted = rng.uniform_int(1, config.max_instances);
  std::vector<Box> placed;
  std::vector<std::uint8_t> all_ink(static_cast<std::size_t>(H * W), 0);
  std::vector<double> foreground;

  for (int inst = 0; inst < wanted; ++inst) {
    for (int attempt = 0; attempt < kAttemptsPerInstance; ++attempt) {
      WordLayout layout{};
      layout.orientation =
          rng.bernoulli(kVerticalProbability) ? Orientation::kVertical : Orientation::kHorizontal;
      layout.scale = rng.uniform_int(1, 2);
      const int fit = std::min(config.max_length, max_length_that_fits(layout.orientation, layout.scale, W, H));
      if (fit < config.min_length) continue;
      layout.length = rng.uniform_int(config.min_length, fit);
      const int mw = layout.mask_w(), mh = layout.mask_h();
      const Box box{kPlacementGrid * rng.uniform_int(0, (W - mw) / kPlacementGrid),
                    kPlacementGrid * rng.uniform_int(0, (H - mh) / kPlacementGrid), mw, mh};
      if (std::any_of(placed.begin(), placed.end(), [&](const Box& b) { return b.overlaps(box, kMinGap); })) {
        continue;
      }
      std::string text;
      for (int i = 0; i < layout.length; ++i) {
        text.push_back(config.charset.symbols()[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<int>(config.charset.symbols().size()) - 1))]);
      }
      std::vector<std::uint8_t> ink(static_cast<std::size_t>(H * W), 0);
      render_word(text, layout, box.x0 + 1, box.y0 + 1, W, ink);
      for (std::size_t i = 0; i < ink.size(); ++i)
        if (ink[i]) all_ink[i] = static_cast<std::uint8_t>(placed.size() + 1);
      placed.push_back(box);
      foreground.push_back(quantize(rng.uniform(0.7, 1.0)));
      sample.instances.push_back({text, layout.orientation, dilate(ink, H, W)});
      break;
    }
  }

  if (sample.instances.empty()) {
    // Last resort: the shortest horizontal word at the origin always fits.
    WordLayout layout{config.min_length, 1, Orientation::kHorizontal};
    if (layout.mask_w() > W || layout.mask_h() > H) throw std::invalid_argument("image too small for any word");
    std::string text(static_cast<std::size_t>(layout.length), config.charset.symbols()[0]);
    std::vector<std::uint8_t> ink(static_cast<std::size_t>(H * W), 0);
    render_word(text, layout, 1, 1, W, ink);
    for (std::size_t i = 0; i < ink.size(); ++i)
      if (ink[i]) all_ink[i] = 1;
    foreground.push_back(quantize(0.85));
    sample.instances.push_back({text, layout.orientation, dilate(ink, H, W)});
  }

  sample.image.assign(static_cast<std::size_t>(H * W), background);
  for (std::size_t i = 0; i < sample.image.size(); ++i) {
    if (all_ink[i]) {
      sample.image[i] = foreground[static_cast<std::size_t>(all_ink[i] - 1)];
    } else if (config.noise_level > 0.0) {
      sample.image[i] = quantize(background + rng.uniform(-config.noise_level, config.noise_level));
    }
  }
  return sample;
}

SceneSample degrade_annotation(const SceneSample& sample, SampleKind target, std::uint64_t seed) {
  if (sample.kind != SampleKind::kFull) throw std::invalid_argument("degrade_annotation expects a Full sample");
  if (target == SampleKind::kFull) return sample;
  SceneSample out = sample;
  out.kind = target;
  out.instances.clear();
  if (target == SampleKind::kTextOnly) {
    for (const auto& inst : sample.instances) out.instances.push_back({inst.transcription, std::nullopt, {}});
    return out;
  }
  if (sample.instances.empty()) throw std::invalid_argument("cannot build a weak label from zero instances");
  std::vector<std::size_t> areas;
  for (const auto& inst : sample.instances) {
    areas.push_back(static_cast<std::size_t>(std::count(inst.mask.begin(), inst.mask.end(), 1)));
  }
  const std::size_t best = *std::max_element(areas.begin(), areas.end());
  std::vector<std::size_t> tied;
  for (std::size_t i = 0; i < areas.size(); ++i)
    if (areas[i] == best) tied.push_back(i);
  Rng rng(seed);
  const std::size_t pick = tied[static_cast<std::size_t>(rng.next() % tied.size())];
  out.instances.push_back({sample.instances[pick].transcription, std::nullopt, {}});
  return out;
}

}  // namespace spotter::synth
