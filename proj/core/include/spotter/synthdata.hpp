#pragma once

// Synthetic scene-text samples: glyph font, deterministic renderer, annotation
// degradation (full -> text-only / weak) and the on-disk dataset format.
//
// Dataset directory:
//   images/<id>.pgm     binary PGM (P5), maxval 255, byte = round(255 * value)
//   annotations.jsonl   {id, kind, H, W, seed, instances: [{transcription, orientation, rle}]}
// `rle` alternates zero-runs and one-runs over the row-major mask, starting
// with a (possibly empty) zero-run, and sums to H*W. Text-only and weak
// records omit `rle` and `orientation`.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spotter::synth {

/// Ordered symbol table with a trailing [PAD] class.
class Charset {
 public:
  explicit Charset(std::string symbols);

  /// 10 letters plus one digit filler, 12 classes with [PAD].
  static Charset desk();
  /// A-Z and 0-9, 37 classes with [PAD].
  static Charset english();

  /// Class count including [PAD].
  int size() const { return static_cast<int>(symbols_.size()) + 1; }
  int pad_index() const { return static_cast<int>(symbols_.size()); }
  const std::string& symbols() const { return symbols_; }
  bool contains(char c) const { return symbols_.find(c) != std::string::npos; }

  /// Throws std::invalid_argument for characters outside the set.
  int index_of(char c) const;
  char symbol(int index) const;

  /// Indices of `text` padded with [PAD] to `length`. Throws if too long.
  std::vector<int> encode(const std::string& text, int length) const;
  /// Symbols up to (not including) the first [PAD].
  std::string decode(std::span<const int> indices) const;

  bool operator==(const Charset&) const = default;

 private:
  std::string symbols_;
};

inline constexpr int kGlyphWidth = 5;
inline constexpr int kGlyphHeight = 7;

struct Glyph {
  char symbol;
  std::array<std::uint8_t, kGlyphWidth * kGlyphHeight> bitmap;  // row-major, 1 = ink

  bool ink(int row, int col) const { return bitmap[static_cast<std::size_t>(row * kGlyphWidth + col)] != 0; }
};

/// Every glyph in the built-in 5x7 font (A-Z, 0-9).
std::span<const Glyph> font();
/// Throws std::invalid_argument for symbols without a glyph.
const Glyph& glyph_for(char symbol);

enum class SampleKind { kFull, kTextOnly, kWeak };
enum class Orientation { kHorizontal, kVertical };

/// "full" | "text" | "weak"
std::string kind_name(SampleKind kind);
SampleKind parse_kind(const std::string& name);
std::string orientation_name(Orientation o);
Orientation parse_orientation(const std::string& name);

struct InstanceLabel {
  std::string transcription;
  std::optional<Orientation> orientation;  // Full only
  std::vector<std::uint8_t> mask;          // H*W, row-major; empty unless Full

  bool operator==(const InstanceLabel&) const = default;
};

struct SceneSample {
  std::string id;
  int height = 0;
  int width = 0;
  std::vector<double> image;  // H*W grayscale in [0, 1], quantized to k/255
  SampleKind kind = SampleKind::kFull;
  std::vector<InstanceLabel> instances;
  std::uint64_t seed = 0;

  bool operator==(const SceneSample&) const = default;
};

struct GenConfig {
  int height = 64;
  int width = 64;
  int max_instances = 2;
  Charset charset = Charset::desk();
  double noise_level = 0.05;
  int min_length = 2;
  int max_length = 8;
};

/// Pure function of (config, seed). Renders 1..max_instances disjoint words
/// on a 4-pixel placement grid; each mask is the word's ink dilated by one
/// pixel. Throws std::invalid_argument for sizes that are not multiples of 32.
SceneSample generate_sample(const GenConfig& config, std::uint64_t seed);

/// Drops masks (TextOnly) or keeps only the largest-area instance (Weak,
/// ties broken by `seed`). The image is untouched.
SceneSample degrade_annotation(const SceneSample& sample, SampleKind target, std::uint64_t seed);

/// Raised for malformed dataset files; the message names file, line and reason.
class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_dataset(std::span<const SceneSample> samples, const std::filesystem::path& dir);
/// A directory without annotations.jsonl reads as an empty dataset.
std::vector<SceneSample> read_dataset(const std::filesystem::path& dir);

std::vector<std::int64_t> rle_encode(std::span<const std::uint8_t> mask);
/// Throws DatasetError when the runs do not sum to `total`.
std::vector<std::uint8_t> rle_decode(std::span<const std::int64_t> runs, std::size_t total);

struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;
};

void write_pgm(const std::filesystem::path& path, int height, int width, std::span<const double> pixels);
GrayImage read_pgm(const std::filesystem::path& path);

}  // namespace spotter::synth
