#include <algorithm>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "spotter/synthdata.hpp"

namespace spotter::synth {

namespace {

struct GlyphRows {
  char symbol;
  std::string_view rows[kGlyphHeight];
};

// clang-format off
constexpr GlyphRows kFontRows[] = {
    {'A', {".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"}},
    {'B', {"####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."}},
    {'C', {".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."}},
    {'D', {"####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."}},
    {'E', {"#####", "#....", "#....", "####.", "#....", "#....", "#####"}},
    {'F', {"#####", "#....", "#....", "####.", "#....", "#....", "#...."}},
    {'G', {".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"}},
    {'H', {"#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"}},
    {'I', {".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."}},
    {'J', {"..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."}},
    {'K', {"#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"}},
    {'L', {"#....", "#....", "#....", "#....", "#....", "#....", "#####"}},
    {'M', {"#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"}},
    {'N', {"#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"}},
    {'O', {".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."}},
    {'P', {"####.", "#...#", "#...#", "####.", "#....", "#....", "#...."}},
    {'Q', {".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"}},
    {'R', {"####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"}},
    {'S', {".####", "#....", "#....", ".###.", "....#", "....#", "####."}},
    {'T', {"#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."}},
    {'U', {"#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."}},
    {'V', {"#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."}},
    {'W', {"#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."}},
    {'X', {"#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"}},
    {'Y', {"#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."}},
    {'Z', {"#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"}},
    {'0', {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."}},
    {'1', {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."}},
    {'2', {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"}},
    {'3', {"#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."}},
    {'4', {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."}},
    {'5', {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."}},
    {'6', {"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."}},
    {'7', {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."}},
    {'8', {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."}},
    {'9', {".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."}},
};
// clang-format on

std::vector<Glyph> build_font() {
  std::vector<Glyph> glyphs;
  for (const auto& g : kFontRows) {
    Glyph out{g.symbol, {}};
    for (int r = 0; r < kGlyphHeight; ++r)
      for (int c = 0; c < kGlyphWidth; ++c)
        out.bitmap[static_cast<std::size_t>(r * kGlyphWidth + c)] = g.rows[r][static_cast<std::size_t>(c)] == '#';
    glyphs.push_back(out);
  }
  return glyphs;
}

}  // namespace

std::span<const Glyph> font() {
  static const std::vector<Glyph> glyphs = build_font();
  return glyphs;
}

const Glyph& glyph_for(char symbol) {
  for (const auto& g : font())
    if (g.symbol == symbol) return g;
  throw std::invalid_argument(std::string("no glyph for symbol '") + symbol + "'");
}

Charset::Charset(std::string symbols) : symbols_(std::move(symbols)) {
  if (symbols_.empty()) throw std::invalid_argument("charset must contain at least one symbol");
  std::string sorted = symbols_;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw std::invalid_argument("charset symbols must be unique: " + symbols_);
  }
}

Charset Charset::desk() { return Charset("ACEHKLMNRT7"); }

Charset Charset::english() { return Charset("ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"); }

int Charset::index_of(char c) const {
  const auto pos = symbols_.find(c);
  if (pos == std::string::npos) throw std::invalid_argument(std::string("symbol '") + c + "' not in charset");
  return static_cast<int>(pos);
}

char Charset::symbol(int index) const {
  if (index < 0 || index >= pad_index()) throw std::out_of_range("charset index " + std::to_string(index));
  return symbols_[static_cast<std::size_t>(index)];
}

std::vector<int> Charset::encode(const std::string& text, int length) const {
  if (static_cast<int>(text.size()) > length) {
    throw std::invalid_argument("transcription '" + text + "' longer than " + std::to_string(length));
  }
  std::vector<int> out(static_cast<std::size_t>(length), pad_index());
  for (std::size_t i = 0; i < text.size(); ++i) out[i] = index_of(text[i]);
  return out;
}

std::string Charset::decode(std::span<const int> indices) const {
  std::string out;
  for (int i : indices) {
    if (i == pad_index()) break;
    out.push_back(symbol(i));
  }
  return out;
}

}  // namespace spotter::synth
