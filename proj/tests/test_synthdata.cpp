#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "spotter/synthdata.hpp"

namespace spotter::synth {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("spotter_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::size_t area(const InstanceLabel& inst) {
  return static_cast<std::size_t>(std::count(inst.mask.begin(), inst.mask.end(), 1));
}

TEST(Charset, DeskHasTwelveClasses) {
  const Charset cs = Charset::desk();
  EXPECT_EQ(cs.size(), 12);
  EXPECT_EQ(cs.pad_index(), 11);
  const std::set<char> unique(cs.symbols().begin(), cs.symbols().end());
  EXPECT_EQ(unique.size(), cs.symbols().size());
  EXPECT_EQ(Charset::english().size(), 37);
}

TEST(Charset, EncodePadsAndDecodeStopsAtPad) {
  const Charset cs = Charset::desk();
  const auto idx = cs.encode("AC", 4);
  ASSERT_EQ(idx.size(), 4u);
  EXPECT_EQ(idx[0], cs.index_of('A'));
  EXPECT_EQ(idx[2], cs.pad_index());
  EXPECT_EQ(cs.decode(idx), "AC");
  EXPECT_THROW(cs.encode("ACEHK", 4), std::invalid_argument);
  EXPECT_THROW(cs.index_of('Z'), std::invalid_argument);
}

TEST(Glyphs, OneDistinctGlyphPerSymbol) {
  const auto glyphs = font();
  std::set<char> symbols;
  std::set<std::vector<std::uint8_t>> bitmaps;
  for (const Glyph& g : glyphs) {
    symbols.insert(g.symbol);
    bitmaps.insert(std::vector<std::uint8_t>(g.bitmap.begin(), g.bitmap.end()));
    EXPECT_GT(std::count(g.bitmap.begin(), g.bitmap.end(), 1), 0) << g.symbol;
  }
  EXPECT_EQ(symbols.size(), glyphs.size());
  EXPECT_EQ(bitmaps.size(), glyphs.size());
  const Charset english = Charset::english();
  for (char c : english.symbols()) EXPECT_NO_THROW(glyph_for(c)) << c;
}

TEST(Generate, SingleWordIsDeterministic) {
  GenConfig cfg;
  cfg.max_instances = 1;
  const SceneSample a = generate_sample(cfg, 7);
  const SceneSample b = generate_sample(cfg, 7);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.instances.size(), 1u);
  EXPECT_TRUE(a.instances[0].orientation.has_value());
  EXPECT_GT(area(a.instances[0]), 0u);
  EXPECT_NE(generate_sample(cfg, 8).image, a.image);
}

TEST(Generate, MasksPairwiseDisjoint) {
  GenConfig cfg;
  cfg.max_instances = 3;
  for (std::uint64_t seed : {11ull, 12ull, 13ull, 14ull, 15ull}) {
    const SceneSample s = generate_sample(cfg, seed);
    for (std::size_t p = 0; p < s.image.size(); ++p) {
      int owners = 0;
      for (const auto& inst : s.instances) owners += inst.mask[p];
      EXPECT_LE(owners, 1) << "seed " << seed << " pixel " << p;
    }
  }
}

TEST(Generate, NoiseFreeBackgroundIsExact) {
  GenConfig cfg;
  cfg.max_instances = 3;
  cfg.noise_level = 0.0;
  const SceneSample s = generate_sample(cfg, 11);
  std::set<double> background;
  for (std::size_t p = 0; p < s.image.size(); ++p) {
    bool covered = false;
    for (const auto& inst : s.instances) covered = covered || inst.mask[p];
    if (!covered) background.insert(s.image[p]);
  }
  ASSERT_EQ(background.size(), 1u);
  EXPECT_LE(*background.begin(), 0.3);
}

TEST(Generate, IntensitiesAndMaskExactness) {
  GenConfig cfg;
  cfg.max_instances = 3;
  for (std::uint64_t seed = 100; seed < 140; ++seed) {
    const SceneSample s = generate_sample(cfg, seed);
    ASSERT_GE(s.instances.size(), 1u);
    ASSERT_LE(s.instances.size(), 3u);
    for (std::size_t p = 0; p < s.image.size(); ++p) {
      const double v = s.image[p];
      EXPECT_NEAR(v * 255.0, std::round(v * 255.0), 1e-9);
      // Foreground (>= 0.7) only occurs inside some instance mask.
      if (v >= 0.7 - 1e-12) {
        bool covered = false;
        for (const auto& inst : s.instances) covered = covered || inst.mask[p];
        EXPECT_TRUE(covered) << "seed " << seed << " pixel " << p;
      }
    }
    for (const auto& inst : s.instances) {
      EXPECT_GE(inst.transcription.size(), 2u);
      EXPECT_LE(inst.transcription.size(), 8u);
      for (char c : inst.transcription) EXPECT_TRUE(cfg.charset.contains(c));
    }
  }
}

TEST(Generate, BothOrientationsOccur) {
  GenConfig cfg;
  std::set<Orientation> seen;
  for (std::uint64_t seed = 0; seed < 60; ++seed)
    for (const auto& inst : generate_sample(cfg, seed).instances) seen.insert(*inst.orientation);
  EXPECT_EQ(seen.size(), 2u);
}

TEST(Generate, RejectsBadSizes) {
  GenConfig cfg;
  cfg.height = 48;
  EXPECT_THROW(generate_sample(cfg, 0), std::invalid_argument);
  cfg.height = 64;
  cfg.max_instances = 0;
  EXPECT_THROW(generate_sample(cfg, 0), std::invalid_argument);
}

TEST(Generate, CrowdedSceneStillHasAnInstance) {
  GenConfig cfg;
  cfg.height = 32;
  cfg.width = 32;
  cfg.max_instances = 20;
  for (std::uint64_t seed = 0; seed < 20; ++seed) EXPECT_GE(generate_sample(cfg, seed).instances.size(), 1u);
}

SceneSample two_instance_sample(std::size_t area_a, std::size_t area_b) {
  SceneSample s;
  s.id = "x";
  s.height = 32;
  s.width = 32;
  s.image.assign(32 * 32, 0.0);
  InstanceLabel a{"AB", Orientation::kHorizontal, std::vector<std::uint8_t>(32 * 32, 0)};
  InstanceLabel b{"CD", Orientation::kHorizontal, std::vector<std::uint8_t>(32 * 32, 0)};
  std::fill_n(a.mask.begin(), area_a, 1);
  std::fill_n(b.mask.begin() + 500, area_b, 1);
  s.instances = {a, b};
  return s;
}

TEST(Degrade, TextOnlyKeepsAllTranscriptions) {
  const SceneSample full = two_instance_sample(40, 90);
  const SceneSample t = degrade_annotation(full, SampleKind::kTextOnly, 0);
  EXPECT_EQ(t.kind, SampleKind::kTextOnly);
  ASSERT_EQ(t.instances.size(), 2u);
  EXPECT_EQ(t.instances[0].transcription, "AB");
  EXPECT_EQ(t.instances[1].transcription, "CD");
  for (const auto& inst : t.instances) {
    EXPECT_TRUE(inst.mask.empty());
    EXPECT_FALSE(inst.orientation.has_value());
  }
  EXPECT_EQ(t.image, full.image);
}

TEST(Degrade, WeakKeepsLargestArea) {
  const SceneSample w = degrade_annotation(two_instance_sample(40, 90), SampleKind::kWeak, 0);
  ASSERT_EQ(w.instances.size(), 1u);
  EXPECT_EQ(w.instances[0].transcription, "CD");
}

TEST(Degrade, WeakTieBrokenBySeedDeterministically) {
  const SceneSample full = two_instance_sample(50, 50);
  std::set<std::string> picks;
  for (std::uint64_t seed = 0; seed < 16; ++seed) {
    const auto a = degrade_annotation(full, SampleKind::kWeak, seed).instances[0].transcription;
    EXPECT_EQ(a, degrade_annotation(full, SampleKind::kWeak, seed).instances[0].transcription);
    picks.insert(a);
  }
  EXPECT_EQ(picks.size(), 2u);
}

TEST(Degrade, WeakOfSingleInstance) {
  GenConfig cfg;
  cfg.max_instances = 1;
  const SceneSample full = generate_sample(cfg, 3);
  const SceneSample w = degrade_annotation(full, SampleKind::kWeak, 3);
  ASSERT_EQ(w.instances.size(), 1u);
  EXPECT_EQ(w.instances[0].transcription, full.instances[0].transcription);
  EXPECT_THROW(degrade_annotation(w, SampleKind::kTextOnly, 0), std::invalid_argument);
}

TEST(Rle, RoundTripAndLeadingZeroRun) {
  const std::vector<std::uint8_t> mask = {1, 1, 0, 0, 0, 1, 0};
  const auto runs = rle_encode(mask);
  EXPECT_EQ(runs, (std::vector<std::int64_t>{0, 2, 3, 1, 1}));
  EXPECT_EQ(rle_decode(runs, mask.size()), mask);
  EXPECT_THROW(rle_decode(runs, mask.size() + 1), DatasetError);
}

std::vector<SceneSample> mixed_samples(int count) {
  GenConfig cfg;
  cfg.max_instances = 3;
  std::vector<SceneSample> out;
  for (int i = 0; i < count; ++i) {
    SceneSample s = generate_sample(cfg, static_cast<std::uint64_t>(500 + i));
    if (i % 3 == 1) s = degrade_annotation(s, SampleKind::kTextOnly, i);
    if (i % 3 == 2) s = degrade_annotation(s, SampleKind::kWeak, i);
    out.push_back(std::move(s));
  }
  return out;
}

TEST(Dataset, RoundTripTenSamples) {
  const fs::path dir = scratch_dir("roundtrip");
  const auto samples = mixed_samples(10);
  write_dataset(samples, dir);
  EXPECT_EQ(read_dataset(dir), samples);
}

TEST(Dataset, EmptyDirectoryReadsEmpty) {
  EXPECT_TRUE(read_dataset(scratch_dir("empty")).empty());
}

TEST(Dataset, BadRleLengthNamesTheLine) {
  const fs::path dir = scratch_dir("badrle");
  write_dataset(mixed_samples(3), dir);
  std::vector<std::string> lines;
  {
    std::ifstream in(dir / "annotations.jsonl");
    for (std::string l; std::getline(in, l);) lines.push_back(l);
  }
  ASSERT_EQ(lines.size(), 3u);
  // The first record is Full; lengthen its first run so the runs overshoot H*W.
  const auto pos = lines[0].find("\"rle\":[");
  ASSERT_NE(pos, std::string::npos);
  lines[0].insert(pos + 7, "5000,");
  {
    std::ofstream out(dir / "annotations.jsonl");
    for (const auto& l : lines) out << l << '\n';
  }
  try {
    read_dataset(dir);
    FAIL() << "expected DatasetError";
  } catch (const DatasetError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("annotations.jsonl:1:"), std::string::npos) << msg;
    EXPECT_NE(msg.find("rle"), std::string::npos) << msg;
  }
}

TEST(Dataset, MalformedJsonAndMissingImageRejected) {
  const fs::path dir = scratch_dir("malformed");
  write_dataset(mixed_samples(2), dir);
  {
    std::ofstream out(dir / "annotations.jsonl", std::ios::app);
    out << "{not json\n";
  }
  EXPECT_THROW(read_dataset(dir), DatasetError);

  const fs::path dir2 = scratch_dir("missing_image");
  const auto samples = mixed_samples(2);
  write_dataset(samples, dir2);
  fs::remove(dir2 / "images" / (samples[1].id + ".pgm"));
  try {
    read_dataset(dir2);
    FAIL() << "expected DatasetError";
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}

TEST(Pgm, RoundTripQuantizedPixels) {
  const fs::path dir = scratch_dir("pgm");
  const std::vector<double> pixels = {0.0, 1.0, 128.0 / 255.0, 7.0 / 255.0, 0.5, 1.0};
  write_pgm(dir / "a.pgm", 2, 3, pixels);
  const GrayImage img = read_pgm(dir / "a.pgm");
  EXPECT_EQ(img.height, 2);
  EXPECT_EQ(img.width, 3);
  EXPECT_EQ(img.pixels[2], 128.0 / 255.0);
  EXPECT_EQ(img.pixels[4], 128.0 / 255.0);  // round(127.5) = 128
  EXPECT_THROW(read_pgm(dir / "missing.pgm"), DatasetError);
}

}  // namespace
}  // namespace spotter::synth
