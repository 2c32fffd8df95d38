#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "spotter/synthdata.hpp"

namespace spotter::synth {

namespace fs = std::filesystem;
using nlohmann::json;

std::string kind_name(SampleKind kind) {
  switch (kind) {
    case SampleKind::kFull: return "full";
    case SampleKind::kTextOnly: return "text";
    case SampleKind::kWeak: return "weak";
  }
  return "full";
}

SampleKind parse_kind(const std::string& name) {
  if (name == "full") return SampleKind::kFull;
  if (name == "text") return SampleKind::kTextOnly;
  if (name == "weak") return SampleKind::kWeak;
  throw std::invalid_argument("unknown sample kind '" + name + "' (expected full|text|weak)");
}

std::string orientation_name(Orientation o) {
  return o == Orientation::kHorizontal ? "horizontal" : "vertical";
}

Orientation parse_orientation(const std::string& name) {
  if (name == "horizontal") return Orientation::kHorizontal;
  if (name == "vertical") return Orientation::kVertical;
  throw std::invalid_argument("unknown orientation '" + name + "'");
}

std::vector<std::int64_t> rle_encode(std::span<const std::uint8_t> mask) {
  std::vector<std::int64_t> runs;
  std::uint8_t current = 0;
  std::int64_t count = 0;
  for (std::uint8_t v : mask) {
    const std::uint8_t bit = v ? 1 : 0;
    if (bit != current) {
      runs.push_back(count);
      current = bit;
      count = 0;
    }
    ++count;
  }
  runs.push_back(count);
  return runs;
}

std::vector<std::uint8_t> rle_decode(std::span<const std::int64_t> runs, std::size_t total) {
  std::vector<std::uint8_t> mask;
  mask.reserve(total);
  std::uint8_t bit = 0;
  std::size_t sum = 0;
  for (std::int64_t r : runs) {
    if (r < 0) throw DatasetError("negative run length in rle");
    sum += static_cast<std::size_t>(r);
    if (sum > total) break;
    mask.insert(mask.end(), static_cast<std::size_t>(r), bit);
    bit ^= 1;
  }
  if (sum != total) {
    throw DatasetError("rle runs sum to " + std::to_string(sum) + ", expected H*W = " + std::to_string(total));
  }
  return mask;
}

void write_pgm(const fs::path& path, int height, int width, std::span<const double> pixels) {
  if (pixels.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width)) {
    throw std::invalid_argument("pixel count does not match " + std::to_string(height) + "x" + std::to_string(width));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot open " + path.string() + " for writing");
  out << "P5\n" << width << ' ' << height << "\n255\n";
  for (double v : pixels) {
    const long b = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
    out.put(static_cast<char>(static_cast<unsigned char>(b)));
  }
  if (!out) throw DatasetError("failed writing " + path.string());
}

GrayImage read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError(path.string() + ": cannot open");
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  if (token() != "P5") throw DatasetError(path.string() + ": not a binary PGM (P5)");
  GrayImage img;
  try {
    img.width = std::stoi(token());
    img.height = std::stoi(token());
    if (std::stoi(token()) != 255) throw DatasetError(path.string() + ": maxval must be 255");
  } catch (const std::logic_error&) {
    throw DatasetError(path.string() + ": malformed PGM header");
  }
  if (img.width <= 0 || img.height <= 0) throw DatasetError(path.string() + ": bad PGM dimensions");
  const std::size_t n = static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height);
  std::string bytes(n, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw DatasetError(path.string() + ": truncated pixel data");
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) img.pixels[i] = static_cast<unsigned char>(bytes[i]) / 255.0;
  return img;
}

void write_dataset(std::span<const SceneSample> samples, const fs::path& dir) {
  fs::create_directories(dir / "images");
  std::ofstream ann(dir / "annotations.jsonl");
  if (!ann) throw DatasetError("cannot open " + (dir / "annotations.jsonl").string() + " for writing");
  for (const auto& s : samples) {
    write_pgm(dir / "images" / (s.id + ".pgm"), s.height, s.width, s.image);
    json rec;
    rec["id"] = s.id;
    rec["kind"] = kind_name(s.kind);
    rec["H"] = s.height;
    rec["W"] = s.width;
    rec["seed"] = s.seed;
    json instances = json::array();
    for (const auto& inst : s.instances) {
      json j;
      j["transcription"] = inst.transcription;
      if (s.kind == SampleKind::kFull) {
        j["orientation"] = orientation_name(inst.orientation.value_or(Orientation::kHorizontal));
        j["rle"] = rle_encode(inst.mask);
      }
      instances.push_back(std::move(j));
    }
    rec["instances"] = std::move(instances);
    ann << rec.dump() << '\n';
  }
}

std::vector<SceneSample> read_dataset(const fs::path& dir) {
  const fs::path ann_path = dir / "annotations.jsonl";
  std::vector<SceneSample> samples;
  if (!fs::exists(ann_path)) return samples;
  std::ifstream ann(ann_path);
  if (!ann) throw DatasetError(ann_path.string() + ": cannot open");
  std::string line;
  int line_no = 0;
  while (std::getline(ann, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = ann_path.string() + ":" + std::to_string(line_no) + ": ";
    try {
      const json rec = json::parse(line);
      SceneSample s;
      s.id = rec.at("id").get<std::string>();
      s.kind = parse_kind(rec.at("kind").get<std::string>());
      s.height = rec.at("H").get<int>();
      s.width = rec.at("W").get<int>();
      s.seed = rec.value("seed", std::uint64_t{0});
      if (s.height <= 0 || s.width <= 0) throw DatasetError("H and W must be positive");
      const std::size_t total = static_cast<std::size_t>(s.height) * static_cast<std::size_t>(s.width);
      for (const auto& j : rec.at("instances")) {
        InstanceLabel inst;
        inst.transcription = j.at("transcription").get<std::string>();
        if (inst.transcription.empty()) throw DatasetError("empty transcription");
        if (s.kind == SampleKind::kFull) {
          inst.orientation = parse_orientation(j.at("orientation").get<std::string>());
          inst.mask = rle_decode(j.at("rle").get<std::vector<std::int64_t>>(), total);
        }
        s.instances.push_back(std::move(inst));
      }
      if (s.kind == SampleKind::kWeak && s.instances.size() != 1) {
        throw DatasetError("weak record must carry exactly one transcription");
      }
      if (s.instances.empty()) throw DatasetError("record has no instances");
      const GrayImage img = read_pgm(dir / "images" / (s.id + ".pgm"));
      if (img.height != s.height || img.width != s.width) {
        throw DatasetError("image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                           ", annotation says " + std::to_string(s.height) + "x" + std::to_string(s.width));
      }
      s.image = img.pixels;
      samples.push_back(std::move(s));
    } catch (const DatasetError& e) {
      throw DatasetError(where + e.what());
    } catch (const std::exception& e) {
      throw DatasetError(where + e.what());
    }
  }
  return samples;
}

}  // namespace spotter::synth
