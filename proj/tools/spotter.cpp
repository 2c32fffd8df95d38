// Command-line front end: synthetic data generation, training, evaluation
// and single-image inference.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "spotter/engine.hpp"

namespace fs = std::filesystem;
using namespace spotter;

namespace {

int gen_data(const fs::path& out, int count, std::uint64_t seed, const std::string& kind_name, int size) {
  const synth::SampleKind kind = synth::parse_kind(kind_name);
  synth::GenConfig cfg;
  cfg.height = size;
  cfg.width = size;
  std::vector<synth::SceneSample> samples;
  samples.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::uint64_t s = seed + static_cast<std::uint64_t>(i);
    const auto sample = synth::generate_sample(cfg, s);
    samples.push_back(kind == synth::SampleKind::kFull ? sample : synth::degrade_annotation(sample, kind, s));
  }
  synth::write_dataset(samples, out);
  std::cout << "wrote " << count << " " << kind_name << " samples to " << out.string() << '\n';
  return 0;
}

int train_cmd(const fs::path& config_path, const fs::path& out, bool resume) {
  std::ifstream in(config_path);
  if (!in) throw std::runtime_error("cannot open config " + config_path.string());
  std::stringstream text;
  text << in.rdbuf();
  const TrainConfig config = TrainConfig::from_json(text.str());
  TrainOptions options;
  options.log = &std::cout;
  options.checkpoint_path = out;
  if (resume && fs::exists(out)) {
    TrainState state = load_checkpoint(out);
    if (state.config.to_json() != config.to_json()) {
      throw std::runtime_error(out.string() + " was trained with a different configuration");
    }
    std::cout << "resuming from iteration " << state.iteration << '\n';
    train(state, load_training_data(config), options);
  } else {
    train(config, options);
  }
  std::cout << "checkpoint written to " << out.string() << '\n';
  return 0;
}

int eval_cmd(const fs::path& ckpt, const fs::path& data_dir, double thresh) {
  const TrainState state = load_checkpoint(ckpt);
  const auto data = synth::read_dataset(data_dir);
  const Metrics m = evaluate(*state.model, std::span<const synth::SceneSample>(data), thresh);
  std::printf("%.6f\t%.6f\t%.6f\t%.6f\t%.6f\n", m.det_precision, m.det_recall, m.det_f, m.one_minus_ned, m.e2e_f);
  return 0;
}

int infer_cmd(const fs::path& ckpt, const fs::path& image_path, const std::string& prefix, double thresh) {
  const TrainState state = load_checkpoint(ckpt);
  const synth::GrayImage image = synth::read_pgm(image_path);
  const auto instances = state.model->infer(image.height, image.width, image.pixels, thresh);

  // Dim the background to half intensity and paint instance i at a distinct
  // gray level in the upper half of the range.
  std::vector<double> overlay(image.pixels.size());
  for (std::size_t p = 0; p < overlay.size(); ++p) overlay[p] = 0.5 * image.pixels[p];
  const std::size_t n = instances.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double level = 0.6 + 0.4 * static_cast<double>(i + 1) / static_cast<double>(n);
    for (std::size_t p = 0; p < overlay.size(); ++p)
      if (instances[i].mask[p]) overlay[p] = level;
  }
  synth::write_pgm(prefix + ".overlay.pgm", image.height, image.width, overlay);

  std::ofstream txt(prefix + ".txt");
  if (!txt) throw std::runtime_error("cannot write " + prefix + ".txt");
  for (const auto& inst : instances) txt << inst.score << '\t' << inst.transcription << '\n';
  std::cout << instances.size() << " instance(s)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer-based scene text spotting on synthetic desk-scale data"};
  app.require_subcommand(1);

  std::string out_dir, kind = "full";
  int count = 0, size = 64;
  std::uint64_t seed = 0;
  auto* gen = app.add_subcommand("gen-data", "Render a synthetic dataset");
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--count", count, "Number of samples")->required()->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "First sample seed")->required();
  gen->add_option("--kind", kind, "Annotation kind")->check(CLI::IsMember({"full", "text", "weak"}));
  gen->add_option("--size", size, "Image side (multiple of 32)")->check(CLI::PositiveNumber);

  std::string config_path, ckpt_out;
  auto* tr = app.add_subcommand("train", "Train a model from a JSON configuration");
  tr->add_option("--config", config_path, "TrainConfig JSON file")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", ckpt_out, "Checkpoint path")->required();
  bool resume = false;
  tr->add_flag("--resume", resume, "Continue from the --out checkpoint if it exists");

  std::string ckpt, data_dir;
  double thresh = 0.5;
  auto* ev = app.add_subcommand("eval", "Print P R F 1-NED E2E-F on a Full dataset");
  ev->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--score-thresh", thresh, "Text-class probability threshold");

  std::string image, prefix;
  auto* inf = app.add_subcommand("infer", "Detect and read text in one PGM image");
  inf->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  inf->add_option("--image", image, "Input PGM")->required()->check(CLI::ExistingFile);
  inf->add_option("--out-prefix", prefix, "Output prefix")->required();
  inf->add_option("--score-thresh", thresh, "Text-class probability threshold");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return gen_data(out_dir, count, seed, kind, size);
    if (*tr) return train_cmd(config_path, ckpt_out, resume);
    if (*ev) return eval_cmd(ckpt, data_dir, thresh);
    if (*inf) return infer_cmd(ckpt, image, prefix, thresh);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
