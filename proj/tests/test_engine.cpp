#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "test_util.hpp"
#include "spotter/engine.hpp"

namespace spotter {
namespace {

namespace fs = std::filesystem;
using synth::SampleKind;
using synth::SceneSample;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("spotter_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------------------
// Metrics

TEST(Metrics, OneMinusNedExamples) {
  EXPECT_EQ(levenshtein("kitten", "sitting"), 3u);
  EXPECT_DOUBLE_EQ(one_minus_ned("ACE", "ACE"), 1.0);
  EXPECT_DOUBLE_EQ(one_minus_ned("", ""), 1.0);
  EXPECT_DOUBLE_EQ(one_minus_ned("", "ACE"), 0.0);
  EXPECT_DOUBLE_EQ(one_minus_ned("AC", "ACE"), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(one_minus_ned("ACEH", "ACE"), 0.75);
  EXPECT_DOUBLE_EQ(one_minus_ned("TR", "AC"), 0.0);
}

TEST(Metrics, LevenshteinIsAMetric) {
  Rng rng(3);
  const std::string alphabet = "ACE";
  auto word = [&] {
    std::string s;
    for (int i = rng.uniform_int(0, 5); i > 0; --i) s.push_back(alphabet[static_cast<std::size_t>(rng.uniform_int(0, 2))]);
    return s;
  };
  for (int trial = 0; trial < 200; ++trial) {
    const std::string a = word(), b = word(), c = word();
    EXPECT_EQ(levenshtein(a, b), levenshtein(b, a));
    EXPECT_EQ(levenshtein(a, a), 0u);
    EXPECT_LE(levenshtein(a, c), levenshtein(a, b) + levenshtein(b, c));
    const double s = one_minus_ned(a, b);
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
  }
}

TEST(Metrics, IouAndFMeasure) {
  const std::vector<std::uint8_t> a = {1, 1, 1, 0}, b = {0, 1, 1, 1};
  EXPECT_DOUBLE_EQ(mask_iou(a, b), 0.5);
  EXPECT_DOUBLE_EQ(mask_iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(mask_iou(std::vector<std::uint8_t>(4, 0), std::vector<std::uint8_t>(4, 0)), 0.0);
  EXPECT_DOUBLE_EQ(f_measure(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(f_measure(1, 0.5), 2.0 / 3.0);
}

SceneSample labelled(std::vector<std::pair<std::vector<std::uint8_t>, std::string>> words, int h = 2, int w = 4) {
  SceneSample s;
  s.id = "s";
  s.height = h;
  s.width = w;
  s.image.assign(static_cast<std::size_t>(h) * w, 0.0);
  for (auto& [mask, text] : words) s.instances.push_back({text, synth::Orientation::kHorizontal, mask});
  return s;
}

InstanceResult predicted(std::vector<std::uint8_t> mask, std::string text, int h = 2, int w = 4) {
  InstanceResult r;
  r.height = h;
  r.width = w;
  r.mask = std::move(mask);
  r.transcription = std::move(text);
  r.score = 0.9;
  return r;
}

TEST(EvaluatePredictions, PerfectPredictionsScoreOne) {
  const std::vector<std::uint8_t> m1 = {1, 1, 0, 0, 0, 0, 0, 0}, m2 = {0, 0, 0, 1, 0, 0, 0, 1};
  const std::vector<SceneSample> data = {labelled({{m1, "ACE"}, {m2, "TR"}})};
  const std::vector<std::vector<InstanceResult>> preds = {{predicted(m2, "TR"), predicted(m1, "ACE")}};
  const Metrics m = evaluate_predictions(data, preds);
  EXPECT_DOUBLE_EQ(m.det_f, 1.0);
  EXPECT_DOUBLE_EQ(m.one_minus_ned, 1.0);
  EXPECT_DOUBLE_EQ(m.e2e_f, 1.0);
  EXPECT_DOUBLE_EQ(m.e2e_recall, 1.0);
  EXPECT_EQ(m.true_positives, 2);
  EXPECT_EQ(m.exact_matches, 2);
}

TEST(EvaluatePredictions, NoPredictionsScoreZero) {
  const std::vector<SceneSample> data = {labelled({{{1, 1, 0, 0, 0, 0, 0, 0}, "ACE"}})};
  const std::vector<std::vector<InstanceResult>> preds = {{}};
  const Metrics m = evaluate_predictions(data, preds);
  EXPECT_EQ(m.det_precision, 0.0);
  EXPECT_EQ(m.det_recall, 0.0);
  EXPECT_EQ(m.det_f, 0.0);
  EXPECT_EQ(m.one_minus_ned, 0.0);
  EXPECT_EQ(m.e2e_f, 0.0);
  EXPECT_EQ(m.ground_truth, 1);
}

TEST(EvaluatePredictions, PartialOverlapAndPartialTranscription) {
  // Ground truth covers 5 pixels; the prediction covers 3 of them (IoU 0.6).
  const std::vector<std::uint8_t> gt = {1, 1, 1, 1, 1, 0, 0, 0}, pr = {1, 1, 1, 0, 0, 0, 0, 0};
  const std::vector<SceneSample> data = {labelled({{gt, "ACE"}})};
  const std::vector<std::vector<InstanceResult>> preds = {{predicted(pr, "AC")}};
  const Metrics m = evaluate_predictions(data, preds);
  EXPECT_DOUBLE_EQ(m.det_f, 1.0);
  EXPECT_DOUBLE_EQ(m.one_minus_ned, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(m.e2e_f, 0.0);
}

TEST(EvaluatePredictions, LowOverlapIsNotADetection) {
  const std::vector<std::uint8_t> gt = {1, 1, 1, 1, 1, 0, 0, 0}, pr = {1, 1, 0, 0, 0, 0, 0, 0};
  const std::vector<SceneSample> data = {labelled({{gt, "ACE"}})};
  const std::vector<std::vector<InstanceResult>> preds = {{predicted(pr, "ACE")}};
  const Metrics m = evaluate_predictions(data, preds);
  EXPECT_EQ(m.true_positives, 0);
  EXPECT_EQ(m.det_f, 0.0);
  EXPECT_EQ(m.e2e_f, 0.0);
}

TEST(EvaluatePredictions, ExtraPredictionsOnlyLowerPrecision) {
  const std::vector<std::uint8_t> m1 = {1, 1, 0, 0, 0, 0, 0, 0}, other = {0, 0, 0, 0, 1, 1, 1, 1};
  const std::vector<SceneSample> data = {labelled({{m1, "ACE"}})};
  const std::vector<std::vector<InstanceResult>> one = {{predicted(m1, "ACE")}};
  const std::vector<std::vector<InstanceResult>> two = {{predicted(m1, "ACE"), predicted(other, "T")}};
  const Metrics a = evaluate_predictions(data, one), b = evaluate_predictions(data, two);
  EXPECT_DOUBLE_EQ(b.det_recall, a.det_recall);
  EXPECT_LT(b.det_precision, a.det_precision);
  EXPECT_DOUBLE_EQ(b.det_precision, 0.5);
  EXPECT_DOUBLE_EQ(b.one_minus_ned, a.one_minus_ned);
  EXPECT_DOUBLE_EQ(b.e2e_recall, a.e2e_recall);
}

TEST(EvaluatePredictions, RejectsBadInput) {
  const std::vector<SceneSample> none;
  const std::vector<std::vector<InstanceResult>> no_preds;
  EXPECT_THROW(evaluate_predictions(none, no_preds), std::invalid_argument);
  std::vector<SceneSample> data = {labelled({{{1, 0, 0, 0, 0, 0, 0, 0}, "A"}})};
  const std::vector<std::vector<InstanceResult>> two = {{}, {}};
  EXPECT_THROW(evaluate_predictions(data, two), std::invalid_argument);
  data[0].kind = SampleKind::kWeak;
  const std::vector<std::vector<InstanceResult>> one = {{}};
  EXPECT_THROW(evaluate_predictions(data, one), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Schedule, config, planner

TEST(PolyLr, EndpointsAndMonotonicity) {
  EXPECT_EQ(poly_lr(1e-3, 0, 100, 0.9), 1e-3);
  EXPECT_EQ(poly_lr(1e-3, 100, 100, 0.9), 0.0);
  EXPECT_NEAR(poly_lr(2.0, 50, 100, 1.0), 1.0, 1e-15);
  EXPECT_NEAR(poly_lr(1.0, 25, 100, 0.9), std::pow(0.75, 0.9), 1e-15);
  double prev = 1.0;
  for (int t = 1; t <= 100; ++t) {
    const double lr = poly_lr(1.0, t, 100, 0.9);
    EXPECT_LT(lr, prev);
    prev = lr;
  }
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig c;
  c.model.d = 32;
  c.model.charset = "ACE";
  c.loss.lambda_mask = 2.5;
  c.full_data = "/data/full";
  c.mix_full = 0.5;
  c.mix_weak = 0.5;
  c.seed = 12345678901234ULL;
  c.grad_clip_norm = 1.0;
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.model, c.model);
  EXPECT_EQ(back.loss.lambda_mask, 2.5);
  EXPECT_EQ(back.full_data, c.full_data);
  EXPECT_EQ(back.mix_weak, 0.5);
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_EQ(back.to_json(), c.to_json());
}

TEST(TrainConfig, MissingKeysKeepDefaultsAndUnknownKeysFail) {
  const TrainConfig c = TrainConfig::from_json(R"({"max_iterations": 10, "model": {"num_queries": 4}})");
  EXPECT_EQ(c.max_iterations, 10);
  EXPECT_EQ(c.model.num_queries, 4);
  EXPECT_EQ(c.model.d, 64);
  EXPECT_EQ(c.learning_rate, 1e-3);
  EXPECT_THROW(TrainConfig::from_json(R"({"learning_rat": 1})"), std::invalid_argument);
  EXPECT_THROW(TrainConfig::from_json(R"({"model": {"depth": 1}})"), std::invalid_argument);
  EXPECT_THROW(TrainConfig::from_json("{not json"), std::invalid_argument);
}

TEST(TrainConfig, ValidateRejectsUnusableSettings) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.mix_full = 0.7;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.learning_rate = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.model.heads = 5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TrainingData generated_data(int full, int weak, std::uint64_t seed0 = 100) {
  TrainingData data;
  synth::GenConfig cfg;
  for (int i = 0; i < full; ++i) data.full.push_back(synth::generate_sample(cfg, seed0 + static_cast<std::uint64_t>(i)));
  for (int i = 0; i < weak; ++i)
    data.weak.push_back(synth::degrade_annotation(synth::generate_sample(cfg, seed0 + 1000 + static_cast<std::uint64_t>(i)),
                                                  SampleKind::kWeak, static_cast<std::uint64_t>(i)));
  return data;
}

TEST(BatchPlanner, DeterministicAndCoversEpochs) {
  TrainConfig c;
  c.batch_size = 3;
  const TrainingData data = generated_data(6, 0);
  BatchPlanner a(c, data), b(c, data);
  std::vector<int> seen;
  for (int i = 0; i < 2; ++i) {
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    for (const auto& [kind, index] : x) {
      EXPECT_EQ(kind, SampleKind::kFull);
      seen.push_back(index);
    }
  }
  std::sort(seen.begin(), seen.end());
  EXPECT_EQ(seen, (std::vector<int>{0, 1, 2, 3, 4, 5}));
}

TEST(BatchPlanner, FollowsMixRatios) {
  TrainConfig c;
  c.batch_size = 10;
  c.mix_full = 0.3;
  c.mix_weak = 0.7;
  const TrainingData data = generated_data(2, 2);
  BatchPlanner p(c, data);
  int weak = 0, total = 0;
  for (int i = 0; i < 300; ++i)
    for (const auto& [kind, index] : p.next()) {
      weak += kind == SampleKind::kWeak;
      ++total;
    }
  EXPECT_NEAR(static_cast<double>(weak) / total, 0.7, 0.04);
  c.mix_full = 0.0;
  c.mix_text = 0.3;
  EXPECT_THROW(BatchPlanner(c, data), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Training and checkpoints (small model)

TrainConfig tiny_config() {
  TrainConfig c;
  c.model.d = 16;
  c.model.heads = 2;
  c.model.ffn_dim = 32;
  c.model.encoder_layers = 1;
  c.model.decoder_layers = 2;
  c.model.recognizer_layers = 1;
  c.model.num_queries = 4;
  c.model.seg_hidden = 8;
  c.max_iterations = 4;
  c.batch_size = 2;
  c.mix_full = 0.5;
  c.mix_weak = 0.5;
  c.seed = 5;
  c.log_interval = 0;
  return c;
}

std::vector<double> flat_parameters(const SpotterModel<float>& model) {
  std::vector<double> out;
  for (const auto& p : model.parameters().all()) out.insert(out.end(), p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

TEST(Training, RunsAreDeterministic) {
  const TrainingData data = generated_data(3, 3);
  TrainState a = init_training(tiny_config());
  TrainState b = init_training(tiny_config());
  const auto la = train(a, data);
  const auto lb = train(b, data);
  ASSERT_EQ(la.size(), 4u);
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_EQ(la[i].total, lb[i].total);
  EXPECT_EQ(flat_parameters(*a.model), flat_parameters(*b.model));
  EXPECT_EQ(a.iteration, 4);
  EXPECT_EQ(a.optimizer.steps(), 4);
}

TEST(Training, LossDecreasesOnASingleImage) {
  TrainConfig c = tiny_config();
  c.mix_full = 1.0;
  c.mix_weak = 0.0;
  c.max_iterations = 30;
  c.batch_size = 1;
  c.learning_rate = 3e-3;
  const TrainingData data = generated_data(1, 0);
  TrainState s = init_training(c);
  const auto log = train(s, data);
  EXPECT_LT(log.back().total, 0.5 * log.front().total);
}

TEST(Training, NonFiniteParametersAbort) {
  const TrainingData data = generated_data(1, 1);
  TrainState s = init_training(tiny_config());
  auto* p = s.model->parameters().find("cls.fc3.bias");
  ASSERT_NE(p, nullptr);
  for (auto& v : p->tensor.mutable_values()) v = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(train(s, data), TrainingError);
}

TEST(Training, LogsAtTheRequestedInterval) {
  TrainConfig c = tiny_config();
  c.log_interval = 2;
  const TrainingData data = generated_data(2, 2);
  TrainState s = init_training(c);
  std::ostringstream out;
  TrainOptions opts;
  opts.log = &out;
  train(s, data, opts);
  const std::string text = out.str();
  EXPECT_NE(text.find("iter 0 "), std::string::npos);
  EXPECT_NE(text.find("iter 2 "), std::string::npos);
  EXPECT_NE(text.find("iter 3 "), std::string::npos);
  EXPECT_EQ(text.find("iter 1 "), std::string::npos);
}

TEST(Checkpoint, RoundTripPreservesModelAndEvaluation) {
  const fs::path dir = scratch_dir("ckpt_roundtrip");
  const TrainingData data = generated_data(2, 2);
  TrainState s = init_training(tiny_config());
  TrainOptions opts;
  opts.checkpoint_path = dir / "model.ckpt";
  train(s, data, opts);
  ASSERT_TRUE(fs::exists(opts.checkpoint_path));
  const TrainState loaded = load_checkpoint(opts.checkpoint_path);
  EXPECT_EQ(loaded.iteration, s.iteration);
  EXPECT_EQ(loaded.config.to_json(), s.config.to_json());
  EXPECT_EQ(flat_parameters(*loaded.model), flat_parameters(*s.model));
  EXPECT_EQ(loaded.optimizer.first_moments(), s.optimizer.first_moments());
  EXPECT_EQ(loaded.optimizer.second_moments(), s.optimizer.second_moments());
  const Metrics a = evaluate(*s.model, std::span<const SceneSample>(data.full), 0.0);
  const Metrics b = evaluate(*loaded.model, std::span<const SceneSample>(data.full), 0.0);
  EXPECT_EQ(a.det_f, b.det_f);
  EXPECT_EQ(a.one_minus_ned, b.one_minus_ned);
  EXPECT_EQ(a.predictions, b.predictions);
  fs::remove_all(dir);
}

TEST(Checkpoint, ResumedRunMatchesUninterruptedRun) {
  const fs::path dir = scratch_dir("ckpt_resume");
  const TrainingData data = generated_data(3, 3);
  TrainState straight = init_training(tiny_config());
  train(straight, data);

  TrainState first = init_training(tiny_config());
  TrainOptions stop_early;
  stop_early.max_steps = 2;
  stop_early.checkpoint_path = dir / "half.ckpt";
  train(first, data, stop_early);
  TrainState resumed = load_checkpoint(dir / "half.ckpt");
  EXPECT_EQ(resumed.iteration, 2);
  EXPECT_EQ(resumed.optimizer.steps(), 2);
  train(resumed, data);
  EXPECT_EQ(flat_parameters(*resumed.model), flat_parameters(*straight.model));
  fs::remove_all(dir);
}

TEST(Checkpoint, FileRoundTripAndCorruption) {
  const fs::path dir = scratch_dir("ckpt_file");
  CheckpointFile f;
  f.iteration = 7;
  f.records.push_back({"a.weight", {2, 3}, {1, 2, 3, 4, 5, 6}});
  f.records.push_back({"b", {1}, {-0.5f}});
  f.config_json = "{}";
  const fs::path path = dir / "f.ckpt";
  write_checkpoint_file(path, f);
  EXPECT_EQ(read_checkpoint_file(path), f);

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write_bytes = [&](const std::string& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  write_bytes("XXXX" + bytes.substr(4));
  EXPECT_THROW(read_checkpoint_file(path), CheckpointError);
  write_bytes(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_checkpoint_file(path), CheckpointError);
  write_bytes(bytes + "junk");
  EXPECT_THROW(read_checkpoint_file(path), CheckpointError);
  std::string wrong_version = bytes;
  wrong_version[4] = 9;
  write_bytes(wrong_version);
  EXPECT_THROW(read_checkpoint_file(path), CheckpointError);
  EXPECT_THROW(read_checkpoint_file(dir / "missing.ckpt"), CheckpointError);
  fs::remove_all(dir);
}

TEST(Checkpoint, MissingParameterRecordIsAnError) {
  const fs::path dir = scratch_dir("ckpt_missing");
  TrainState s = init_training(tiny_config());
  save_checkpoint(dir / "m.ckpt", s);
  CheckpointFile f = read_checkpoint_file(dir / "m.ckpt");
  f.records.erase(f.records.begin());
  write_checkpoint_file(dir / "m.ckpt", f);
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt"), CheckpointError);
  f.records.push_back({"unknown", {1}, {0.0f}});
  write_checkpoint_file(dir / "m.ckpt", f);
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt"), CheckpointError);
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Inference

TEST(Inference, DeterministicDisjointAndRobust) {
  const ModelConfig mc = tiny_config().model;
  const SpotterModel<float> model(mc, 3);
  const auto sample = synth::generate_sample(synth::GenConfig{}, 42);
  const auto a = model.infer(sample.height, sample.width, sample.image, 0.0);
  const auto b = model.infer(sample.height, sample.width, sample.image, 0.0);
  ASSERT_EQ(a.size(), b.size());
  std::vector<int> cover(static_cast<std::size_t>(64 * 64), 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].mask, b[i].mask);
    EXPECT_EQ(a[i].transcription, b[i].transcription);
    EXPECT_EQ(a[i].mask.size(), cover.size());
    EXPECT_LE(a[i].transcription.size(), static_cast<std::size_t>(mc.char_slots));
    for (std::size_t p = 0; p < cover.size(); ++p) cover[p] += a[i].mask[p];
  }
  for (int c : cover) EXPECT_LE(c, 1);

  // Blank, saturated and noisy images all run without error.
  for (double v : {0.0, 1.0}) EXPECT_NO_THROW(model.infer(64, 64, std::vector<double>(64 * 64, v)));
  Rng rng(1);
  std::vector<double> noise(32 * 96);
  for (auto& v : noise) v = rng.uniform();
  EXPECT_NO_THROW(model.infer(32, 96, noise));
  EXPECT_THROW(model.infer(48, 64, std::vector<double>(48 * 64, 0.0)), diff::ShapeError);
  EXPECT_THROW(model.infer(64, 64, std::vector<double>(10, 0.0)), std::invalid_argument);
}

TEST(Model, FloatAndDoubleAgree) {
  ModelConfig mc = tiny_config().model;
  const SpotterModel<float> f(mc, 9);
  const SpotterModel<double> d(mc, 9);
  const auto sample = synth::generate_sample(synth::GenConfig{}, 4);
  const auto of = f.forward(sample);
  const auto od = d.forward(sample);
  EXPECT_LT(testing::max_abs_diff(testing::as_doubles(of.class_logits), testing::as_doubles(od.class_logits)), 1e-3);
  EXPECT_EQ(of.mask_logits.shape(), (diff::Shape{4, 16, 16}));
  EXPECT_EQ(of.rec_logits.shape(), (diff::Shape{4, 8, 12}));
}

TEST(Model, ImageTensorScaling) {
  const std::vector<double> px(32 * 32, 0.25);
  const auto t = image_tensor<double>(32, 32, px);
  EXPECT_EQ(t.shape(), (diff::Shape{32, 32, 1}));
  EXPECT_DOUBLE_EQ(t.values()[0], -0.5);
  EXPECT_THROW(image_tensor<double>(30, 32, std::vector<double>(30 * 32)), diff::ShapeError);
}

TEST(ModelConfig, ValidateCatchesInconsistencies) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  c.d = 30;  // not divisible by heads or by 4
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.num_queries = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.charset = "";
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Model, DeskModelParameterCount) {
  const SpotterModel<float> model(ModelConfig{}, 0);
  EXPECT_EQ(model.parameters().scalar_count(), 426736u);
}

}  // namespace
}  // namespace spotter
