#pragma once

// Training loop with mixed-supervision batches, the AdamW optimizer with a
// polynomial learning-rate decay, checkpoints, and dataset evaluation.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "spotter/matching_loss.hpp"
#include "spotter/metrics.hpp"
#include "spotter/model.hpp"

namespace spotter {

struct TrainConfig {
  ModelConfig model;
  LossWeights loss;
  std::string full_data;
  std::string text_data;
  std::string weak_data;
  double mix_full = 1.0;
  double mix_text = 0.0;
  double mix_weak = 0.0;
  double learning_rate = 1e-3;
  double weight_decay = 0.05;
  double poly_power = 0.9;
  int max_iterations = 2000;
  int batch_size = 4;
  std::uint64_t seed = 0;
  /// Iterations between checkpoints; 0 writes only the final one.
  int checkpoint_interval = 0;
  /// Iterations between log lines; 0 disables logging.
  int log_interval = 1;
  /// Global gradient-norm clip; 0 disables clipping.
  double grad_clip_norm = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  /// Throws std::invalid_argument when the configuration is unusable.
  void validate() const;

  /// JSON keys mirror the field names; `model` and `loss` are nested objects.
  /// Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const std::string& text);
  std::string to_json() const;
};

/// lr0 * (1 - t / T)^power; exactly lr0 at t = 0 and 0 at t = T.
double poly_lr(double lr0, int t, int total, double power);

/// Adam with decoupled weight decay. Decay applies to matrices and
/// higher-rank tensors only (not to biases, gains or other vectors).
class AdamW {
 public:
  AdamW() = default;
  AdamW(const nn::ParameterSet<float>& params, double beta1, double beta2, double eps, double weight_decay);

  /// One update using the gradients currently held by `params`.
  void step(nn::ParameterSet<float>& params, double lr);

  std::int64_t steps() const { return steps_; }
  void set_steps(std::int64_t steps) { steps_ = steps; }
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, weight_decay_ = 0.0;
  std::int64_t steps_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(nn::ParameterSet<float>& params, double max_norm);

/// In-memory training data, one list per supervision kind.
struct TrainingData {
  std::vector<synth::SceneSample> full;
  std::vector<synth::SceneSample> text;
  std::vector<synth::SceneSample> weak;
};

/// Reads the dataset directories named in the config (empty path -> empty list).
TrainingData load_training_data(const TrainConfig& config);

/// One batch element: supervision kind and index into that kind's list.
using BatchSlot = std::pair<synth::SampleKind, int>;

/// Deterministic batch composition. Each element's kind is drawn from the mix
/// ratios; within a kind, samples are visited in reshuffled epochs.
class BatchPlanner {
 public:
  BatchPlanner(const TrainConfig& config, const TrainingData& data);
  std::vector<BatchSlot> next();

 private:
  struct Cycle {
    std::vector<int> order;
    std::size_t cursor = 0;
  };
  int draw(synth::SampleKind kind);

  Rng rng_;
  int batch_size_;
  double mix_[3];
  Cycle cycles_[3];
};

/// Raised when the loss becomes NaN or infinite.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainState {
  TrainConfig config;
  std::unique_ptr<SpotterModel<float>> model;
  AdamW optimizer;
  std::int64_t iteration = 0;
};

/// Averages of the loss components over one batch.
struct IterationLog {
  int iteration = 0;
  double lr = 0.0;
  double total = 0.0, cls = 0.0, dice = 0.0, focal = 0.0, rec = 0.0;
};

struct TrainOptions {
  std::ostream* log = nullptr;
  /// Written every checkpoint_interval iterations and at the end when set.
  std::filesystem::path checkpoint_path;
  /// Stops after this many iterations of the current call (0 runs to
  /// max_iterations). The schedule still spans max_iterations, so a run cut
  /// short and resumed from its checkpoint matches an uninterrupted one.
  int max_steps = 0;
};

/// Fresh model and optimizer for `config` (weights seeded by config.seed).
TrainState init_training(const TrainConfig& config);

/// Runs iterations state.iteration .. max_iterations - 1. Returns the
/// per-iteration log. Throws TrainingError on a non-finite loss.
std::vector<IterationLog> train(TrainState& state, const TrainingData& data, const TrainOptions& options = {});

/// Convenience: init_training + load_training_data + train.
TrainState train(const TrainConfig& config, const TrainOptions& options = {});

/// Runs inference on every sample and scores it against its Full labels.
template <typename T>
Metrics evaluate(const SpotterModel<T>& model, std::span<const synth::SceneSample> dataset,
                 double score_thresh = 0.5);

// --- checkpoints -----------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  diff::Shape shape;
  std::vector<float> values;

  bool operator==(const CheckpointRecord&) const = default;
};

/// "TFCK", u32 version, u64 iteration, u32 record count, records
/// (u32 name length, name, u32 rank, u32 extents..., f32 payload), then
/// u32 length + config JSON. All integers and floats little-endian.
struct CheckpointFile {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t iteration = 0;
  std::vector<CheckpointRecord> records;
  std::string config_json;

  bool operator==(const CheckpointFile&) const = default;
};

/// Raised for unreadable or malformed checkpoint files.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file);
CheckpointFile read_checkpoint_file(const std::filesystem::path& path);

/// Parameters as "<name>", optimizer moments as "adam_m/<name>" and
/// "adam_v/<name>", plus the training configuration.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
TrainState load_checkpoint(const std::filesystem::path& path);

}  // namespace spotter
