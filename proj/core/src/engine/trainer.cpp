#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

#include "spotter/engine.hpp"

namespace spotter {

using synth::SampleKind;

double poly_lr(double lr0, int t, int total, double power) {
  if (total <= 0 || t >= total) return 0.0;
  if (t <= 0) return lr0;
  return lr0 * std::pow(1.0 - static_cast<double>(t) / static_cast<double>(total), power);
}

AdamW::AdamW(const nn::ParameterSet<float>& params, double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  for (const auto& p : params.all()) {
    m_.emplace_back(p.tensor.size(), 0.0f);
    v_.emplace_back(p.tensor.size(), 0.0f);
  }
}

void AdamW::step(nn::ParameterSet<float>& params, double lr) {
  auto& all = params.all();
  if (all.size() != m_.size()) throw std::logic_error("optimizer state does not match the parameter set");
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t i = 0; i < all.size(); ++i) {
    auto& t = all[i].tensor;
    if (!t.has_grad()) continue;
    const auto g = t.grad();
    auto w = t.mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    const double decay = t.rank() >= 2 ? weight_decay_ : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      m[j] = static_cast<float>(beta1_ * m[j] + (1.0 - beta1_) * gj);
      v[j] = static_cast<float>(beta2_ * v[j] + (1.0 - beta2_) * gj * gj);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] = static_cast<float>(w[j] - lr * (mhat / (std::sqrt(vhat) + eps_) + decay * w[j]));
    }
  }
}

double clip_grad_norm(nn::ParameterSet<float>& params, double max_norm) {
  double sq = 0;
  for (auto& p : params.all()) {
    if (!p.tensor.has_grad()) continue;
    for (float g : p.tensor.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const auto scale = static_cast<float>(max_norm / (norm + 1e-12));
    for (auto& p : params.all()) {
      if (!p.tensor.has_grad()) continue;
      for (float& g : p.tensor.mutable_grad()) g *= scale;
    }
  }
  return norm;
}

TrainingData load_training_data(const TrainConfig& config) {
  TrainingData data;
  auto load = [](const std::string& dir, SampleKind expected) {
    std::vector<synth::SceneSample> samples;
    if (dir.empty()) return samples;
    samples = synth::read_dataset(dir);
    for (const auto& s : samples) {
      if (s.kind != expected) {
        throw synth::DatasetError(dir + ": sample " + s.id + " is '" + synth::kind_name(s.kind) + "', expected '" +
                                  synth::kind_name(expected) + "'");
      }
    }
    return samples;
  };
  data.full = load(config.full_data, SampleKind::kFull);
  data.text = load(config.text_data, SampleKind::kTextOnly);
  data.weak = load(config.weak_data, SampleKind::kWeak);
  return data;
}

namespace {

int kind_slot(SampleKind kind) {
  switch (kind) {
    case SampleKind::kFull: return 0;
    case SampleKind::kTextOnly: return 1;
    case SampleKind::kWeak: return 2;
  }
  return 0;
}

constexpr SampleKind kKinds[3] = {SampleKind::kFull, SampleKind::kTextOnly, SampleKind::kWeak};

}  // namespace

BatchPlanner::BatchPlanner(const TrainConfig& config, const TrainingData& data)
    : rng_(config.seed ^ 0x9e3779b97f4a7c15ULL), batch_size_(config.batch_size),
      mix_{config.mix_full, config.mix_text, config.mix_weak} {
  const std::size_t sizes[3] = {data.full.size(), data.text.size(), data.weak.size()};
  for (int k = 0; k < 3; ++k) {
    if (mix_[k] > 0 && sizes[k] == 0) {
      throw std::invalid_argument("mix ratio for '" + synth::kind_name(kKinds[k]) + "' is positive but no " +
                                  synth::kind_name(kKinds[k]) + " samples were provided");
    }
    cycles_[k].order.resize(sizes[k]);
    for (std::size_t i = 0; i < sizes[k]; ++i) cycles_[k].order[i] = static_cast<int>(i);
    cycles_[k].cursor = sizes[k];  // forces a shuffle on first use
  }
}

int BatchPlanner::draw(SampleKind kind) {
  Cycle& c = cycles_[kind_slot(kind)];
  if (c.cursor >= c.order.size()) {
    for (std::size_t i = c.order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng_.next() % i);
      std::swap(c.order[i - 1], c.order[j]);
    }
    c.cursor = 0;
  }
  return c.order[c.cursor++];
}

std::vector<BatchSlot> BatchPlanner::next() {
  std::vector<BatchSlot> batch;
  for (int b = 0; b < batch_size_; ++b) {
    const double u = rng_.uniform();
    int k = 0;
    double acc = mix_[0];
    while (k < 2 && (u >= acc || mix_[k] == 0)) {
      ++k;
      acc += mix_[k];
    }
    while (mix_[k] == 0 && k > 0) --k;  // rounding at the top end
    batch.emplace_back(kKinds[k], draw(kKinds[k]));
  }
  return batch;
}

TrainState init_training(const TrainConfig& config) {
  config.validate();
  TrainState state;
  state.config = config;
  state.model = std::make_unique<SpotterModel<float>>(config.model, config.seed);
  state.optimizer = AdamW(state.model->parameters(), config.adam_beta1, config.adam_beta2, config.adam_eps,
                          config.weight_decay);
  return state;
}

std::vector<IterationLog> train(TrainState& state, const TrainingData& data, const TrainOptions& options) {
  const TrainConfig& cfg = state.config;
  cfg.validate();
  auto& model = *state.model;
  auto& params = model.parameters();
  const auto& mc = cfg.model;
  const synth::Charset charset(mc.charset);

  // Targets depend only on labels, so they are built once.
  std::vector<TargetSet> targets[3];
  const std::vector<synth::SceneSample>* lists[3] = {&data.full, &data.text, &data.weak};
  for (int k = 0; k < 3; ++k)
    for (const auto& s : *lists[k]) {
      targets[k].push_back(build_targets(s, charset, mc.num_queries, mc.char_slots,
                                         SpotterModel<float>::mask_extent(s.height),
                                         SpotterModel<float>::mask_extent(s.width)));
    }

  // Replay the batch plan up to the resume point so that resumed runs see the
  // same sequence as uninterrupted ones.
  BatchPlanner planner(cfg, data);
  for (std::int64_t it = 0; it < state.iteration; ++it) planner.next();

  std::vector<IterationLog> history;
  const double inv_batch = 1.0 / cfg.batch_size;
  int end = cfg.max_iterations;
  if (options.max_steps > 0) end = std::min<int>(end, static_cast<int>(state.iteration) + options.max_steps);
  for (auto it = static_cast<int>(state.iteration); it < end; ++it) {
    const double lr = poly_lr(cfg.learning_rate, it, cfg.max_iterations, cfg.poly_power);
    params.zero_grad();
    IterationLog log;
    log.iteration = it;
    log.lr = lr;
    for (const auto& [kind, index] : planner.next()) {
      const int k = kind_slot(kind);
      const auto& sample = (*lists[k])[static_cast<std::size_t>(index)];
      const auto& target = targets[k][static_cast<std::size_t>(index)];
      const QueryOutputs<float> out = model.forward(sample);
      const CostMatrix costs = cost_matrix(target, snapshot(out));
      if (!std::all_of(costs.costs.begin(), costs.costs.end(), [](double c) { return std::isfinite(c); })) {
        std::ostringstream msg;
        msg << "non-finite predictions at iteration " << it << " (sample " << sample.id << ", kind "
            << synth::kind_name(kind) << ")";
        throw TrainingError(msg.str());
      }
      const LossReport<float> report = total_loss(target, out, hungarian(costs), cfg.loss);
      if (!std::isfinite(report.total)) {
        std::ostringstream msg;
        msg << "non-finite loss at iteration " << it << " (sample " << sample.id << ", kind "
            << synth::kind_name(kind) << "): total " << report.total << " cls " << report.cls << " dice "
            << report.dice << " focal " << report.focal << " rec " << report.rec;
        throw TrainingError(msg.str());
      }
      diff::mul_scalar(report.loss, static_cast<float>(inv_batch)).backward();
      log.total += report.total * inv_batch;
      log.cls += report.cls * inv_batch;
      log.dice += report.dice * inv_batch;
      log.focal += report.focal * inv_batch;
      log.rec += report.rec * inv_batch;
    }
    if (cfg.grad_clip_norm > 0) clip_grad_norm(params, cfg.grad_clip_norm);
    state.optimizer.step(params, lr);
    state.iteration = it + 1;
    history.push_back(log);

    if (options.log && cfg.log_interval > 0 && (it % cfg.log_interval == 0 || it + 1 == cfg.max_iterations)) {
      *options.log << "iter " << it << " lr " << lr << " loss " << log.total << " cls " << log.cls << " dice "
                   << log.dice << " focal " << log.focal << " rec " << log.rec << '\n';
      options.log->flush();
    }
    if (!options.checkpoint_path.empty() && cfg.checkpoint_interval > 0 && state.iteration % cfg.checkpoint_interval == 0 &&
        state.iteration < cfg.max_iterations) {
      save_checkpoint(options.checkpoint_path, state);
    }
  }
  params.zero_grad();
  if (!options.checkpoint_path.empty()) save_checkpoint(options.checkpoint_path, state);
  return history;
}

TrainState train(const TrainConfig& config, const TrainOptions& options) {
  TrainState state = init_training(config);
  const TrainingData data = load_training_data(config);
  train(state, data, options);
  return state;
}

template <typename T>
Metrics evaluate(const SpotterModel<T>& model, std::span<const synth::SceneSample> dataset, double score_thresh) {
  if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
  std::vector<std::vector<InstanceResult>> predictions;
  predictions.reserve(dataset.size());
  for (const auto& s : dataset) predictions.push_back(model.infer(s.height, s.width, s.image, score_thresh));
  return evaluate_predictions(dataset, predictions);
}

template Metrics evaluate(const SpotterModel<float>&, std::span<const synth::SceneSample>, double);
template Metrics evaluate(const SpotterModel<double>&, std::span<const synth::SceneSample>, double);

}  // namespace spotter
