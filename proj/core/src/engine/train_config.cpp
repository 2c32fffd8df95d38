#include <cmath>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "spotter/engine.hpp"

namespace spotter {

using nlohmann::json;

void TrainConfig::validate() const {
  model.validate();
  loss.validate();
  for (double m : {mix_full, mix_text, mix_weak}) {
    if (!std::isfinite(m) || m < 0) throw std::invalid_argument("mix ratios must be finite and non-negative");
  }
  if (std::abs(mix_full + mix_text + mix_weak - 1.0) > 1e-9) throw std::invalid_argument("mix ratios must sum to 1");
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw std::invalid_argument("learning_rate must be > 0");
  if (!(weight_decay >= 0) || !std::isfinite(weight_decay)) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(poly_power >= 0) || !std::isfinite(poly_power)) throw std::invalid_argument("poly_power must be >= 0");
  if (max_iterations < 0) throw std::invalid_argument("max_iterations must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (checkpoint_interval < 0 || log_interval < 0) throw std::invalid_argument("intervals must be >= 0");
  if (!(grad_clip_norm >= 0)) throw std::invalid_argument("grad_clip_norm must be >= 0");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1 && adam_eps > 0)) {
    throw std::invalid_argument("adam hyper-parameters out of range");
  }
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be a JSON object");
  for (const auto& item : j.items()) {
    if (!known.count(item.key())) throw std::invalid_argument("unknown key '" + item.key() + "' in " + where);
  }
}

template <typename V>
void read(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

json model_json(const ModelConfig& m) {
  return json{{"d", m.d},
              {"heads", m.heads},
              {"ffn_dim", m.ffn_dim},
              {"encoder_layers", m.encoder_layers},
              {"decoder_layers", m.decoder_layers},
              {"recognizer_layers", m.recognizer_layers},
              {"num_queries", m.num_queries},
              {"char_slots", m.char_slots},
              {"seg_hidden", m.seg_hidden},
              {"charset", m.charset}};
}

json loss_json(const LossWeights& w) {
  return json{{"lambda_mask", w.lambda_mask},
              {"lambda_rec", w.lambda_rec},
              {"focal_alpha", w.focal_alpha},
              {"focal_gamma", w.focal_gamma},
              {"rec_ignore_pad", w.rec_ignore_pad}};
}

}  // namespace

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  TrainConfig c;
  try {
    reject_unknown(j,
                   {"model", "loss", "full_data", "text_data", "weak_data", "mix_full", "mix_text", "mix_weak",
                    "learning_rate", "weight_decay", "poly_power", "max_iterations", "batch_size", "seed",
                    "checkpoint_interval", "log_interval", "grad_clip_norm", "adam_beta1", "adam_beta2", "adam_eps"},
                   "config");
    if (j.contains("model")) {
      const json& m = j.at("model");
      reject_unknown(m,
                     {"d", "heads", "ffn_dim", "encoder_layers", "decoder_layers", "recognizer_layers",
                      "num_queries", "char_slots", "seg_hidden", "charset"},
                     "model");
      read(m, "d", c.model.d);
      read(m, "heads", c.model.heads);
      read(m, "ffn_dim", c.model.ffn_dim);
      read(m, "encoder_layers", c.model.encoder_layers);
      read(m, "decoder_layers", c.model.decoder_layers);
      read(m, "recognizer_layers", c.model.recognizer_layers);
      read(m, "num_queries", c.model.num_queries);
      read(m, "char_slots", c.model.char_slots);
      read(m, "seg_hidden", c.model.seg_hidden);
      read(m, "charset", c.model.charset);
    }
    if (j.contains("loss")) {
      const json& l = j.at("loss");
      reject_unknown(l, {"lambda_mask", "lambda_rec", "focal_alpha", "focal_gamma", "rec_ignore_pad"}, "loss");
      read(l, "lambda_mask", c.loss.lambda_mask);
      read(l, "lambda_rec", c.loss.lambda_rec);
      read(l, "focal_alpha", c.loss.focal_alpha);
      read(l, "focal_gamma", c.loss.focal_gamma);
      read(l, "rec_ignore_pad", c.loss.rec_ignore_pad);
    }
    read(j, "full_data", c.full_data);
    read(j, "text_data", c.text_data);
    read(j, "weak_data", c.weak_data);
    read(j, "mix_full", c.mix_full);
    read(j, "mix_text", c.mix_text);
    read(j, "mix_weak", c.mix_weak);
    read(j, "learning_rate", c.learning_rate);
    read(j, "weight_decay", c.weight_decay);
    read(j, "poly_power", c.poly_power);
    read(j, "max_iterations", c.max_iterations);
    read(j, "batch_size", c.batch_size);
    read(j, "seed", c.seed);
    read(j, "checkpoint_interval", c.checkpoint_interval);
    read(j, "log_interval", c.log_interval);
    read(j, "grad_clip_norm", c.grad_clip_norm);
    read(j, "adam_beta1", c.adam_beta1);
    read(j, "adam_beta2", c.adam_beta2);
    read(j, "adam_eps", c.adam_eps);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config has a value of the wrong type: ") + e.what());
  }
  c.validate();
  return c;
}

std::string TrainConfig::to_json() const {
  const json j{{"model", model_json(model)},
               {"loss", loss_json(loss)},
               {"full_data", full_data},
               {"text_data", text_data},
               {"weak_data", weak_data},
               {"mix_full", mix_full},
               {"mix_text", mix_text},
               {"mix_weak", mix_weak},
               {"learning_rate", learning_rate},
               {"weight_decay", weight_decay},
               {"poly_power", poly_power},
               {"max_iterations", max_iterations},
               {"batch_size", batch_size},
               {"seed", seed},
               {"checkpoint_interval", checkpoint_interval},
               {"log_interval", log_interval},
               {"grad_clip_norm", grad_clip_norm},
               {"adam_beta1", adam_beta1},
               {"adam_beta2", adam_beta2},
               {"adam_eps", adam_eps}};
  return j.dump(2);
}

}  // namespace spotter
