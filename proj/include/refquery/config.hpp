#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "refquery/errors.hpp"

namespace refquery {

enum class FusionMode { Deformable, Dense };

inline FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "deformable") return FusionMode::Deformable;
  if (s == "dense") return FusionMode::Dense;
  throw ConfigError("fusion mode must be 'deformable' or 'dense', got '" + s + "'");
}

inline std::string fusion_mode_name(FusionMode m) {
  return m == FusionMode::Deformable ? "deformable" : "dense";
}

struct ModelConfig {
  int channels = 64;  // shared embedding width C
  int heads = 4;
  int enc_layers = 6;
  int frame_layers = 9;
  int video_layers = 6;
  int frame_queries = 20;
  int video_queries = 20;
  int deform_points = 4;
  FusionMode fusion = FusionMode::Deformable;
  int ffn_mult = 4;
  double ln_eps = 1e-5;
  bool chained_matching = true;  // match against the already-rearranged previous frame
  double mask_threshold = 0.5;
  std::vector<int> scale_channels = {64, 64, 64};  // backbone channels per scale
  int text_channels = 64;

  void validate() const {
    if (channels < 1 || heads < 1 || channels % heads != 0)
      throw ConfigError("model: channels must be positive and divisible by heads");
    if (enc_layers < 1 || frame_layers < 1 || video_layers < 1)
      throw ConfigError("model: all layer counts must be >= 1");
    if (frame_queries < 1) throw ConfigError("model: frame_queries must be >= 1");
    if (video_queries != frame_queries)
      throw ConfigError("model: video_queries must equal frame_queries (aggregation ties them)");
    if (deform_points < 1) throw ConfigError("model: deform_points must be >= 1");
    if (ffn_mult < 1) throw ConfigError("model: ffn_mult must be >= 1");
    if (ln_eps <= 0) throw ConfigError("model: ln_eps must be > 0");
    if (mask_threshold <= 0 || mask_threshold >= 1)
      throw ConfigError("model: mask_threshold must be in (0,1)");
    if (scale_channels.empty()) throw ConfigError("model: scale_channels must be non-empty");
    for (int c : scale_channels)
      if (c < 1) throw ConfigError("model: scale_channels entries must be >= 1");
    if (text_channels < 1) throw ConfigError("model: text_channels must be >= 1");
  }
};

struct LossConfig {
  double lambda_sim = 0.5;
  double lambda_dice = 1.0;
  double lambda_bce = 1.0;
  double lambda_cls = 1.0;
  double learning_rate = 5e-5;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int iterations = 300;
  int clip_length = 8;  // frames sampled per training clip

  void validate() const {
    if (lambda_sim < 0 || lambda_dice < 0 || lambda_bce < 0 || lambda_cls < 0)
      throw ConfigError("loss: lambda weights must be >= 0");
    if (learning_rate < 0) throw ConfigError("loss: learning_rate must be >= 0");
    if (weight_decay < 0) throw ConfigError("loss: weight_decay must be >= 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ConfigError("loss: betas must lie in [0,1)");
    if (iterations < 0) throw ConfigError("loss: iterations must be >= 0");
    if (clip_length < 1) throw ConfigError("loss: clip_length must be >= 1");
  }
};

struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  std::uint64_t seed = 1;

  void validate() const {
    model.validate();
    loss.validate();
  }
};

// --- JSON round trip --------------------------------------------------------

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"channels", m.channels},
          {"heads", m.heads},
          {"enc_layers", m.enc_layers},
          {"frame_layers", m.frame_layers},
          {"video_layers", m.video_layers},
          {"frame_queries", m.frame_queries},
          {"video_queries", m.video_queries},
          {"deform_points", m.deform_points},
          {"fusion", fusion_mode_name(m.fusion)},
          {"ffn_mult", m.ffn_mult},
          {"ln_eps", m.ln_eps},
          {"chained_matching", m.chained_matching},
          {"mask_threshold", m.mask_threshold},
          {"scale_channels", m.scale_channels},
          {"text_channels", m.text_channels}};
}

inline nlohmann::json to_json(const LossConfig& l) {
  return {{"lambda_sim", l.lambda_sim},
          {"lambda_dice", l.lambda_dice},
          {"lambda_bce", l.lambda_bce},
          {"lambda_cls", l.lambda_cls},
          {"learning_rate", l.learning_rate},
          {"weight_decay", l.weight_decay},
          {"beta1", l.beta1},
          {"beta2", l.beta2},
          {"iterations", l.iterations},
          {"clip_length", l.clip_length}};
}

inline nlohmann::json to_json(const RunConfig& r) {
  return {{"model", to_json(r.model)}, {"loss", to_json(r.loss)}, {"seed", r.seed}};
}

namespace detail {
template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}
}  // namespace detail

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  detail::read_field(j, "channels", m.channels);
  detail::read_field(j, "heads", m.heads);
  detail::read_field(j, "enc_layers", m.enc_layers);
  detail::read_field(j, "frame_layers", m.frame_layers);
  detail::read_field(j, "video_layers", m.video_layers);
  detail::read_field(j, "frame_queries", m.frame_queries);
  detail::read_field(j, "video_queries", m.video_queries);
  detail::read_field(j, "deform_points", m.deform_points);
  if (j.contains("fusion")) m.fusion = parse_fusion_mode(j.at("fusion").get<std::string>());
  detail::read_field(j, "ffn_mult", m.ffn_mult);
  detail::read_field(j, "ln_eps", m.ln_eps);
  detail::read_field(j, "chained_matching", m.chained_matching);
  detail::read_field(j, "mask_threshold", m.mask_threshold);
  detail::read_field(j, "scale_channels", m.scale_channels);
  detail::read_field(j, "text_channels", m.text_channels);
  return m;
}

inline LossConfig loss_config_from_json(const nlohmann::json& j) {
  LossConfig l;
  detail::read_field(j, "lambda_sim", l.lambda_sim);
  detail::read_field(j, "lambda_dice", l.lambda_dice);
  detail::read_field(j, "lambda_bce", l.lambda_bce);
  detail::read_field(j, "lambda_cls", l.lambda_cls);
  detail::read_field(j, "learning_rate", l.learning_rate);
  detail::read_field(j, "weight_decay", l.weight_decay);
  detail::read_field(j, "beta1", l.beta1);
  detail::read_field(j, "beta2", l.beta2);
  detail::read_field(j, "iterations", l.iterations);
  detail::read_field(j, "clip_length", l.clip_length);
  return l;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig r;
  if (j.contains("model")) r.model = model_config_from_json(j.at("model"));
  if (j.contains("loss")) r.loss = loss_config_from_json(j.at("loss"));
  detail::read_field(j, "seed", r.seed);
  return r;
}

// Applies a dotted-path override like "model.channels=32" onto the config
// JSON, preserving the declared type of the target field.
inline void apply_override(nlohmann::json& j, const std::string& key, const std::string& value) {
  nlohmann::json* cur = &j;
  std::size_t pos = 0;
  std::string path = key;
  while (true) {
    const std::size_t dot = path.find('.', pos);
    const std::string part = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (dot == std::string::npos) {
      nlohmann::json parsed;
      try {
        parsed = nlohmann::json::parse(value);
      } catch (const nlohmann::json::exception&) {
        parsed = value;  // bare strings are fine
      }
      (*cur)[part] = parsed;
      return;
    }
    cur = &(*cur)[part];
    pos = dot + 1;
  }
}

}  // namespace refquery
