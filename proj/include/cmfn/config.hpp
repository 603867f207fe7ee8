#pragma once

#include <cstdint>
#include <string>

#include "cmfn/error.hpp"

namespace cmfn {

// Position encoder variants; "pse" is the shipped default, the other two
// exist for ablation runs.
enum class PosMode { pse, fixed, learnable };

// Signal fed back into the language module after iteration 1.
enum class Feedback { fused, language };

struct ModelConfig {
  int64_t T = 26;    // max text length incl. end token
  int64_t cls = 37;  // charset classes
  int64_t C = 64;    // feature width; the position embedding uses the same
  int64_t heads = 8;
  int64_t language_layers = 4;
  int64_t visual_attention_layers = 1;
  int64_t N = 3;  // refinement iterations
  double gamma_v = 1.0;
  double gamma_l = 1.0;
  double gamma_f = 1.0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int64_t batch = 32;
  int64_t epochs = 10;
  uint64_t seed = 1;
  int64_t height = 32;
  int64_t width = 128;
  PosMode pos_mode = PosMode::pse;
  Feedback feedback = Feedback::fused;
  bool loss_all_positions = false;  // train padding positions past the end token
  bool lr_decay = false;            // tenth the rate per epoch after epoch 5
  double clip_norm = 20.0;          // 0 disables clipping
  double val_fraction = 0.1;

  int64_t feature_h() const { return height / 4; }
  int64_t feature_w() const { return width / 4; }
  int64_t spatial() const { return feature_h() * feature_w(); }
};

// Raises ErrorCode::invalid naming the offending field.
void validate(const ModelConfig& config);

// key=value accessors; keys are the field names above.
void config_set(ModelConfig& config, const std::string& key,
                const std::string& value);
std::string config_get(const ModelConfig& config, const std::string& key);

// Canonical text block: one key=value per line, fixed field order.
std::string config_to_text(const ModelConfig& config);
ModelConfig config_from_text(const std::string& text);

std::string pos_mode_name(PosMode mode);
std::string feedback_name(Feedback feedback);

}  // namespace cmfn
