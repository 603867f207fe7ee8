#include "cmfn/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <vector>

#include "cmfn/charset.hpp"

namespace cmfn {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

int64_t parse_i64(const std::string& key, const std::string& value) {
  char* end = nullptr;
  long long v = std::strtoll(value.c_str(), &end, 10);
  if (end == value.c_str() || *end != '\0')
    raise(ErrorCode::invalid, "config: '" + value + "' is not an integer for " + key);
  return static_cast<int64_t>(v);
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
  char* end = nullptr;
  unsigned long long v = std::strtoull(value.c_str(), &end, 10);
  if (end == value.c_str() || *end != '\0')
    raise(ErrorCode::invalid, "config: '" + value + "' is not an integer for " + key);
  return static_cast<uint64_t>(v);
}

double parse_f64(const std::string& key, const std::string& value) {
  char* end = nullptr;
  double v = std::strtod(value.c_str(), &end);
  if (end == value.c_str() || *end != '\0')
    raise(ErrorCode::invalid, "config: '" + value + "' is not a number for " + key);
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true") return true;
  if (value == "0" || value == "false") return false;
  raise(ErrorCode::invalid, "config: '" + value + "' is not a boolean for " + key);
}

const std::vector<std::string>& field_order() {
  static const std::vector<std::string> order = {
      "T",       "cls",      "C",         "heads",
      "language_layers",     "visual_attention_layers",
      "N",       "gamma_v",  "gamma_l",   "gamma_f",
      "lr",      "beta1",    "beta2",     "adam_eps",
      "batch",   "epochs",   "seed",      "height",
      "width",   "pos_mode", "feedback",  "loss_all_positions",
      "lr_decay", "clip_norm", "val_fraction"};
  return order;
}

}  // namespace

std::string pos_mode_name(PosMode mode) {
  switch (mode) {
    case PosMode::pse: return "pse";
    case PosMode::fixed: return "fixed";
    case PosMode::learnable: return "learnable";
  }
  return "pse";
}

std::string feedback_name(Feedback feedback) {
  return feedback == Feedback::fused ? "fused" : "language";
}

void config_set(ModelConfig& c, const std::string& key,
                const std::string& value) {
  if (key == "T") c.T = parse_i64(key, value);
  else if (key == "cls") c.cls = parse_i64(key, value);
  else if (key == "C") c.C = parse_i64(key, value);
  else if (key == "heads") c.heads = parse_i64(key, value);
  else if (key == "language_layers") c.language_layers = parse_i64(key, value);
  else if (key == "visual_attention_layers")
    c.visual_attention_layers = parse_i64(key, value);
  else if (key == "N") c.N = parse_i64(key, value);
  else if (key == "gamma_v") c.gamma_v = parse_f64(key, value);
  else if (key == "gamma_l") c.gamma_l = parse_f64(key, value);
  else if (key == "gamma_f") c.gamma_f = parse_f64(key, value);
  else if (key == "lr") c.lr = parse_f64(key, value);
  else if (key == "beta1") c.beta1 = parse_f64(key, value);
  else if (key == "beta2") c.beta2 = parse_f64(key, value);
  else if (key == "adam_eps") c.adam_eps = parse_f64(key, value);
  else if (key == "batch") c.batch = parse_i64(key, value);
  else if (key == "epochs") c.epochs = parse_i64(key, value);
  else if (key == "seed") c.seed = parse_u64(key, value);
  else if (key == "height") c.height = parse_i64(key, value);
  else if (key == "width") c.width = parse_i64(key, value);
  else if (key == "pos_mode") {
    if (value == "pse") c.pos_mode = PosMode::pse;
    else if (value == "fixed") c.pos_mode = PosMode::fixed;
    else if (value == "learnable") c.pos_mode = PosMode::learnable;
    else raise(ErrorCode::invalid, "config: pos_mode must be pse|fixed|learnable");
  } else if (key == "feedback") {
    if (value == "fused") c.feedback = Feedback::fused;
    else if (value == "language") c.feedback = Feedback::language;
    else raise(ErrorCode::invalid, "config: feedback must be fused|language");
  } else if (key == "loss_all_positions")
    c.loss_all_positions = parse_bool(key, value);
  else if (key == "lr_decay") c.lr_decay = parse_bool(key, value);
  else if (key == "clip_norm") c.clip_norm = parse_f64(key, value);
  else if (key == "val_fraction") c.val_fraction = parse_f64(key, value);
  else raise(ErrorCode::invalid, "config: unknown key '" + key + "'");
}

std::string config_get(const ModelConfig& c, const std::string& key) {
  if (key == "T") return std::to_string(c.T);
  if (key == "cls") return std::to_string(c.cls);
  if (key == "C") return std::to_string(c.C);
  if (key == "heads") return std::to_string(c.heads);
  if (key == "language_layers") return std::to_string(c.language_layers);
  if (key == "visual_attention_layers")
    return std::to_string(c.visual_attention_layers);
  if (key == "N") return std::to_string(c.N);
  if (key == "gamma_v") return fmt_double(c.gamma_v);
  if (key == "gamma_l") return fmt_double(c.gamma_l);
  if (key == "gamma_f") return fmt_double(c.gamma_f);
  if (key == "lr") return fmt_double(c.lr);
  if (key == "beta1") return fmt_double(c.beta1);
  if (key == "beta2") return fmt_double(c.beta2);
  if (key == "adam_eps") return fmt_double(c.adam_eps);
  if (key == "batch") return std::to_string(c.batch);
  if (key == "epochs") return std::to_string(c.epochs);
  if (key == "seed") return std::to_string(c.seed);
  if (key == "height") return std::to_string(c.height);
  if (key == "width") return std::to_string(c.width);
  if (key == "pos_mode") return pos_mode_name(c.pos_mode);
  if (key == "feedback") return feedback_name(c.feedback);
  if (key == "loss_all_positions") return c.loss_all_positions ? "1" : "0";
  if (key == "lr_decay") return c.lr_decay ? "1" : "0";
  if (key == "clip_norm") return fmt_double(c.clip_norm);
  if (key == "val_fraction") return fmt_double(c.val_fraction);
  raise(ErrorCode::invalid, "config: unknown key '" + key + "'");
}

std::string config_to_text(const ModelConfig& c) {
  std::ostringstream os;
  for (const std::string& key : field_order())
    os << key << "=" << config_get(c, key) << "\n";
  return os.str();
}

ModelConfig config_from_text(const std::string& text) {
  ModelConfig c;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      raise(ErrorCode::format,
            "config text line " + std::to_string(lineno) + ": missing '='");
    config_set(c, line.substr(0, eq), line.substr(eq + 1));
  }
  return c;
}

void validate(const ModelConfig& c) {
  auto bad = [](const std::string& what) {
    raise(ErrorCode::invalid, "config: " + what);
  };
  if (c.T < 2) bad("T must be >= 2");
  if (c.cls != Charset::kClassCount)
    bad("cls must be " + std::to_string(Charset::kClassCount) +
        " (charset contract)");
  if (c.C < 4 || c.C % 4 != 0) bad("C must be a positive multiple of 4");
  if (c.C % 2 != 0) bad("C must be even");
  if (c.heads < 1 || c.C % c.heads != 0) bad("heads must divide C");
  if (c.language_layers < 1) bad("language_layers must be >= 1");
  if (c.visual_attention_layers != 1)
    bad("visual_attention_layers is structurally 1");
  if (c.N < 1) bad("N must be >= 1");
  if (c.gamma_v < 0 || c.gamma_l < 0 || c.gamma_f < 0)
    bad("balance factors must be >= 0");
  if (!(c.lr > 0)) bad("lr must be positive");
  if (!(c.beta1 >= 0 && c.beta1 < 1)) bad("beta1 must be in [0,1)");
  if (!(c.beta2 >= 0 && c.beta2 < 1)) bad("beta2 must be in [0,1)");
  if (!(c.adam_eps > 0)) bad("adam_eps must be positive");
  if (c.batch < 1) bad("batch must be >= 1");
  if (c.epochs < 0) bad("epochs must be >= 0");
  if (c.height < 4 || c.height % 4 != 0) bad("height must be a multiple of 4");
  if (c.width < 4 || c.width % 4 != 0) bad("width must be a multiple of 4");
  if (c.clip_norm < 0) bad("clip_norm must be >= 0");
  if (!(c.val_fraction >= 0 && c.val_fraction < 1))
    bad("val_fraction must be in [0,1)");
}

}  // namespace cmfn
