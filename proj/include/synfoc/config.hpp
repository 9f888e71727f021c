#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "synfoc/core.hpp"
#include "synfoc/optim.hpp"

namespace synfoc {

enum class Precision { kFloat32, kFloat64 };

/// Everything one training run needs. Defaults follow the reference recipe:
/// batches of 4 labeled + 4 unlabeled, tau = 0.95, EMA 0.99, SGD(0.03, 0.9, 1e-4) for the
/// conventional model, AdamW(1e-4, 0.9/0.999, 0.1) for the foundation model, adapter rank 4.
struct TrainConfig {
  std::string data_dir;
  std::string foundation_ckpt;
  std::string out_dir = "run";
  std::uint64_t seed = 1;
  Strategy strategy = Strategy::kSynFoC;
  std::size_t t_max = 2000;
  std::size_t labeled_batch = 4;
  std::size_t unlabeled_batch = 4;
  double tau = 0.95;
  double ema_decay = 0.99;
  OptimizerConfig conv_opt = OptimizerConfig::sgd(0.03, 0.9, 1e-4);
  OptimizerConfig found_opt = OptimizerConfig::adamw(1e-4, 0.9, 0.999, 0.1);
  std::size_t lora_rank = 4;
  bool cdcr = true;
  bool smc = true;            // off: the synfoc strategy falls back to a constant 0.5 ratio
  bool certain_paste = true;  // weight 1 over the pasted labeled rectangle
  SNorm s_norm = SNorm::kElementCount;
  double paste_min = 0.25;
  double paste_max = 0.5;
  std::size_t eval_interval = 500;
  Precision precision = Precision::kFloat32;
  std::vector<Strategy> suite_strategies = all_strategies();

  void validate() const {
    if (!(tau > 0 && tau < 1)) throw ConfigError("tau must lie in (0, 1)");
    if (t_max == 0) throw ConfigError("t_max must be positive");
    if (labeled_batch == 0 || unlabeled_batch == 0) throw ConfigError("batch sizes must be positive");
    if (!(ema_decay >= 0 && ema_decay < 1)) throw ConfigError("ema_decay must lie in [0, 1)");
    if (lora_rank == 0) throw ConfigError("lora_rank must be positive");
    if (!(paste_min >= 0 && paste_min <= paste_max && paste_max <= 1)) throw ConfigError("bad paste ratio range");
  }
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ConfigError("config key '" + key + "' expects a boolean, got '" + v + "'");
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
  }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    auto d = std::stoull(v, &used);
    if (used != v.size() || (!v.empty() && v[0] == '-')) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' expects a nonnegative integer, got '" + v + "'");
  }
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Applies one `key = value` setting.
inline void apply_setting(TrainConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  if (key == "data") c.data_dir = v;
  else if (key == "foundation_ckpt") c.foundation_ckpt = v;
  else if (key == "out") c.out_dir = v;
  else if (key == "seed") c.seed = parse_uint(key, v);
  else if (key == "strategy") c.strategy = parse_strategy(v);
  else if (key == "t_max") c.t_max = parse_uint(key, v);
  else if (key == "labeled_batch") c.labeled_batch = parse_uint(key, v);
  else if (key == "unlabeled_batch") c.unlabeled_batch = parse_uint(key, v);
  else if (key == "tau") c.tau = parse_double(key, v);
  else if (key == "ema_decay") c.ema_decay = parse_double(key, v);
  else if (key == "conv_lr") c.conv_opt.lr = parse_double(key, v);
  else if (key == "conv_momentum") c.conv_opt.momentum = parse_double(key, v);
  else if (key == "conv_weight_decay") c.conv_opt.weight_decay = parse_double(key, v);
  else if (key == "found_lr") c.found_opt.lr = parse_double(key, v);
  else if (key == "found_beta1") c.found_opt.beta1 = parse_double(key, v);
  else if (key == "found_beta2") c.found_opt.beta2 = parse_double(key, v);
  else if (key == "found_weight_decay") c.found_opt.weight_decay = parse_double(key, v);
  else if (key == "lora_rank") c.lora_rank = parse_uint(key, v);
  else if (key == "cdcr") c.cdcr = parse_bool(key, v);
  else if (key == "smc") c.smc = parse_bool(key, v);
  else if (key == "certain_paste") c.certain_paste = parse_bool(key, v);
  else if (key == "s_norm") {
    if (v == "elements") c.s_norm = SNorm::kElementCount;
    else if (v == "literal") c.s_norm = SNorm::kLiteral;
    else throw ConfigError("s_norm must be 'elements' or 'literal'");
  } else if (key == "paste_min") c.paste_min = parse_double(key, v);
  else if (key == "paste_max") c.paste_max = parse_double(key, v);
  else if (key == "eval_interval") c.eval_interval = parse_uint(key, v);
  else if (key == "precision") {
    if (v == "f32") c.precision = Precision::kFloat32;
    else if (v == "f64") c.precision = Precision::kFloat64;
    else throw ConfigError("precision must be 'f32' or 'f64'");
  } else if (key == "strategies") {
    c.suite_strategies.clear();
    std::istringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) c.suite_strategies.push_back(parse_strategy(trim(item)));
    if (c.suite_strategies.empty()) throw ConfigError("strategies list is empty");
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

/// Flat `key = value` text; '#' starts a comment.
inline TrainConfig parse_config(std::istream& is, TrainConfig base = {}) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    apply_setting(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  base.validate();
  return base;
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  return parse_config(is);
}

inline std::string format_config(const TrainConfig& c) {
  std::ostringstream os;
  os.precision(10);
  os << "data = " << c.data_dir << '\n'
     << "foundation_ckpt = " << c.foundation_ckpt << '\n'
     << "out = " << c.out_dir << '\n'
     << "seed = " << c.seed << '\n'
     << "strategy = " << to_string(c.strategy) << '\n'
     << "t_max = " << c.t_max << '\n'
     << "labeled_batch = " << c.labeled_batch << '\n'
     << "unlabeled_batch = " << c.unlabeled_batch << '\n'
     << "tau = " << c.tau << '\n'
     << "ema_decay = " << c.ema_decay << '\n'
     << "conv_lr = " << c.conv_opt.lr << '\n'
     << "conv_momentum = " << c.conv_opt.momentum << '\n'
     << "conv_weight_decay = " << c.conv_opt.weight_decay << '\n'
     << "found_lr = " << c.found_opt.lr << '\n'
     << "found_beta1 = " << c.found_opt.beta1 << '\n'
     << "found_beta2 = " << c.found_opt.beta2 << '\n'
     << "found_weight_decay = " << c.found_opt.weight_decay << '\n'
     << "lora_rank = " << c.lora_rank << '\n'
     << "cdcr = " << (c.cdcr ? "on" : "off") << '\n'
     << "smc = " << (c.smc ? "on" : "off") << '\n'
     << "certain_paste = " << (c.certain_paste ? "on" : "off") << '\n'
     << "s_norm = " << (c.s_norm == SNorm::kElementCount ? "elements" : "literal") << '\n'
     << "paste_min = " << c.paste_min << '\n'
     << "paste_max = " << c.paste_max << '\n'
     << "eval_interval = " << c.eval_interval << '\n'
     << "precision = " << (c.precision == Precision::kFloat32 ? "f32" : "f64") << '\n'
     << "strategies = ";
  for (std::size_t i = 0; i < c.suite_strategies.size(); ++i) os << (i ? "," : "") << to_string(c.suite_strategies[i]);
  os << '\n';
  return os.str();
}

}  // namespace synfoc
