#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vmx/errors.hpp"
#include "vmx/network.hpp"

namespace vmx {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  double base_lr = 6e-5;
  double weight_decay = 0.01;
  double loss_mix = 0.5;  // weight of soft Dice; 1 - loss_mix goes to cross-entropy
  std::uint64_t seed = 0;
  bool augment = true;
  std::string data_path;
  std::string checkpoint_path = "vmx_best.ckpt";
  ModelConfig model;

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(base_lr >= 0.0)) throw ConfigError("base_lr must be non-negative");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(loss_mix >= 0.0 && loss_mix <= 1.0)) throw ConfigError("loss_mix must lie in [0, 1]");
    try {
      model.validate();
    } catch (const ParameterError& e) {
      throw ConfigError(e.what());
    }
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out{};
  in >> out;
  if (!in || !(in >> std::ws).eof()) throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
  if constexpr (std::is_unsigned_v<T>) {
    if (value.find('-') != std::string::npos) throw ConfigError("config key '" + key + "' must be non-negative");
  }
  return out;
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& value) {
  std::vector<std::size_t> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<std::size_t>(key, trim(item)));
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + value + "'");
}

}  // namespace detail

// `key = value` lines; `#` starts a comment; blank lines ignored.
inline TrainConfig parse_train_config(std::istream& in, const std::string& source = "<config>") {
  TrainConfig c;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, Setter> setters{
      {"epochs", [&](auto& k, auto& v) { c.epochs = detail::parse_number<std::size_t>(k, v); }},
      {"batch_size", [&](auto& k, auto& v) { c.batch_size = detail::parse_number<std::size_t>(k, v); }},
      {"base_lr", [&](auto& k, auto& v) { c.base_lr = detail::parse_number<double>(k, v); }},
      {"weight_decay", [&](auto& k, auto& v) { c.weight_decay = detail::parse_number<double>(k, v); }},
      {"loss_mix", [&](auto& k, auto& v) { c.loss_mix = detail::parse_number<double>(k, v); }},
      {"seed", [&](auto& k, auto& v) { c.seed = detail::parse_number<std::uint64_t>(k, v); }},
      {"augment", [&](auto& k, auto& v) { c.augment = detail::parse_bool(k, v); }},
      {"data", [&](auto&, auto& v) { c.data_path = v; }},
      {"checkpoint", [&](auto&, auto& v) { c.checkpoint_path = v; }},
      {"stage_channels", [&](auto& k, auto& v) { c.model.stage_channels = detail::parse_list(k, v); }},
      {"stage_depths", [&](auto& k, auto& v) { c.model.stage_depths = detail::parse_list(k, v); }},
      {"state_dim", [&](auto& k, auto& v) { c.model.state_dim = detail::parse_number<std::size_t>(k, v); }},
      {"cgm_bottleneck_ratio",
       [&](auto& k, auto& v) { c.model.cgm_bottleneck_ratio = detail::parse_number<std::size_t>(k, v); }},
      {"input_size", [&](auto& k, auto& v) { c.model.input_size = detail::parse_number<std::size_t>(k, v); }},
      {"init_seed", [&](auto& k, auto& v) { c.model.init_seed = detail::parse_number<std::uint64_t>(k, v); }},
  };
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError(source + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    try {
      it->second(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

inline TrainConfig parse_train_config_string(const std::string& text) {
  std::istringstream in(text);
  return parse_train_config(in);
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  return parse_train_config(in, path);
}

}  // namespace vmx
