#pragma once

// Line-oriented `key = value` settings with '#' comments, and the training,
// synthetic-data and model settings they populate.

#include <array>
#include <charconv>
#include <cstdint>
#include <istream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lsnet/adam.hpp"
#include "lsnet/model.hpp"

namespace lsnet {

/// Malformed settings or values out of range. Maps to the usage exit code.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Ordered key/value pairs; a repeated key overrides the earlier value.
struct KeyValues {
  std::vector<std::pair<std::string, std::string>> entries;

  void set(const std::string& key, std::string value) {
    for (auto& [k, v] : entries)
      if (k == key) {
        v = std::move(value);
        return;
      }
    entries.emplace_back(key, std::move(value));
  }
};

namespace config_detail {

inline std::string trim(std::string s) {
  s.erase(0, s.find_first_not_of(" \t\r"));
  s.erase(s.find_last_not_of(" \t\r") + 1);
  return s;
}

template <class N>
N number(const std::string& key, const std::string& text) {
  N v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end) throw ConfigError("'" + key + "' expects a number, got '" + text + "'");
  return v;
}

inline std::array<double, 3> triple(const std::string& key, const std::string& text) {
  std::array<double, 3> out{};
  std::istringstream is(text);
  std::string part;
  std::size_t n = 0;
  while (std::getline(is, part, ',')) {
    if (n == 3) break;
    out[n++] = number<double>(key, trim(part));
  }
  if (n != 3 || is.peek() != EOF) throw ConfigError("'" + key + "' expects three comma-separated numbers");
  return out;
}

inline std::string format_triple(const std::array<double, 3>& v) {
  std::ostringstream os;
  os.precision(17);
  os << v[0] << ',' << v[1] << ',' << v[2];
  return os.str();
}

}  // namespace config_detail

inline KeyValues parse_key_values(std::istream& in, const std::string& source = "config") {
  KeyValues kv;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    std::string key = config_detail::trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
    kv.set(key, config_detail::trim(line.substr(eq + 1)));
  }
  return kv;
}

inline KeyValues parse_key_values(const std::string& text) {
  std::istringstream is(text);
  return parse_key_values(is);
}

// ---------------------------------------------------------------------------
// Model

/// Applies one model key. Returns false when the key is not a model setting.
inline bool apply_model_key(LSNetConfig& m, const std::string& key, const std::string& value) {
  using config_detail::number;
  if (key == "lift_channels") m.lift_channels = number<std::size_t>(key, value);
  else if (key == "grid_rows") m.grid.rows = number<std::size_t>(key, value);
  else if (key == "grid_cols") m.grid.cols = number<std::size_t>(key, value);
  else if (key == "topk") m.topk = number<std::size_t>(key, value);
  else if (key == "kv_pool") m.kv_pool = number<std::size_t>(key, value);
  else if (key == "input_height") m.input_height = number<std::size_t>(key, value);
  else if (key == "input_width") m.input_width = number<std::size_t>(key, value);
  else if (key == "ablation") {
    try {
      m.ablation = Ablation::parse(value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  } else return false;
  return true;
}

/// Canonical text form stored in checkpoints.
inline std::string model_config_text(const LSNetConfig& m) {
  std::ostringstream os;
  os << "lift_channels = " << m.lift_channels << '\n'
     << "grid_rows = " << m.grid.rows << '\n'
     << "grid_cols = " << m.grid.cols << '\n'
     << "topk = " << m.topk << '\n'
     << "kv_pool = " << m.kv_pool << '\n'
     << "ablation = " << m.ablation.str() << '\n'
     << "input_height = " << m.input_height << '\n'
     << "input_width = " << m.input_width << '\n';
  return os.str();
}

inline LSNetConfig parse_model_config(const std::string& text) {
  LSNetConfig m;
  for (const auto& [k, v] : parse_key_values(text).entries)
    if (!apply_model_key(m, k, v)) throw ConfigError("unknown model key '" + k + "'");
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Training and synthetic data

struct TrainConfig {
  std::size_t epochs = 1000;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::size_t height = 256;  // input resolution
  std::size_t width = 256;
  std::size_t val_interval = 10;
  AdamHyper adam;  // adam.lr is the learning rate
  LSNetConfig model;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (!(adam.lr > 0)) throw ConfigError("lr must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (height < 1 || width < 1) throw ConfigError("resolution must be positive");
    if (val_interval < 1) throw ConfigError("val_interval must be at least 1");
    try {
      model.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
};

/// Procedural clean images degraded by the scattering simulator.
struct SyntheticConfig {
  std::size_t count = 20;
  std::size_t held_out = 5;  // last images, tagged "val"
  std::size_t size = 0;      // 0: the training resolution
  std::array<double, 3> eta{0.8, 0.2, 0.4};
  std::array<double, 3> ambient{0.1, 0.6, 0.5};
  std::string depth = "ramp";  // ramp | radial | random
  double depth_near = 0.5;
  double depth_far = 2.5;
  double fs_gain = 0.0;

  void validate() const {
    if (count < 1) throw ConfigError("synth_count must be at least 1");
    if (held_out >= count) throw ConfigError("synth_held_out must leave at least one training image");
    for (double e : eta)
      if (e < 0) throw ConfigError("eta must be non-negative");
    if (depth != "ramp" && depth != "radial" && depth != "random")
      throw ConfigError("depth must be ramp, radial or random, got '" + depth + "'");
    if (!(depth_near >= 0 && depth_far >= depth_near)) throw ConfigError("need 0 <= depth_near <= depth_far");
  }
};

struct Settings {
  TrainConfig train;
  SyntheticConfig synth;

  /// Applies every key; unknown keys are errors.
  void apply(const KeyValues& kv) {
    using config_detail::number;
    using config_detail::triple;
    for (const auto& [key, value] : kv.entries) {
      if (apply_model_key(train.model, key, value)) continue;
      if (key == "epochs") train.epochs = number<std::size_t>(key, value);
      else if (key == "lr") train.adam.lr = number<double>(key, value);
      else if (key == "beta1") train.adam.beta1 = number<double>(key, value);
      else if (key == "beta2") train.adam.beta2 = number<double>(key, value);
      else if (key == "adam_eps") train.adam.eps = number<double>(key, value);
      else if (key == "batch_size") train.batch_size = number<std::size_t>(key, value);
      else if (key == "seed") train.seed = number<std::uint64_t>(key, value);
      else if (key == "resolution") train.height = train.width = number<std::size_t>(key, value);
      else if (key == "height") train.height = number<std::size_t>(key, value);
      else if (key == "width") train.width = number<std::size_t>(key, value);
      else if (key == "val_interval") train.val_interval = number<std::size_t>(key, value);
      else if (key == "synth_count") synth.count = number<std::size_t>(key, value);
      else if (key == "synth_held_out") synth.held_out = number<std::size_t>(key, value);
      else if (key == "synth_size") synth.size = number<std::size_t>(key, value);
      else if (key == "eta") synth.eta = triple(key, value);
      else if (key == "ambient") synth.ambient = triple(key, value);
      else if (key == "depth") synth.depth = value;
      else if (key == "depth_near") synth.depth_near = number<double>(key, value);
      else if (key == "depth_far") synth.depth_far = number<double>(key, value);
      else if (key == "fs_gain") synth.fs_gain = number<double>(key, value);
      else throw ConfigError("unknown setting '" + key + "'");
    }
    train.model.input_height = train.height;
    train.model.input_width = train.width;
  }

  void validate() const {
    train.validate();
    synth.validate();
  }

  /// Full text form, parseable by apply().
  std::string text() const {
    std::ostringstream os;
    os.precision(17);
    os << "epochs = " << train.epochs << '\n'
       << "lr = " << train.adam.lr << '\n'
       << "beta1 = " << train.adam.beta1 << '\n'
       << "beta2 = " << train.adam.beta2 << '\n'
       << "adam_eps = " << train.adam.eps << '\n'
       << "batch_size = " << train.batch_size << '\n'
       << "seed = " << train.seed << '\n'
       << "height = " << train.height << '\n'
       << "width = " << train.width << '\n'
       << "val_interval = " << train.val_interval << '\n'
       << model_config_text(train.model)
       << "synth_count = " << synth.count << '\n'
       << "synth_held_out = " << synth.held_out << '\n'
       << "synth_size = " << synth.size << '\n'
       << "eta = " << config_detail::format_triple(synth.eta) << '\n'
       << "ambient = " << config_detail::format_triple(synth.ambient) << '\n'
       << "depth = " << synth.depth << '\n'
       << "depth_near = " << synth.depth_near << '\n'
       << "depth_far = " << synth.depth_far << '\n'
       << "fs_gain = " << synth.fs_gain << '\n';
    return os.str();
  }
};

}  // namespace lsnet
