#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "densegrade/augment.hpp"
#include "densegrade/dataset.hpp"
#include "densegrade/model.hpp"
#include "densegrade/train.hpp"

namespace densegrade {

// Flat "key = value" configuration with dotted section keys. Serialization
// is sorted, so a resolved config file is deterministic.
class KeyValueConfig {
 public:
  static KeyValueConfig parse_string(const std::string& text) {
    KeyValueConfig cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return std::string();
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
      };
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("config line " + std::to_string(line_no) +
                                    ": expected 'key = value', got '" + trimmed + "'");
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty())
        throw std::invalid_argument("config line " + std::to_string(line_no) + ": empty key");
      cfg.values_[key] = value;
    }
    return cfg;
  }

  static KeyValueConfig parse_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_string(buf.str());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return std::stod(it->second);
    } catch (...) {
      throw std::invalid_argument("config: '" + key + "' is not a number: " + it->second);
    }
  }

  long long get_int(const std::string& key, long long fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return std::stoll(it->second);
    } catch (...) {
      throw std::invalid_argument("config: '" + key + "' is not an integer: " + it->second);
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw std::invalid_argument("config: '" + key + "' is not a boolean: " + v);
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void set_double(const std::string& key, double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    values_[key] = os.str();
  }
  void set_int(const std::string& key, long long v) { values_[key] = std::to_string(v); }
  void set_bool(const std::string& key, bool v) { values_[key] = v ? "true" : "false"; }

  std::string serialize() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
    return os.str();
  }

  void write_file(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write config '" + path.string() + "'");
    out << serialize();
  }

 private:
  std::map<std::string, std::string> values_;
};

// Everything a reproducible run needs; the resolved form is echoed into the
// run directory as config.resolved.
struct RunConfig {
  std::filesystem::path dataset_root;
  TaskMode task{};
  std::string model_preset = "tiny";  // tiny | densenet201 | custom
  DenseNetConfig model;
  TrainConfig train;
  AugmentationPolicy augment;
  bool augment_enabled = true;
  bool standardize = true;
  std::array<double, 3> channel_mean = {0, 0, 0};
  std::array<double, 3> channel_std = {1, 1, 1};
  bool has_channel_stats = false;
  int resolution = 256;
  std::filesystem::path output_dir = "densegrade_run";
  std::uint64_t seed = 0;

  LoadOptions load_options() const {
    LoadOptions opts;
    opts.resolution = resolution;
    opts.standardize = standardize && has_channel_stats;
    opts.channel_mean = channel_mean;
    opts.channel_std = channel_std;
    return opts;
  }

  // model config resolved against preset/task/resolution
  DenseNetConfig resolved_model() const {
    DenseNetConfig cfg = model;
    if (model_preset != "custom") cfg = DenseNetConfig::preset(model_preset);
    cfg.num_classes = task.num_classes();
    cfg.input_height = cfg.input_width = resolution;
    cfg.input_channels = 3;
    return cfg;
  }

  static RunConfig from_kv(const KeyValueConfig& kv) {
    RunConfig rc;
    rc.dataset_root = kv.get_string("dataset.root", "");
    rc.task = TaskMode::parse(kv.get_string("task", "fine18"));
    rc.seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));
    rc.output_dir = kv.get_string("output.dir", rc.output_dir.string());
    rc.resolution = static_cast<int>(kv.get_int("model.input_resolution", 256));

    rc.model_preset = kv.get_string("model.preset", "tiny");
    if (rc.model_preset == "custom") {
      rc.model.growth_rate = static_cast<int>(kv.get_int("model.growth_rate", 8));
      rc.model.block_layout.clear();
      std::istringstream layout(kv.get_string("model.block_layout", "2,2"));
      std::string item;
      while (std::getline(layout, item, ',')) rc.model.block_layout.push_back(std::stoi(item));
      rc.model.bottleneck = kv.get_bool("model.bottleneck", true);
      rc.model.compression = kv.get_double("model.compression", 0.5);
      rc.model.stem_channels = static_cast<int>(kv.get_int("model.stem_channels", 16));
    }

    rc.train.learning_rate = kv.get_double("train.learning_rate", rc.train.learning_rate);
    rc.train.batch_size = static_cast<int>(kv.get_int("train.batch_size", rc.train.batch_size));
    rc.train.max_epochs = static_cast<int>(kv.get_int("train.max_epochs", rc.train.max_epochs));
    rc.train.lr_decay_factor = kv.get_double("train.lr_decay_factor", rc.train.lr_decay_factor);
    rc.train.lr_decay_patience =
        static_cast<int>(kv.get_int("train.lr_decay_patience", rc.train.lr_decay_patience));
    rc.train.early_stop_patience =
        static_cast<int>(kv.get_int("train.early_stop_patience", rc.train.early_stop_patience));
    rc.train.min_delta = kv.get_double("train.min_delta", rc.train.min_delta);
    const std::string monitor = kv.get_string("train.monitor", "val_loss");
    if (monitor == "val_loss")
      rc.train.monitor = TrainConfig::Monitor::ValLoss;
    else if (monitor == "val_accuracy")
      rc.train.monitor = TrainConfig::Monitor::ValAccuracy;
    else
      throw std::invalid_argument("config: train.monitor must be val_loss or val_accuracy");
    rc.train.seed = rc.seed;
    rc.train.task = rc.task;

    rc.augment_enabled = kv.get_bool("augment.enabled", true);
    rc.augment.rotation_max_deg = kv.get_double("augment.rotation_max_deg", 30.0);
    rc.augment.width_shift_frac = kv.get_double("augment.width_shift_frac", 0.1);
    rc.augment.height_shift_frac = kv.get_double("augment.height_shift_frac", 0.1);
    rc.augment.shear_max_deg = kv.get_double("augment.shear_max_deg", 15.0);
    rc.augment.hflip_prob = kv.get_double("augment.hflip_prob", 0.5);
    rc.augment.vflip_prob = kv.get_double("augment.vflip_prob", 0.5);
    const std::string fill = kv.get_string("augment.fill_mode", "nearest");
    if (fill == "nearest")
      rc.augment.fill_mode = AugmentationPolicy::Fill::Nearest;
    else if (fill == "constant")
      rc.augment.fill_mode = AugmentationPolicy::Fill::Constant;
    else
      throw std::invalid_argument("config: augment.fill_mode must be nearest or constant");
    rc.augment.fill_value = kv.get_double("augment.fill_value", 0.0);

    rc.standardize = kv.get_bool("data.standardize", true);
    if (kv.has("data.channel_mean") && kv.has("data.channel_std")) {
      auto parse3 = [](const std::string& s) {
        std::array<double, 3> out{};
        std::istringstream in(s);
        std::string item;
        for (int i = 0; i < 3; ++i) {
          if (!std::getline(in, item, ','))
            throw std::invalid_argument("config: expected three comma-separated values: " + s);
          out[i] = std::stod(item);
        }
        return out;
      };
      rc.channel_mean = parse3(kv.get_string("data.channel_mean", ""));
      rc.channel_std = parse3(kv.get_string("data.channel_std", ""));
      rc.has_channel_stats = true;
    }
    return rc;
  }

  KeyValueConfig to_kv() const {
    KeyValueConfig kv;
    kv.set("dataset.root", dataset_root.string());
    kv.set("task", task.name());
    kv.set_int("seed", static_cast<long long>(seed));
    kv.set("output.dir", output_dir.string());
    kv.set("model.preset", model_preset);
    kv.set_int("model.input_resolution", resolution);
    if (model_preset == "custom") {
      kv.set_int("model.growth_rate", model.growth_rate);
      std::ostringstream layout;
      for (std::size_t i = 0; i < model.block_layout.size(); ++i)
        layout << (i ? "," : "") << model.block_layout[i];
      kv.set("model.block_layout", layout.str());
      kv.set_bool("model.bottleneck", model.bottleneck);
      kv.set_double("model.compression", model.compression);
      kv.set_int("model.stem_channels", model.stem_channels);
    }
    kv.set_double("train.learning_rate", train.learning_rate);
    kv.set_int("train.batch_size", train.batch_size);
    kv.set_int("train.max_epochs", train.max_epochs);
    kv.set_double("train.lr_decay_factor", train.lr_decay_factor);
    kv.set_int("train.lr_decay_patience", train.lr_decay_patience);
    kv.set_int("train.early_stop_patience", train.early_stop_patience);
    kv.set_double("train.min_delta", train.min_delta);
    kv.set("train.monitor",
           train.monitor == TrainConfig::Monitor::ValLoss ? "val_loss" : "val_accuracy");
    kv.set_bool("augment.enabled", augment_enabled);
    kv.set_double("augment.rotation_max_deg", augment.rotation_max_deg);
    kv.set_double("augment.width_shift_frac", augment.width_shift_frac);
    kv.set_double("augment.height_shift_frac", augment.height_shift_frac);
    kv.set_double("augment.shear_max_deg", augment.shear_max_deg);
    kv.set_double("augment.hflip_prob", augment.hflip_prob);
    kv.set_double("augment.vflip_prob", augment.vflip_prob);
    kv.set("augment.fill_mode",
           augment.fill_mode == AugmentationPolicy::Fill::Nearest ? "nearest" : "constant");
    kv.set_double("augment.fill_value", augment.fill_value);
    kv.set_bool("data.standardize", standardize);
    if (has_channel_stats) {
      auto join3 = [](const std::array<double, 3>& a) {
        std::ostringstream os;
        os.precision(17);
        os << a[0] << "," << a[1] << "," << a[2];
        return os.str();
      };
      kv.set("data.channel_mean", join3(channel_mean));
      kv.set("data.channel_std", join3(channel_std));
    }
    return kv;
  }
};

}  // namespace densegrade
