#pragma once

// Flat `key = value` configuration. '#' starts a comment; blank lines are
// ignored; every key must appear in the defaults table below.

#include <array>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "kamal/core/error.hpp"

namespace kamal {

struct ConfigKey {
  const char* key;
  const char* value;
  const char* doc;
};

// Canonical defaults. The README mirrors this table.
inline const std::vector<ConfigKey>& config_defaults() {
  static const std::vector<ConfigKey> table = {
      {"seed", "0", "master seed; data, splits, inits and batch order derive from it"},
      {"dataset.kind", "synthetic", "synthetic | idx"},
      {"dataset.classes", "8", "number of classes (synthetic)"},
      {"dataset.per_class", "300", "training samples per class (synthetic)"},
      {"dataset.test_per_class", "100", "test samples per class (synthetic)"},
      {"dataset.noise_sigma", "0.08", "per-pixel Gaussian noise (synthetic)"},
      {"dataset.image", "3x32x32", "CxHxW (synthetic)"},
      {"dataset.train_images", "", "IDX image file, training split (idx)"},
      {"dataset.train_labels", "", "IDX label file, training split (idx)"},
      {"dataset.test_images", "", "IDX image file, test split (idx)"},
      {"dataset.test_labels", "", "IDX label file, test split (idx)"},
      {"teachers.count", "2", "number of teachers; classes are split into this many equal parts"},
      {"teachers.overlap", "", "comma-separated class ids shared by every teacher"},
      {"net.conv_channels", "16,32,48", "teacher conv widths (kernel k, relu, 2x2 max-pool each)"},
      {"net.fc_hidden", "128", "teacher hidden fc width (0 = none)"},
      {"net.kernel", "3", "conv kernel size"},
      {"amalgam.mode", "dfa", "pairwise | ifa | dfa"},
      {"amalgam.ratio", "auto", "student/amalgam width ratio of the concatenated width; auto = sqrt(0.6/N)"},
      {"fam.enabled", "1", "insert FAM modules into the student"},
      {"train.lr", "0.01", "SGD learning rate for teacher training"},
      {"train.momentum", "0.9", "SGD momentum (all stages)"},
      {"train.weight_decay", "0.0005", "SGD weight decay (teacher, joint, baseline)"},
      {"train.batch_size", "32", "mini-batch size (all stages)"},
      {"train.lr_decay", "1", "per-epoch lr multiplier (all stages)"},
      {"train.epochs_teacher", "15", "teacher training epochs"},
      {"train.epochs_ae", "6", "autoencoder epochs per layer"},
      {"train.lr_ae", "0.1", "normalised autoencoder step"},
      {"train.epochs_layerwise", "8", "layer-wise epochs per stage"},
      {"train.lr_layerwise", "0.1", "normalised layer-wise step"},
      {"train.epochs_joint", "15", "joint fine-tuning epochs (baseline gets the same budget)"},
      {"train.lr_joint", "0.0001", "SGD learning rate for joint fine-tuning"},
      {"kd.temperature", "4", "KD baseline softening temperature"},
      {"kd.lr", "0.003", "SGD learning rate for the KD baseline (same epochs as joint)"},
      {"kd.raw_logits", "0", "KD baseline regresses raw concatenated logits instead"},
      {"out.dir", "out", "artifact directory"},
      {"out.wall_time", "0", "write measured wall_seconds (breaks byte-identical CSVs)"},
      {"ablate.seeds", "0,1", "seeds of the ablation factorial"},
      {"ablate.teachers", "2,3,4", "teacher counts of the ablation factorial"},
      {"ablate.modes", "dfa,ifa", "amalgamation modes of the ablation factorial"},
      {"ablate.classes_per_teacher", "4", "classes per teacher in ablation cells"},
  };
  return table;
}

class Config {
 public:
  Config() {
    for (const auto& k : config_defaults()) values_[k.key] = k.value;
  }

  static Config parse(std::string_view text) {
    Config c;
    std::istringstream is{std::string(text)};
    std::string line;
    std::size_t no = 0;
    while (std::getline(is, line)) {
      ++no;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      if (trim(line).empty()) continue;
      const auto eq = line.find('=');
      require<ConfigError>(eq != std::string::npos, "config line ", no, ": expected 'key = value'");
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
  }

  static Config load(const std::filesystem::path& path) {
    std::ifstream is(path);
    require<IoError>(static_cast<bool>(is), "cannot open config '", path.string(), "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
  }

  void set(const std::string& key, const std::string& value) {
    require<ConfigError>(values_.count(key) > 0, "unknown config key '", key, "'");
    values_[key] = value;
  }

  [[nodiscard]] const std::string& str(const std::string& key) const {
    const auto it = values_.find(key);
    require<ConfigError>(it != values_.end(), "unknown config key '", key, "'");
    return it->second;
  }

  [[nodiscard]] std::int64_t integer(const std::string& key) const {
    const std::string& v = str(key);
    std::int64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    require<ConfigError>(ec == std::errc() && p == v.data() + v.size(), "config key '", key, "': '", v,
                         "' is not an integer");
    return out;
  }

  [[nodiscard]] std::size_t count(const std::string& key, std::int64_t min = 0) const {
    const auto v = integer(key);
    require<ConfigError>(v >= min, "config key '", key, "' must be >= ", min, ", got ", v);
    return static_cast<std::size_t>(v);
  }

  [[nodiscard]] double real(const std::string& key) const {
    const std::string& v = str(key);
    double out = 0.0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    require<ConfigError>(ec == std::errc() && p == v.data() + v.size(), "config key '", key, "': '", v,
                         "' is not a number");
    return out;
  }

  [[nodiscard]] bool flag(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "1" || v == "true" || v == "on") return true;
    if (v == "0" || v == "false" || v == "off") return false;
    fail<ConfigError>("config key '", key, "': '", v, "' is not a boolean (0/1)");
  }

  [[nodiscard]] std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  [[nodiscard]] std::vector<std::int64_t> int_list(const std::string& key) const {
    std::vector<std::int64_t> out;
    for (const auto& s : list(key)) {
      std::int64_t v = 0;
      const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      require<ConfigError>(ec == std::errc() && p == s.data() + s.size(), "config key '", key, "': '", s,
                           "' is not an integer");
      out.push_back(v);
    }
    return out;
  }

  // "CxHxW".
  [[nodiscard]] std::array<std::size_t, 3> shape(const std::string& key) const {
    std::array<std::size_t, 3> out{};
    std::stringstream ss(str(key));
    std::string part;
    std::size_t i = 0;
    while (std::getline(ss, part, 'x')) {
      require<ConfigError>(i < 3, "config key '", key, "' must be CxHxW");
      std::size_t v = 0;
      const auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
      require<ConfigError>(ec == std::errc() && p == part.data() + part.size() && v >= 1, "config key '", key,
                           "' must be CxHxW with positive extents");
      out[i++] = v;
    }
    require<ConfigError>(i == 3, "config key '", key, "' must be CxHxW");
    return out;
  }

  // Canonical `key = value` listing in table order.
  [[nodiscard]] std::string dump() const {
    std::ostringstream os;
    for (const auto& k : config_defaults()) os << k.key << " = " << values_.at(k.key) << '\n';
    return os.str();
  }

  friend bool operator==(const Config&, const Config&) = default;

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace kamal
