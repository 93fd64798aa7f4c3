#pragma once

// Experiment manifest: an INI file whose keys are all declared in a fixed
// schema. Unknown sections or keys are errors. The effective configuration
// (defaults + file + command-line overrides) is rendered in canonical form and
// hashed, so two runs share a hash iff they share every setting.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <map>
#include <sstream>

#include "tcx/core.hpp"

namespace tcx {

enum class ValueType { Int, Double, Bool, String, DoubleList, IntList };

struct ManifestKey {
  const char* section;  // "" for top-level keys
  const char* key;
  ValueType type;
  const char* default_value;
  const char* choices = nullptr;  // '|'-separated allowed strings
};

// clang-format off
inline const std::vector<ManifestKey>& manifest_schema() {
  static const std::vector<ManifestKey> keys = {
      {"", "seed", ValueType::Int, "1"},
      {"", "run_id", ValueType::String, "run"},
      {"", "out", ValueType::String, ""},
      {"model", "arch", ValueType::String, "stacked", "stacked|residual"},
      {"model", "widths", ValueType::IntList, "32,32,32,32,32,32"},
      {"model", "width", ValueType::Int, "32"},
      {"model", "blocks", ValueType::Int, "6"},
      {"model", "gate", ValueType::String, "relu", "relu|swish"},
      {"model", "swish_beta", ValueType::Double, "10"},
      {"model", "dropout", ValueType::Double, "0"},
      {"data", "source", ValueType::String, "synthetic", "synthetic|idx"},
      {"data", "n_train", ValueType::Int, "600"},
      {"data", "n_test", ValueType::Int, "600"},
      {"data", "dim", ValueType::Int, "16"},
      {"data", "classes", ValueType::Int, "4"},
      {"data", "separation", ValueType::Double, "3"},
      {"data", "label_noise", ValueType::Double, "0"},
      {"data", "normalize", ValueType::Bool, "true"},
      {"data", "grayscale", ValueType::String, "none", "none|mean"},
      {"data", "train_images", ValueType::String, ""},
      {"data", "train_labels", ValueType::String, ""},
      {"data", "test_images", ValueType::String, ""},
      {"data", "test_labels", ValueType::String, ""},
      {"train", "epochs", ValueType::Int, "20"},
      {"train", "batch_size", ValueType::Int, "32"},
      {"train", "optimizer", ValueType::String, "adam", "adam|sgd"},
      {"train", "lr", ValueType::Double, "0.001"},
      {"train", "momentum", ValueType::Double, "0"},
      {"train", "regularizer", ValueType::String, "none", "none|l1|l2"},
      {"train", "reg_weight", ValueType::Double, "0"},
      {"train", "recenter", ValueType::Bool, "false"},
      {"estimate", "estimator", ValueType::String, "kde", "kde|exact|both"},
      {"estimate", "kappa_fc", ValueType::Double, "0.01"},
      {"estimate", "kappa_conv", ValueType::Double, "0.04"},
      {"estimate", "analysis_size", ValueType::Int, "2000"},
      {"estimate", "analysis_every", ValueType::Int, "1"},
      {"estimate", "synth_seed", ValueType::Int, "0"},
      {"ebm", "lambda", ValueType::Double, "0"},
      {"ebm", "beta", ValueType::Double, "10"},
      {"ebm", "penalize_last", ValueType::Int, "4"},
      {"ebm", "hidden", ValueType::Int, "32"},
      {"ebm", "steps_per_batch", ValueType::Int, "1"},
      {"ebm", "langevin_steps", ValueType::Int, "20"},
      {"ebm", "langevin_step_size", ValueType::Double, "0.01"},
      {"ebm", "lr", ValueType::Double, "0.001"},
      {"sweep", "lambdas", ValueType::DoubleList, "0,0.001,0.003,0.01,0.03"},
      {"sweep", "seeds", ValueType::IntList, "1,2,3"},
      {"sweep", "l1", ValueType::Double, "0.0001"},
      {"sweep", "l2", ValueType::Double, "0.001"},
      {"attack", "step_size", ValueType::Double, "0.00196078431372549"},
      {"attack", "max_iters", ValueType::Int, "20000"},
      {"attack", "utility_target", ValueType::Double, "40"},
      {"attack", "examples", ValueType::Int, "50"},
      {"distill", "task_ns", ValueType::IntList, "0,1,2,4,8"},
      {"distill", "targets", ValueType::String, "stacked,residual"},
      {"distill", "depth", ValueType::Int, "4"},
      {"distill", "width", ValueType::Int, "64"},
      {"distill", "task_width", ValueType::Int, "64"},
      {"distill", "out_dim", ValueType::Int, "4"},
      {"distill", "image_side", ValueType::Int, "8"},
      {"distill", "n_train", ValueType::Int, "512"},
      {"distill", "trials", ValueType::Int, "1"},
      {"disentangle", "models", ValueType::Int, "7"},
      {"disentangle", "layer", ValueType::Int, "0"},
  };
  return keys;
}
// clang-format on

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

inline double parse_double(const std::string& name, const std::string& v) {
  double x = 0.0;
  const auto t = trim(v);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), x);
  if (ec != std::errc() || p != t.data() + t.size() || !std::isfinite(x))
    throw ConfigError("invalid number for " + name + ": '" + v + "'");
  return x;
}

inline std::int64_t parse_int(const std::string& name, const std::string& v) {
  std::int64_t x = 0;
  const auto t = trim(v);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), x);
  if (ec != std::errc() || p != t.data() + t.size())
    throw ConfigError("invalid integer for " + name + ": '" + v + "'");
  return x;
}

inline bool parse_bool(const std::string& name, const std::string& v) {
  const auto t = trim(v);
  if (t == "true" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "no") return false;
  throw ConfigError("invalid boolean for " + name + ": '" + v + "'");
}

class Manifest {
 public:
  /// Defaults only.
  Manifest() {
    for (const auto& k : manifest_schema()) values_[full_name(k.section, k.key)] = k.default_value;
  }

  static Manifest from_string(const std::string& text) {
    Manifest m;
    boost::property_tree::ptree pt;
    std::istringstream is(text);
    try {
      boost::property_tree::read_ini(is, pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(std::string("manifest parse error: ") + e.message() + " at line " +
                        std::to_string(e.line()));
    }
    for (const auto& [name, node] : pt) {
      if (node.empty()) {
        if (node.data().empty() && has_section(name)) continue;  // empty [section]
        m.set(name, node.data());
        continue;
      }
      if (!m.has_section(name)) throw ConfigError("unknown manifest section: [" + name + "]");
      for (const auto& [key, leaf] : node) m.set(name + "." + key, leaf.data());
    }
    return m;
  }

  static Manifest load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open manifest: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return from_string(ss.str());
  }

  /// Sets "section.key" (or a top-level "key"), validating name and value.
  void set(const std::string& name, const std::string& value) {
    const auto* k = find(name);
    if (!k) throw ConfigError("unknown manifest key: " + name);
    const std::string v = trim(value);
    validate_value(*k, name, v);
    values_[name] = v;
  }

  const std::string& str(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw std::logic_error("manifest key not in schema: " + name);
    return it->second;
  }
  double real(const std::string& name) const { return parse_double(name, str(name)); }
  std::int64_t integer(const std::string& name) const { return parse_int(name, str(name)); }
  std::size_t count(const std::string& name) const {
    const auto v = integer(name);
    if (v < 0) throw ConfigError(name + " must be non-negative");
    return static_cast<std::size_t>(v);
  }
  bool flag(const std::string& name) const { return parse_bool(name, str(name)); }
  std::vector<double> reals(const std::string& name) const {
    std::vector<double> out;
    for (const auto& p : split(str(name), ',')) out.push_back(parse_double(name, p));
    return out;
  }
  std::vector<std::uint64_t> counts(const std::string& name) const {
    std::vector<std::uint64_t> out;
    for (const auto& p : split(str(name), ',')) {
      const auto v = parse_int(name, p);
      if (v < 0) throw ConfigError(name + " entries must be non-negative");
      out.push_back(static_cast<std::uint64_t>(v));
    }
    return out;
  }

  /// Every effective setting, one "section.key=value" line, sorted.
  std::string canonical() const {
    std::string s;
    for (const auto& [k, v] : values_) s += k + "=" + v + "\n";
    return s;
  }

  std::uint64_t hash() const {
    const auto c = canonical();
    return crc64({reinterpret_cast<const std::uint8_t*>(c.data()), c.size()});
  }

  std::string hash_hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
    return buf;
  }

 private:
  static std::string full_name(const char* section, const char* key) {
    return *section ? std::string(section) + "." + key : std::string(key);
  }
  static const ManifestKey* find(const std::string& name) {
    for (const auto& k : manifest_schema())
      if (full_name(k.section, k.key) == name) return &k;
    return nullptr;
  }
  static bool has_section(const std::string& s) {
    for (const auto& k : manifest_schema())
      if (s == k.section) return true;
    return false;
  }
  static void validate_value(const ManifestKey& k, const std::string& name, const std::string& v) {
    switch (k.type) {
      case ValueType::Int: parse_int(name, v); break;
      case ValueType::Double: parse_double(name, v); break;
      case ValueType::Bool: parse_bool(name, v); break;
      case ValueType::DoubleList:
        for (const auto& p : split(v, ',')) parse_double(name, p);
        break;
      case ValueType::IntList:
        for (const auto& p : split(v, ',')) parse_int(name, p);
        break;
      case ValueType::String:
        if (k.choices) {
          const auto opts = split(k.choices, '|');
          if (std::find(opts.begin(), opts.end(), v) == opts.end())
            throw ConfigError("invalid value for " + name + ": '" + v + "' (expected " +
                              k.choices + ")");
        }
        break;
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace tcx
