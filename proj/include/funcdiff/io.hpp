#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "funcdiff/grid.hpp"

namespace funcdiff {

/// Flat "key = value" configuration with [section] headers. Keys are stored
/// as "section.key". Every key must be read by the consumer; check_consumed
/// reports the leftovers as errors so typos never pass silently.
class Config {
 public:
  Config() = default;

  static Config parse(const std::string& text) {
    Config c;
    std::istringstream in(text);
    std::string line, section;
    for (int lineno = 1; std::getline(in, line); ++lineno) {
      line = strip(strip_comment(line));
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError(where(lineno) + "unterminated section header");
        section = strip(line.substr(1, line.size() - 2));
        if (section.empty()) throw ConfigError(where(lineno) + "empty section name");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(where(lineno) + "expected key = value");
      const std::string key = strip(line.substr(0, eq));
      std::string value = strip(line.substr(eq + 1));
      if (key.empty()) throw ConfigError(where(lineno) + "empty key");
      if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
      const std::string full = section.empty() ? key : section + "." + key;
      if (c.values_.count(full)) throw ConfigError(where(lineno) + "duplicate key '" + full + "'");
      c.values_[full] = value;
    }
    return c;
  }

  static Config load(const std::filesystem::path& p) {
    std::ifstream f(p);
    if (!f) throw ConfigError("cannot read config file '" + p.string() + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::optional<std::string>& def = std::nullopt) const {
    auto it = values_.find(key);
    if (it == values_.end()) {
      if (!def) throw ConfigError("missing required key '" + key + "'");
      return *def;
    }
    consumed_.insert(key);
    return it->second;
  }

  double get_double(const std::string& key, std::optional<double> def = std::nullopt) const {
    if (!has(key)) {
      if (!def) throw ConfigError("missing required key '" + key + "'");
      return *def;
    }
    return to_double(key, get_string(key));
  }

  long long get_int(const std::string& key, std::optional<long long> def = std::nullopt) const {
    if (!has(key)) {
      if (!def) throw ConfigError("missing required key '" + key + "'");
      return *def;
    }
    const std::string v = get_string(key);
    std::size_t pos = 0;
    long long x = 0;
    try {
      x = std::stoll(v, &pos);
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
    }
    if (pos != v.size()) throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
    return x;
  }

  std::size_t get_size(const std::string& key, std::optional<std::size_t> def = std::nullopt) const {
    if (!has(key)) {
      if (!def) throw ConfigError("missing required key '" + key + "'");
      return *def;
    }
    const long long x = get_int(key);
    if (x < 0) throw ConfigError("key '" + key + "': must be nonnegative");
    return static_cast<std::size_t>(x);
  }

  bool get_bool(const std::string& key, std::optional<bool> def = std::nullopt) const {
    if (!has(key)) {
      if (!def) throw ConfigError("missing required key '" + key + "'");
      return *def;
    }
    const std::string v = get_string(key);
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
  }

  /// "[a, b, c]" lists of numbers.
  std::vector<double> get_doubles(const std::string& key, std::optional<std::vector<double>> def = std::nullopt) const {
    if (!has(key)) {
      if (!def) throw ConfigError("missing required key '" + key + "'");
      return *def;
    }
    std::string v = get_string(key);
    if (v.size() < 2 || v.front() != '[' || v.back() != ']')
      throw ConfigError("key '" + key + "': expected a list like [1, 2]");
    std::vector<double> out;
    std::stringstream ss(v.substr(1, v.size() - 2));
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      cell = strip(cell);
      if (!cell.empty()) out.push_back(to_double(key, cell));
    }
    return out;
  }

  std::vector<std::size_t> get_sizes(const std::string& key,
                                     std::optional<std::vector<std::size_t>> def = std::nullopt) const {
    if (!has(key)) {
      if (!def) throw ConfigError("missing required key '" + key + "'");
      return *def;
    }
    std::vector<std::size_t> out;
    for (double x : get_doubles(key)) {
      if (x < 0 || x != std::floor(x)) throw ConfigError("key '" + key + "': expected nonnegative integers");
      out.push_back(static_cast<std::size_t>(x));
    }
    return out;
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  void check_consumed() const {
    std::string bad;
    for (const auto& [k, v] : values_)
      if (!consumed_.count(k)) bad += (bad.empty() ? "" : ", ") + k;
    if (!bad.empty()) throw ConfigError("unknown config keys: " + bad);
  }

  /// Canonical text (sorted key = value lines) used for hashing.
  std::string canonical() const {
    std::string s;
    for (const auto& [k, v] : values_) s += k + " = " + v + "\n";
    return s;
  }

  std::string hash() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical())));
    return buf;
  }

 private:
  static std::string strip(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }
  static std::string strip_comment(const std::string& s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"') quoted = !quoted;
      if (s[i] == '#' && !quoted) return s.substr(0, i);
    }
    return s;
  }
  static std::string where(int lineno) { return "config line " + std::to_string(lineno) + ": "; }
  static double to_double(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double x = 0.0;
    try {
      x = std::stod(v, &pos);
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    }
    if (pos != v.size()) throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    return x;
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> consumed_;
};

/// One row per column of X, 17 significant digits.
inline void write_csv(const std::filesystem::path& p, const Matrix& X) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write '" + p.string() + "'");
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      if (i) f << ',';
      f << format_double(X(i, j));
    }
    f << '\n';
  }
  if (!f) throw std::runtime_error("write failed for '" + p.string() + "'");
}

/// Inverse of write_csv: returns a D x n matrix (one column per row).
inline Matrix read_csv(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot read '" + p.string() + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line == "\r") continue;
    const GridFunction g = from_csv_row(line);
    rows.emplace_back(g.values().data(), g.values().data() + g.values().size());
    if (rows.back().size() != rows.front().size()) throw DimensionError("read_csv: ragged rows in '" + p.string() + "'");
  }
  if (rows.empty()) return Matrix(0, 0);
  Matrix X(static_cast<Eigen::Index>(rows.front().size()), static_cast<Eigen::Index>(rows.size()));
  for (std::size_t j = 0; j < rows.size(); ++j)
    for (std::size_t i = 0; i < rows[j].size(); ++i) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[j][i];
  return X;
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write '" + p.string() + "'");
  f << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot read '" + p.string() + "'");
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("invalid JSON in '" + p.string() + "': " + e.what());
  }
}

/// Provenance record written next to every output file as <file>.json.
inline void write_sidecar(const std::filesystem::path& file, const std::string& producer, const Config& cfg,
                          std::uint64_t seed, nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json j = std::move(extra);
  j["producer"] = producer;
  j["config_hash"] = cfg.hash();
  j["seed"] = seed;
  j["version"] = std::string(kVersion);
  write_json(file.string() + ".json", j);
}

}  // namespace funcdiff
