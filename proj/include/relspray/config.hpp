#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

namespace relspray {

/// Minimal TOML subset: [section] headers, key = value with integers, reals,
/// booleans, double-quoted strings and flat arrays of those. '#' starts a comment.
class ConfigFile {
 public:
  using Scalar = std::variant<bool, long long, double, std::string>;
  struct Value {
    std::vector<Scalar> items;
    bool is_array = false;
    int line = 0;
  };

  static ConfigFile parse(const std::string& text, const std::string& origin = "<string>");
  static ConfigFile load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  // Keys are "section.name". Missing keys return the fallback; wrong types throw ConfigError.
  double get_real(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::vector<double> get_reals(const std::string& key, const std::vector<double>& fallback) const;
  std::vector<std::string> get_strings(const std::string& key, const std::vector<std::string>& fallback) const;

  /// Keys never read through a getter; used to reject typos.
  std::vector<std::string> unused_keys() const;
  const std::map<std::string, Value>& values() const { return values_; }

 private:
  const Value* find(const std::string& key) const;
  std::string origin_;
  std::map<std::string, Value> values_;
  mutable std::map<std::string, bool> used_;
};

}  // namespace relspray
