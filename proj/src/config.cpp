#include "relspray/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "relspray/errors.hpp"

namespace relspray {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

// Drops a trailing comment that is not inside a string.
std::string strip_comment(const std::string& s) {
  bool in_str = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"' && (i == 0 || s[i - 1] != '\\')) in_str = !in_str;
    if (s[i] == '#' && !in_str) return s.substr(0, i);
  }
  return s;
}

bool valid_key(const std::string& k) {
  if (k.empty()) return false;
  for (char c : k)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) return false;
  return true;
}

ConfigFile::Scalar parse_scalar(const std::string& tok, const std::string& where) {
  if (tok.empty()) throw ConfigError(where + ": empty value");
  if (tok.front() == '"') {
    if (tok.size() < 2 || tok.back() != '"') throw ConfigError(where + ": unterminated string");
    std::string out;
    for (std::size_t i = 1; i + 1 < tok.size(); ++i) {
      if (tok[i] == '\\' && i + 2 < tok.size()) {
        const char n = tok[++i];
        out += n == 'n' ? '\n' : n == 't' ? '\t' : n;
      } else {
        out += tok[i];
      }
    }
    return out;
  }
  if (tok == "true") return true;
  if (tok == "false") return false;
  std::string num;
  for (char c : tok)
    if (c != '_') num += c;
  const bool realish = num.find_first_of(".eE") != std::string::npos || num == "inf" || num == "nan";
  if (!realish) {
    long long v = 0;
    const auto r = std::from_chars(num.data(), num.data() + num.size(), v);
    if (r.ec == std::errc() && r.ptr == num.data() + num.size()) return v;
  }
  double d = 0.0;
  const char* b = num.data() + (num.size() > 0 && num[0] == '+' ? 1 : 0);
  const auto r = std::from_chars(b, num.data() + num.size(), d);
  if (r.ec == std::errc() && r.ptr == num.data() + num.size()) return d;
  throw ConfigError(where + ": cannot parse value '" + tok + "'");
}

std::vector<std::string> split_array(const std::string& body, const std::string& where) {
  std::vector<std::string> out;
  std::string cur;
  bool in_str = false;
  for (std::size_t i = 0; i < body.size(); ++i) {
    const char c = body[i];
    if (c == '"' && (i == 0 || body[i - 1] != '\\')) in_str = !in_str;
    if (c == ',' && !in_str) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (in_str) throw ConfigError(where + ": unterminated string in array");
  if (!trim(cur).empty()) out.push_back(trim(cur));
  for (const auto& t : out)
    if (t.empty()) throw ConfigError(where + ": empty array element");
  return out;
}

std::string type_name(const ConfigFile::Scalar& s) {
  switch (s.index()) {
    case 0: return "boolean";
    case 1: return "integer";
    case 2: return "real";
    default: return "string";
  }
}

}  // namespace

ConfigFile ConfigFile::parse(const std::string& text, const std::string& origin) {
  ConfigFile cf;
  cf.origin_ = origin;
  std::istringstream is(text);
  std::string raw, section;
  int lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      if (!valid_key(section)) throw ConfigError(where + ": bad section name '" + section + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (!valid_key(key)) throw ConfigError(where + ": bad key '" + key + "'");
    const std::string full = section.empty() ? key : section + "." + key;
    if (cf.values_.count(full)) throw ConfigError(where + ": duplicate key '" + full + "'");
    const std::string rhs = trim(line.substr(eq + 1));
    Value v;
    v.line = lineno;
    if (!rhs.empty() && rhs.front() == '[') {
      if (rhs.back() != ']') throw ConfigError(where + ": unterminated array");
      v.is_array = true;
      for (const auto& tok : split_array(rhs.substr(1, rhs.size() - 2), where)) v.items.push_back(parse_scalar(tok, where));
    } else {
      v.items.push_back(parse_scalar(rhs, where));
    }
    cf.values_[full] = std::move(v);
  }
  return cf;
}

ConfigFile ConfigFile::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), path.string());
}

const ConfigFile::Value* ConfigFile::find(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return nullptr;
  used_[key] = true;
  return &it->second;
}

namespace {

[[noreturn]] void type_error(const std::string& key, const std::string& want, const ConfigFile::Value& v) {
  throw ConfigError("config key '" + key + "' (line " + std::to_string(v.line) + ") must be " + want + ", got " +
                    (v.is_array ? "array" : type_name(v.items.front())));
}

}  // namespace

double ConfigFile::get_real(const std::string& key, double fallback) const {
  const Value* v = find(key);
  if (!v) return fallback;
  if (v->is_array) type_error(key, "a number", *v);
  if (auto* d = std::get_if<double>(&v->items[0])) return *d;
  if (auto* i = std::get_if<long long>(&v->items[0])) return static_cast<double>(*i);
  type_error(key, "a number", *v);
}

long long ConfigFile::get_int(const std::string& key, long long fallback) const {
  const Value* v = find(key);
  if (!v) return fallback;
  if (v->is_array) type_error(key, "an integer", *v);
  if (auto* i = std::get_if<long long>(&v->items[0])) return *i;
  type_error(key, "an integer", *v);
}

bool ConfigFile::get_bool(const std::string& key, bool fallback) const {
  const Value* v = find(key);
  if (!v) return fallback;
  if (v->is_array) type_error(key, "a boolean", *v);
  if (auto* b = std::get_if<bool>(&v->items[0])) return *b;
  type_error(key, "a boolean", *v);
}

std::string ConfigFile::get_string(const std::string& key, const std::string& fallback) const {
  const Value* v = find(key);
  if (!v) return fallback;
  if (v->is_array) type_error(key, "a string", *v);
  if (auto* s = std::get_if<std::string>(&v->items[0])) return *s;
  type_error(key, "a string", *v);
}

std::vector<double> ConfigFile::get_reals(const std::string& key, const std::vector<double>& fallback) const {
  const Value* v = find(key);
  if (!v) return fallback;
  std::vector<double> out;
  for (const auto& s : v->items) {
    if (auto* d = std::get_if<double>(&s)) out.push_back(*d);
    else if (auto* i = std::get_if<long long>(&s)) out.push_back(static_cast<double>(*i));
    else type_error(key, "an array of numbers", *v);
  }
  return out;
}

std::vector<std::string> ConfigFile::get_strings(const std::string& key, const std::vector<std::string>& fallback) const {
  const Value* v = find(key);
  if (!v) return fallback;
  std::vector<std::string> out;
  for (const auto& s : v->items) {
    if (auto* str = std::get_if<std::string>(&s)) out.push_back(*str);
    else type_error(key, "an array of strings", *v);
  }
  return out;
}

std::vector<std::string> ConfigFile::unused_keys() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : values_)
    if (!used_.count(k)) out.push_back(k);
  return out;
}

}  // namespace relspray
