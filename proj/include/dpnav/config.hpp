#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

namespace dpnav {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat "key = value" configuration with dotted keys. Lines starting with '#'
// are comments; whitespace around keys and values is ignored.
class KvConfig {
 public:
  static KvConfig parse_string(const std::string& text) {
    KvConfig c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string s = trim(line);
      if (s.empty() || s[0] == '#') continue;
      auto eq = s.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      std::string key = trim(s.substr(0, eq));
      std::string value = trim(s.substr(eq + 1));
      if (key.empty())
        throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
      c.kv_[key] = value;
    }
    return c;
  }

  static KvConfig parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::ostringstream all;
    all << in.rdbuf();
    return parse_string(all.str());
  }

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string get_str(const std::string& key, const std::string& dflt) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? dflt : it->second;
  }

  double get_double(const std::string& key, double dflt) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    try {
      return std::stod(it->second);
    } catch (...) {
      throw ConfigError("config key " + key + ": not a number: " + it->second);
    }
  }

  long long get_int(const std::string& key, long long dflt) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    try {
      return std::stoll(it->second);
    } catch (...) {
      throw ConfigError("config key " + key + ": not an integer: " + it->second);
    }
  }

  bool get_bool(const std::string& key, bool dflt) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return dflt;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config key " + key + ": not a boolean: " + v);
  }

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  static std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> kv_;
};

}  // namespace dpnav
