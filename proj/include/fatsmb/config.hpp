#pragma once

// Plain-text key=value configuration. Sections are dotted key prefixes, e.g.
// `model.d=64`. Lines starting with '#' and blank lines are ignored.

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fatsmb/common.hpp"

namespace fatsmb {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

// Shortest round-trip decimal representation.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

class KeyValues {
 public:
  KeyValues() = default;

  static KeyValues parse(std::istream& in, const std::string& source = "<input>") {
    KeyValues kv;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos || eq == 0) throw ParseError(source + ": expected key=value", n);
      kv.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    return parse(in, path);
  }

  void set(const std::string& key, const std::string& value) { map_[key] = value; }
  void set(const std::string& key, double value) { map_[key] = format_double(value); }
  void set(const std::string& key, long long value) { map_[key] = std::to_string(value); }
  void set(const std::string& key, int value) { map_[key] = std::to_string(value); }
  void set(const std::string& key, std::uint64_t value) { map_[key] = std::to_string(value); }
  void set(const std::string& key, bool value) { map_[key] = value ? "true" : "false"; }
  void set(const std::string& key, const char* value) { map_[key] = value; }

  bool has(const std::string& key) const { return map_.count(key) != 0; }

  const std::string& str(const std::string& key) const {
    auto it = map_.find(key);
    if (it == map_.end()) throw ConfigError("missing key " + key);
    return it->second;
  }

  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = map_.find(key);
    return it == map_.end() ? fallback : it->second;
  }
  double get(const std::string& key, double fallback) const { return has(key) ? number(key) : fallback; }
  long long get(const std::string& key, long long fallback) const { return has(key) ? integer(key) : fallback; }
  int get(const std::string& key, int fallback) const { return has(key) ? static_cast<int>(integer(key)) : fallback; }
  bool get(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const auto& v = str(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("key " + key + ": expected boolean, got '" + v + "'");
  }

  double number(const std::string& key) const {
    const auto& v = str(key);
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError("key " + key + ": expected number, got '" + v + "'");
    }
  }

  long long integer(const std::string& key) const {
    const auto& v = str(key);
    long long out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size())
      throw ConfigError("key " + key + ": expected integer, got '" + v + "'");
    return out;
  }

  // Later entries win.
  void merge(const KeyValues& other) {
    for (const auto& [k, v] : other.map_) map_[k] = v;
  }

  const std::map<std::string, std::string>& entries() const { return map_; }

  std::string to_string() const {
    std::ostringstream os;
    for (const auto& [k, v] : map_) os << k << '=' << v << '\n';
    return os.str();
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    out << to_string();
  }

 private:
  std::map<std::string, std::string> map_;
};

}  // namespace fatsmb
