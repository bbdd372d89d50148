#pragma once

// Key-value configuration files:
//
//   # comment
//   key = value
//
// Keys are [A-Za-z0-9_.]+; values run to end of line with surrounding
// whitespace trimmed. Later assignments override earlier ones, and
// overrides applied with set() (the CLI's) beat the file.

#include <map>
#include <set>
#include <sstream>

#include "plse/common.hpp"

namespace plse {

class Config {
 public:
  static Config parse(std::string_view text, const std::string& where = "<config>") {
    Config c;
    std::size_t ln = 0;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
      ++ln;
      auto t = trim(line);
      if (t.empty() || t.front() == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string_view::npos) throw ParseError(where, ln, "expected key = value");
      const std::string key(trim(t.substr(0, eq)));
      if (key.empty()) throw ParseError(where, ln, "empty key");
      for (char ch : key)
        if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '.')) throw ParseError(where, ln, "bad key '" + key + "'");
      c.values_[key] = std::string(trim(t.substr(eq + 1)));
    }
    return c;
  }

  static Config load(const std::filesystem::path& p) { return parse(read_file(p), p.string()); }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get(const std::string& key, const std::string& def) const {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? def : it->second;
  }

  std::string require(const std::string& key) const {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) throw Error("config: missing required key '" + key + "'");
    return it->second;
  }

  double get_double(const std::string& key, double def) const {
    used_.insert(key);
    if (!has(key)) return def;
    const auto v = get(key, "");
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::logic_error&) {
      throw Error("config: '" + key + "' expects a number, got '" + v + "'");
    }
  }

  std::uint64_t get_uint(const std::string& key, std::uint64_t def) const {
    used_.insert(key);
    if (!has(key)) return def;
    const auto v = get(key, "");
    try {
      std::size_t used = 0;
      if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
      const auto u = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return u;
    } catch (const std::logic_error&) {
      throw Error("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
    }
  }

  bool get_bool(const std::string& key, bool def) const {
    used_.insert(key);
    if (!has(key)) return def;
    const auto v = to_lower(get(key, ""));
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw Error("config: '" + key + "' expects a boolean, got '" + v + "'");
  }

  /// Keys present but never read; used to reject typos.
  std::vector<std::string> unused() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  std::string serialize() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace plse
