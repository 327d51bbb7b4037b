#include "exact/config.h"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "exact/error.h"

namespace exact {

std::string format_double(double v) {
  // Try increasing precision until the value round-trips.
  char buf[64];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    double back = 0.0;
    std::sscanf(buf, "%lf", &back);
    if (back == v) break;
  }
  return buf;
}

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

Config Config::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_string(ss.str());
}

Config Config::from_string(const std::string& text) {
  Config c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    // Accept "key value" and "key = value".
    std::size_t sp = t.find_first_of(" \t=");
    if (sp == std::string::npos)
      throw ConfigError("config: malformed line " + std::to_string(lineno) + ": " + t);
    std::string key = t.substr(0, sp);
    std::string rest = trim(t.substr(sp));
    if (!rest.empty() && rest[0] == '=') rest = trim(rest.substr(1));
    if (rest.empty())
      throw ConfigError("config: missing value on line " + std::to_string(lineno));
    c.kv_[key] = rest;
  }
  return c;
}

void Config::set(const std::string& key, const std::string& value) { kv_[key] = value; }
void Config::set_double(const std::string& key, double v) { kv_[key] = format_double(v); }
void Config::set_int(const std::string& key, std::int64_t v) { kv_[key] = std::to_string(v); }
void Config::set_bool(const std::string& key, bool v) { kv_[key] = v ? "true" : "false"; }

bool Config::has(const std::string& key) const { return kv_.count(key) != 0; }

std::string Config::get(const std::string& key) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) throw ConfigError("config: missing key " + key);
  return it->second;
}

std::string Config::get_or(const std::string& key, const std::string& dflt) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? dflt : it->second;
}

double Config::get_double(const std::string& key, double dflt) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return dflt;
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw ConfigError("config: key " + key + " is not a number: " + it->second);
  }
}

std::int64_t Config::get_int(const std::string& key, std::int64_t dflt) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return dflt;
  try {
    return std::stoll(it->second);
  } catch (const std::exception&) {
    throw ConfigError("config: key " + key + " is not an integer: " + it->second);
  }
}

bool Config::get_bool(const std::string& key, bool dflt) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return dflt;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config: key " + key + " is not a boolean: " + v);
}

void Config::merge(const Config& other) {
  for (const auto& [k, v] : other.kv_) kv_[k] = v;
}

std::string Config::serialize() const {
  std::string out;
  for (const auto& [k, v] : kv_) {
    out += k;
    out += ' ';
    out += v;
    out += '\n';
  }
  return out;
}

void Config::write_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("config: cannot write " + path);
  out << serialize();
}

}  // namespace exact
