#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace exact {

// Flat key-value configuration with dotted section names ("train.lr").
// One schema is shared by all CLI subcommands; flags override file values.
class Config {
 public:
  Config() = default;

  static Config from_file(const std::string& path);
  static Config from_string(const std::string& text);

  void set(const std::string& key, const std::string& value);
  void set_double(const std::string& key, double v);
  void set_int(const std::string& key, std::int64_t v);
  void set_bool(const std::string& key, bool v);

  bool has(const std::string& key) const;
  std::string get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& dflt) const;
  double get_double(const std::string& key, double dflt) const;
  std::int64_t get_int(const std::string& key, std::int64_t dflt) const;
  bool get_bool(const std::string& key, bool dflt) const;

  // Merge `other` on top of this config (other wins).
  void merge(const Config& other);

  // Canonical serialization: sorted keys, round-trippable float formatting.
  // Written into every output directory as the effective configuration.
  std::string serialize() const;
  void write_file(const std::string& path) const;

  const std::map<std::string, std::string>& entries() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

// Round-trip double formatting (shortest form that parses back exactly).
std::string format_double(double v);

}  // namespace exact
