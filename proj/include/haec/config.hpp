#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace haec {

// Value of a config entry: bool, number, string or a one-line array of those.
struct ConfigValue {
  enum class Kind { boolean, integer, real, string, array } kind = Kind::string;
  bool b = false;
  double num = 0.0;  // integer and real
  std::string str;
  std::vector<ConfigValue> items;

  static ConfigValue boolean(bool v);
  static ConfigValue integer(std::int64_t v);
  static ConfigValue real(double v);
  static ConfigValue string(std::string v);
  static ConfigValue array(std::vector<ConfigValue> v);

  std::string to_toml() const;
};

// Flat "section.key" table parsed from a TOML subset: [section] headers,
// key = value lines, '#' comments, quoted strings, numbers, booleans and
// single-line arrays. Errors raise ConfigError with the line number.
std::map<std::string, ConfigValue> parse_config(std::string_view text, const std::string& origin = "config");

// Parses the right-hand side of a --set override; bare words are strings.
ConfigValue parse_config_value(std::string_view text);

// Typed view over the schema: every key has a default, unknown keys are
// rejected, and keys left at their default are remembered for the manifest.
class Config {
 public:
  Config();

  void load_file(const std::filesystem::path& path);
  void load_text(std::string_view text, const std::string& origin = "config");
  // "section.key=value"
  void apply_override(std::string_view assignment);
  void set(const std::string& key, ConfigValue value);
  // Replaces a default; the key still counts as defaulted unless set explicitly.
  void set_default(const std::string& key, ConfigValue value);

  bool get_bool(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::string get_string(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;
  std::vector<std::string> get_strings(const std::string& key) const;

  std::vector<std::string> defaulted_keys() const;
  const std::map<std::string, ConfigValue>& values() const { return values_; }
  // Effective configuration as TOML.
  std::string dump() const;

 private:
  const ConfigValue& at(const std::string& key) const;

  std::map<std::string, ConfigValue> defaults_;
  std::map<std::string, ConfigValue> values_;
  std::map<std::string, bool> explicit_;
};

}  // namespace haec
