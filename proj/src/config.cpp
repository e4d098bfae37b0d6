#include "haec/config.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "haec/binary_io.hpp"
#include "haec/error.hpp"

namespace haec {

ConfigValue ConfigValue::boolean(bool v) {
  ConfigValue c;
  c.kind = Kind::boolean, c.b = v;
  return c;
}
ConfigValue ConfigValue::integer(std::int64_t v) {
  ConfigValue c;
  c.kind = Kind::integer, c.num = double(v);
  return c;
}
ConfigValue ConfigValue::real(double v) {
  ConfigValue c;
  c.kind = Kind::real, c.num = v;
  return c;
}
ConfigValue ConfigValue::string(std::string v) {
  ConfigValue c;
  c.kind = Kind::string, c.str = std::move(v);
  return c;
}
ConfigValue ConfigValue::array(std::vector<ConfigValue> v) {
  ConfigValue c;
  c.kind = Kind::array, c.items = std::move(v);
  return c;
}

std::string ConfigValue::to_toml() const {
  switch (kind) {
    case Kind::boolean:
      return b ? "true" : "false";
    case Kind::integer:
      return std::to_string(std::int64_t(num));
    case Kind::real: {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", num);
      std::string s = buf;
      if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
      return s;
    }
    case Kind::string: {
      std::string out = "\"";
      for (char ch : str) {
        if (ch == '"' || ch == '\\') out += '\\';
        if (ch == '\n') {
          out += "\\n";
          continue;
        }
        out += ch;
      }
      return out + "\"";
    }
    case Kind::array: {
      std::string out = "[";
      for (std::size_t i = 0; i < items.size(); ++i) out += (i ? ", " : "") + items[i].to_toml();
      return out + "]";
    }
  }
  return {};
}

namespace {

class ValueParser {
 public:
  ValueParser(std::string_view s, std::string where) : s_(s), where_(std::move(where)) {}

  ConfigValue parse_all() {
    ConfigValue v = value();
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] != '#') fail("trailing characters after value");
    return v;
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const { throw ConfigError(where_ + ": " + msg); }

  void skip_ws() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }

  ConfigValue value() {
    skip_ws();
    if (pos_ >= s_.size()) fail("missing value");
    const char c = s_[pos_];
    if (c == '"') return ConfigValue::string(quoted());
    if (c == '[') return array();
    if (s_.substr(pos_, 4) == "true") return pos_ += 4, ConfigValue::boolean(true);
    if (s_.substr(pos_, 5) == "false") return pos_ += 5, ConfigValue::boolean(false);
    return number();
  }

  std::string quoted() {
    ++pos_;
    std::string out;
    while (pos_ < s_.size() && s_[pos_] != '"') {
      char c = s_[pos_++];
      if (c == '\\') {
        if (pos_ >= s_.size()) fail("unterminated escape");
        const char e = s_[pos_++];
        switch (e) {
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          case '"': c = '"'; break;
          case '\\': c = '\\'; break;
          default: fail(std::string("unknown escape \\") + e);
        }
      }
      out += c;
    }
    if (pos_ >= s_.size()) fail("unterminated string");
    ++pos_;
    return out;
  }

  ConfigValue array() {
    ++pos_;
    std::vector<ConfigValue> items;
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] == ']') return ++pos_, ConfigValue::array({});
    for (;;) {
      items.push_back(value());
      if (items.back().kind == ConfigValue::Kind::array) fail("nested arrays are not supported");
      skip_ws();
      if (pos_ >= s_.size()) fail("unterminated array");
      if (s_[pos_] == ',') {
        ++pos_;
        skip_ws();
        if (pos_ < s_.size() && s_[pos_] == ']') return ++pos_, ConfigValue::array(std::move(items));
        continue;
      }
      if (s_[pos_] == ']') return ++pos_, ConfigValue::array(std::move(items));
      fail("expected ',' or ']' in array");
    }
  }

  ConfigValue number() {
    std::size_t end = pos_;
    while (end < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[end])) || s_[end] == '.' ||
                               s_[end] == '-' || s_[end] == '+' || s_[end] == '_'))
      ++end;
    std::string tok(s_.substr(pos_, end - pos_));
    std::erase(tok, '_');
    if (tok.empty()) fail("expected a value");
    const char* b = tok.data();
    const char* e = tok.data() + tok.size();
    if (*b == '+') ++b;
    if (tok.find_first_of(".eE") == std::string::npos) {
      std::int64_t v = 0;
      auto [p, ec] = std::from_chars(b, e, v);
      if (ec == std::errc() && p == e) return pos_ = end, ConfigValue::integer(v);
    }
    double d = 0.0;
    auto [p, ec] = std::from_chars(b, e, d);
    if (ec != std::errc() || p != e || !std::isfinite(d)) fail("invalid value '" + tok + "'");
    pos_ = end;
    return ConfigValue::real(d);
  }

  std::string_view s_;
  std::string where_;
  std::size_t pos_ = 0;
};

bool valid_key(std::string_view k) {
  if (k.empty()) return false;
  for (char c : k)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
  return true;
}

std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

ConfigValue strs(std::initializer_list<const char*> v) {
  std::vector<ConfigValue> items;
  for (auto s : v) items.push_back(ConfigValue::string(s));
  return ConfigValue::array(std::move(items));
}

ConfigValue reals(std::initializer_list<double> v) {
  std::vector<ConfigValue> items;
  for (auto x : v) items.push_back(ConfigValue::real(x));
  return ConfigValue::array(std::move(items));
}

std::map<std::string, ConfigValue> schema() {
  using V = ConfigValue;
  return {
      {"seed", V::integer(0)},
      {"paths.work", V::string("work")},
      {"paths.cloud", V::string("scene.ply")},
      {"paths.views", V::string("views")},
      {"paths.features", V::string("")},
      {"paths.field", V::string("field.hff")},
      {"paths.labels", V::string("labels.ply")},
      {"paths.hierarchy", V::string("superpoints")},
      {"paths.checkpoint", V::string("model.hck")},
      {"paths.predictions", V::string("pred.ply")},
      {"paths.scores", V::string("scores.json")},
      {"provider.kind", V::string("mock")},
      {"provider.dim", V::integer(256)},
      {"render.spacing", V::real(5.0)},
      {"render.margin", V::real(1.0)},
      {"render.width", V::integer(512)},
      {"render.height", V::integer(512)},
      {"render.fx", V::real(256.0)},
      {"render.fy", V::real(256.0)},
      {"render.cx", V::real(256.0)},
      {"render.cy", V::real(256.0)},
      {"render.splat_px", V::integer(2)},
      {"filter.positives", strs({"a normal scene", "an indoor scene", "an outdoor scene"})},
      {"filter.negatives", strs({"an incoherent image", "unorganized, random points", "a blank image"})},
      {"filter.threshold", V::real(0.65)},
      {"filter.logit_scale", V::real(100.0)},
      {"lift.tau_rel", V::real(0.05)},
      {"lift.target_coverage", V::real(0.90)},
      {"lift.max_rounds", V::integer(5)},
      {"lift.cube_radius", V::real(3.0)},
      {"lift.image_size", V::integer(128)},
      {"lift.eps_scale", V::real(2.0)},
      {"lift.base_minpts", V::integer(4)},
      {"label.k", V::integer(32)},
      {"label.eps_scale", V::real(2.0)},
      {"label.base_minpts", V::integer(4)},
      {"label.max_iter", V::integer(100)},
      {"label.logit_scale", V::real(100.0)},
      {"superpoint.levels", V::integer(3)},
      {"superpoint.lambda", reals({0.01, 0.1, 1.0})},
      {"superpoint.k_nn", V::integer(10)},
      {"superpoint.spatial_weight", V::real(0.1)},
      {"model.hidden", V::integer(16)},
      {"model.experts", V::integer(4)},
      {"model.heads", V::integer(2)},
      {"model.head_layers", V::integer(2)},
      {"model.alpha", V::real(0.2)},
      {"model.w_rec", V::real(1.0)},
      {"model.w_tri", V::real(0.5)},
      {"model.w_bal", V::real(0.01)},
      {"model.w_aff", V::real(1.0)},
      {"model.lr", V::real(0.1)},
      {"model.steps", V::integer(200)},
      {"infer.affinity_threshold", V::real(0.5)},
      {"query.text", V::string("")},
      {"query.threshold", V::real(0.5)},
      {"query.output", V::string("query.ply")},
      {"eval.labels", V::array({})},
  };
}

bool compatible(const ConfigValue& def, ConfigValue& v) {
  using K = ConfigValue::Kind;
  if (def.kind == K::real && v.kind == K::integer) {
    v.kind = K::real;
    return true;
  }
  if (def.kind == K::integer && v.kind == K::real && v.num == std::floor(v.num)) {
    v.kind = K::integer;
    return true;
  }
  if (def.kind != v.kind) return false;
  if (def.kind == K::array && !def.items.empty()) {
    for (auto& item : v.items)
      if (!compatible(def.items.front(), item)) return false;
  }
  return true;
}

const char* kind_name(ConfigValue::Kind k) {
  switch (k) {
    case ConfigValue::Kind::boolean: return "a boolean";
    case ConfigValue::Kind::integer: return "an integer";
    case ConfigValue::Kind::real: return "a number";
    case ConfigValue::Kind::string: return "a string";
    case ConfigValue::Kind::array: return "an array";
  }
  return "?";
}

}  // namespace

std::map<std::string, ConfigValue> parse_config(std::string_view text, const std::string& origin) {
  std::map<std::string, ConfigValue> out;
  std::string section;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string line = trim(text.substr(start, end - start));
    ++line_no;
    start = end + 1;
    const std::string where = origin + ":" + std::to_string(line_no);
    if (line.empty() || line[0] == '#') {
      if (end == text.size()) break;
      continue;
    }
    if (line[0] == '[') {
      const auto close = line.find(']');
      if (close == std::string::npos) throw ConfigError(where + ": unterminated section header");
      section = trim(std::string_view(line).substr(1, close - 1));
      const std::string rest = trim(std::string_view(line).substr(close + 1));
      if (!valid_key(section)) throw ConfigError(where + ": invalid section name");
      if (!rest.empty() && rest[0] != '#') throw ConfigError(where + ": text after section header");
    } else {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
      const std::string key = trim(std::string_view(line).substr(0, eq));
      if (!valid_key(key)) throw ConfigError(where + ": invalid key '" + key + "'");
      const std::string full = section.empty() ? key : section + "." + key;
      if (out.count(full)) throw ConfigError(where + ": duplicate key " + full);
      out[full] = ValueParser(std::string_view(line).substr(eq + 1), where).parse_all();
    }
    if (end == text.size()) break;
  }
  return out;
}

ConfigValue parse_config_value(std::string_view text) {
  const std::string t = trim(text);
  try {
    return ValueParser(t, "--set").parse_all();
  } catch (const ConfigError&) {
    if (!t.empty() && t[0] != '"' && t[0] != '[') return ConfigValue::string(t);
    throw;
  }
}

Config::Config() : defaults_(schema()), values_(defaults_) {}

void Config::load_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  const auto bytes = io::read_file(path);
  load_text(std::string_view(bytes.data(), bytes.size()), path.string());
}

void Config::load_text(std::string_view text, const std::string& origin) {
  for (auto& [k, v] : parse_config(text, origin)) set(k, std::move(v));
}

void Config::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("override must look like section.key=value");
  set(trim(assignment.substr(0, eq)), parse_config_value(assignment.substr(eq + 1)));
}

void Config::set(const std::string& key, ConfigValue value) {
  auto it = defaults_.find(key);
  if (it == defaults_.end()) throw ConfigError("unknown config key " + key);
  if (!compatible(it->second, value))
    throw ConfigError("config key " + key + " expects " + kind_name(it->second.kind));
  values_[key] = std::move(value);
  explicit_[key] = true;
}

void Config::set_default(const std::string& key, ConfigValue value) {
  auto it = defaults_.find(key);
  if (it == defaults_.end()) throw ConfigError("unknown config key " + key);
  if (!compatible(it->second, value))
    throw ConfigError("config key " + key + " expects " + kind_name(it->second.kind));
  it->second = value;
  if (!explicit_.count(key)) values_[key] = std::move(value);
}

const ConfigValue& Config::at(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key " + key);
  return it->second;
}

bool Config::get_bool(const std::string& key) const { return at(key).b; }
std::int64_t Config::get_int(const std::string& key) const { return std::int64_t(at(key).num); }
double Config::get_double(const std::string& key) const { return at(key).num; }
std::string Config::get_string(const std::string& key) const { return at(key).str; }

std::vector<double> Config::get_doubles(const std::string& key) const {
  std::vector<double> out;
  for (const auto& v : at(key).items) {
    if (v.kind != ConfigValue::Kind::real && v.kind != ConfigValue::Kind::integer)
      throw ConfigError("config key " + key + " expects numbers");
    out.push_back(v.num);
  }
  return out;
}

std::vector<std::string> Config::get_strings(const std::string& key) const {
  std::vector<std::string> out;
  for (const auto& v : at(key).items) {
    if (v.kind != ConfigValue::Kind::string) throw ConfigError("config key " + key + " expects strings");
    out.push_back(v.str);
  }
  return out;
}

std::vector<std::string> Config::defaulted_keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : defaults_)
    if (!explicit_.count(k)) out.push_back(k);
  return out;
}

std::string Config::dump() const {
  std::ostringstream os;
  std::string section = "\x01";
  // Top-level keys first, then one table per section.
  for (const auto& [k, v] : values_)
    if (k.find('.') == std::string::npos) os << k << " = " << v.to_toml() << "\n";
  for (const auto& [k, v] : values_) {
    const auto dot = k.find('.');
    if (dot == std::string::npos) continue;
    const std::string s = k.substr(0, dot);
    if (s != section) {
      os << "\n[" << s << "]\n";
      section = s;
    }
    os << k.substr(dot + 1) << " = " << v.to_toml() << "\n";
  }
  return os.str();
}

}  // namespace haec
