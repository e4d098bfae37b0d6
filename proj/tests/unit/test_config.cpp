#include <algorithm>
#include <string>

#include "doctest.h"
#include "haec/config.hpp"
#include "haec/error.hpp"

using namespace haec;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config(text, "t.toml");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

}  // namespace

TEST_CASE("config parsing") {
  const auto t = parse_config(R"(seed = 3   # trailing
[render]
spacing = 2.5
width = 64
[filter]
positives = ["a", "b \"q\""]
[model]
lr = 1e-2
[flags]
on = true
)");
  CHECK(t.at("seed").kind == ConfigValue::Kind::integer);
  CHECK(t.at("seed").num == 3);
  CHECK(t.at("render.spacing").num == 2.5);
  CHECK(t.at("filter.positives").items.size() == 2);
  CHECK(t.at("filter.positives").items[1].str == "b \"q\"");
  CHECK(t.at("model.lr").num == 0.01);
  CHECK(t.at("flags.on").b);

  CHECK(error_of("[render\n").find("t.toml:1") != std::string::npos);
  CHECK(error_of("a = 1\nb\n").find("t.toml:2") != std::string::npos);
  CHECK(error_of("a = 1\na = 2\n").find("duplicate") != std::string::npos);
  CHECK_FALSE(error_of("a = \"open\n").empty());
  CHECK_FALSE(error_of("a = [1, 2\n").empty());
  CHECK_FALSE(error_of("a = 1 2\n").empty());
}

TEST_CASE("typed config") {
  Config c;
  CHECK(c.get_int("seed") == 0);
  CHECK(c.get_double("filter.threshold") == 0.65);
  CHECK(contains(c.defaulted_keys(), "seed"));

  c.load_text("seed = 9\n[render]\nspacing = 3\n");
  CHECK(c.get_int("seed") == 9);
  CHECK(c.get_double("render.spacing") == 3.0);
  CHECK_FALSE(contains(c.defaulted_keys(), "seed"));

  c.apply_override("query.text=red object");
  CHECK(c.get_string("query.text") == "red object");
  c.apply_override("superpoint.lambda=[0.5, 1, 2]");
  CHECK(c.get_doubles("superpoint.lambda") == std::vector<double>{0.5, 1.0, 2.0});

  CHECK_THROWS_AS(c.load_text("[render]\nspacingg = 1\n"), ConfigError);
  CHECK_THROWS_AS(c.apply_override("model.hidden=\"wide\""), ConfigError);
  CHECK_THROWS_AS(c.apply_override("model.hidden"), ConfigError);
  CHECK_THROWS_AS(c.load_file("/nonexistent/haec.toml"), ConfigError);

  // a replaced default still counts as defaulted; an explicit value wins over it
  c.set_default("lift.max_rounds", ConfigValue::integer(8));
  CHECK(c.get_int("lift.max_rounds") == 8);
  CHECK(contains(c.defaulted_keys(), "lift.max_rounds"));
  c.set_default("seed", ConfigValue::integer(1));
  CHECK(c.get_int("seed") == 9);

  Config d;
  d.load_text(c.dump());
  CHECK(d.dump() == c.dump());
  CHECK(d.get_string("query.text") == "red object");
}
