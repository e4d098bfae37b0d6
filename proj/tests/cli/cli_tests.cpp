// Drives the haec binary end to end through std::system.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "haec/cloud.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "haec_cli_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args, const std::string& log_name = "last.log") {
  const auto log = scratch() / log_name;
  const std::string cmd = std::string(HAEC_BIN) + " " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string work(const std::string& name) { return "'" + (scratch() / name).string() + "'"; }

}  // namespace

TEST_CASE("demo is reproducible across runs and thread counts") {
  REQUIRE(run("demo --work " + work("a"), "a.log") == 0);
  REQUIRE(run("demo --work " + work("b") + " --threads 3", "b.log") == 0);
  const auto sa = slurp(scratch() / "a" / "scores.json");
  CHECK_FALSE(sa.empty());
  CHECK(sa == slurp(scratch() / "b" / "scores.json"));
  CHECK(slurp(scratch() / "a" / "pred.ply") == slurp(scratch() / "b" / "pred.ply"));
  CHECK(slurp(scratch() / "a.log").find("\"miou\"") != std::string::npos);
}

TEST_CASE("query writes similarities and a mask monotone in the threshold") {
  REQUIRE(fs::exists(scratch() / "a" / "pred.hff"));
  REQUIRE(run("query --work " + work("a") + " --text 'red object' --threshold 0.3 --output q30.ply") == 0);
  REQUIRE(run("query --work " + work("a") + " --text 'red object' --threshold 0.7 --output q70.ply") == 0);
  const auto lo = haec::load_cloud(scratch() / "a" / "q30.ply");
  const auto hi = haec::load_cloud(scratch() / "a" / "q70.ply");
  const auto* sim = lo.find_extra("sim");
  const auto* mlo = lo.find_extra("mask");
  const auto* mhi = hi.find_extra("mask");
  REQUIRE(sim);
  REQUIRE(mlo);
  REQUIRE(mhi);
  std::size_t n_lo = 0, n_hi = 0;
  for (std::size_t p = 0; p < lo.size(); ++p) {
    CHECK(mhi->values[p] <= mlo->values[p]);
    CHECK(bool(mlo->values[p]) == (sim->values[p] > 0.3));
    n_lo += mlo->values[p] > 0;
    n_hi += mhi->values[p] > 0;
  }
  CHECK(n_hi > 0);
  CHECK(n_hi <= n_lo);
  CHECK(n_lo < lo.size());
}

TEST_CASE("errors map to exit codes") {
  const auto dir = scratch() / "nogt";
  fs::create_directories(dir);
  std::ofstream(dir / "scene.ply") << "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\n"
                                      "property float y\nproperty float z\nend_header\n0 0 0\n1 1 1\n";
  CHECK(run("eval --work " + work("nogt") + " --set eval.labels='[\"a\"]'") == 3);
  CHECK(slurp(scratch() / "last.log").find("gt_sem") != std::string::npos);

  CHECK(run("train --work " + work("empty")) == 3);
  CHECK(run("render --work " + work("nogt") + " --set render.spacingg=1") == 2);
  CHECK(run("render --work " + work("nogt") + " --set render.width=wide") == 2);

  std::ofstream(dir / "bad.toml") << "[render\n";
  CHECK(run("render --work " + work("nogt") + " -c " + work("nogt/bad.toml")) == 2);

  std::ofstream(dir / "broken.ply") << "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nend_header\n0\n";
  CHECK(run("render --work " + work("nogt") + " --set paths.cloud=broken.ply") == 1);

  CHECK(run("frobnicate") != 0);
  CHECK(run("demo --threads 0") != 0);
}

TEST_CASE("config subcommand prints the effective settings") {
  REQUIRE(run("config --seed 7 --set model.steps=5") == 0);
  const auto out = slurp(scratch() / "last.log");
  CHECK(out.find("seed = 7") != std::string::npos);
  CHECK(out.find("steps = 5") != std::string::npos);
}
