// Command-line front end: one subcommand per pipeline stage.
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "haec/config.hpp"
#include "haec/error.hpp"
#include "haec/parallel.hpp"
#include "haec/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"haec: open-vocabulary panoptic pseudo-labels and a toy superpoint MoE model"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path, work;
  std::vector<std::string> overrides;
  std::int64_t seed = 0;
  std::size_t threads = 1;
  app.add_option("-c,--config", config_path, "TOML config file")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "random seed (overrides the config)");
  app.add_option("--threads", threads, "worker thread cap")->check(CLI::Range(1, 1024));
  app.add_option("--work", work, "work directory (overrides paths.work)");
  app.add_option("--set", overrides, "override a config key, e.g. --set model.steps=50");

  for (const auto& stage : haec::stage_names()) app.add_subcommand(stage, "run the " + stage + " stage");

  std::int64_t steps = -1;
  app.get_subcommand("train")->add_option("--steps", steps, "training steps (overrides model.steps)");
  std::string text, output;
  double threshold = -1;
  auto* q = app.get_subcommand("query");
  q->add_option("--text", text, "query text");
  auto* thr_opt = q->add_option("--threshold", threshold, "similarity threshold");
  q->add_option("--output", output, "output PLY");
  auto* dump = app.add_subcommand("config", "print the effective configuration");

  CLI11_PARSE(app, argc, argv);

  try {
    haec::thread_limit() = threads;
    haec::Config config;
    const auto* sub = app.get_subcommands().front();
    const std::string stage = sub->get_name();
    if (stage == "demo") haec::apply_demo_defaults(config);
    if (!config_path.empty()) config.load_file(config_path);
    for (const auto& o : overrides) config.apply_override(o);
    if (*seed_opt) config.set("seed", haec::ConfigValue::integer(seed));
    if (!work.empty()) config.set("paths.work", haec::ConfigValue::string(work));
    if (steps >= 0) config.set("model.steps", haec::ConfigValue::integer(steps));
    if (!text.empty()) config.set("query.text", haec::ConfigValue::string(text));
    if (*thr_opt) config.set("query.threshold", haec::ConfigValue::real(threshold));
    if (!output.empty()) config.set("query.output", haec::ConfigValue::string(output));

    if (sub == dump) {
      std::cout << config.dump();
      return 0;
    }
    haec::run_stage(stage, config, std::cout);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "haec: " << e.what() << "\n";
    return haec::exit_code_for(e);
  }
}
