#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "haec/config.hpp"

namespace haec {

// Stage names in pipeline order; "demo" runs all of them on the built-in scene.
const std::vector<std::string>& stage_names();

// Switches the config defaults to the demo scene's settings (explicit keys keep their values).
void apply_demo_defaults(Config& config);

// Runs one stage. Progress goes to log; artifacts land under paths.work along
// with manifests/<stage>.json. Errors propagate as the library's exception types.
void run_stage(const std::string& stage, const Config& config, std::ostream& log);

// Process exit code for an exception escaping run_stage:
// 1 I/O or format, 2 config or argument, 3 missing prerequisite, 4 numeric failure.
int exit_code_for(const std::exception& e);

}  // namespace haec
