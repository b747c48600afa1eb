#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dorasim/paradigms.hpp"

namespace dorasim {

struct RunConfig {
  SimConfig sim;                        // paradigm.kind is paradigms.front()
  std::vector<ParadigmKind> paradigms;  // compare runs each of these
  std::string output_dir = "out";
  nlohmann::ordered_json resolved;      // preset + file + overrides, as parsed
};

/// Names accepted by "preset" and --preset: paper64, paper128, small.
std::vector<std::string> preset_names();
/// Throws ConfigError for an unknown name.
nlohmann::ordered_json preset(const std::string& name);

/// Strict parse: unknown keys and ill-typed values throw ConfigError with the
/// dotted key path in the message. A top-level "preset" key is expanded
/// first and the remaining keys override it, object by object; a length
/// distribution that names its "kind" replaces the preset's outright.
RunConfig parse_config(const nlohmann::ordered_json& j);

/// "a.b.c=value"; the value is parsed as JSON when possible, otherwise kept
/// as a string. Short aliases: K, n_devices, seed, n_steps.
void apply_override(nlohmann::ordered_json& j, const std::string& assignment);

/// The file (or "preset:<name>") with any "preset" key expanded.
nlohmann::ordered_json read_config_source(const std::string& source);

/// Reads the file (or a preset name prefixed with "preset:"), applies the
/// overrides in order and parses the result.
RunConfig load_config(const std::string& source, const std::vector<std::string>& overrides = {});

/// Copy of the config with a different paradigm selected.
SimConfig for_paradigm(const RunConfig& cfg, ParadigmKind kind);

/// Grid values for --param: "lo..hi" (integers) or a comma list.
std::vector<std::string> expand_grid_values(const std::string& spec);

}  // namespace dorasim
