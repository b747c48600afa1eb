#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "dorasim/config.hpp"
#include "dorasim/metrics.hpp"
#include "dorasim/paradigms.hpp"

namespace dorasim {

enum ExitCode { exit_ok = 0, exit_audit = 1, exit_config = 2, exit_deadlock = 3 };

struct RunOutcome {
  SimConfig cfg;
  SimulationResult result;
  RunSummary summary;
  std::uint64_t hash = 0;
  int exit_code = exit_ok;
  std::string error;
};

/// Runs every config, at most `jobs` at a time. Results keep input order and
/// do not depend on `jobs`. Traces are dropped unless `keep_traces`.
std::vector<RunOutcome> run_many(const std::vector<SimConfig>& configs, int jobs, bool keep_traces);

/// trace.jsonl, report.json, steps.csv, bubbles.csv and plot data in `dir`.
void write_run_bundle(const std::filesystem::path& dir, const RunConfig& rc, const RunOutcome& run);

/// Entry point of the dorasim executable.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dorasim
