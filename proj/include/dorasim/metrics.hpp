#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dorasim/simengine.hpp"
#include "dorasim/workload.hpp"

namespace dorasim {

/// Everything here is recomputed from trace records alone.

struct RunInfo {
  std::string paradigm;
  int group_size = 1;
  int staleness_k = 0;
  std::int64_t tbs = 0;  // trajectories
  int devices = 0;
  int train_devices = 0;
  int slots = 0;
  std::uint64_t seed = 0;
};

/// Reads the run_header record; throws PreconditionError without one.
RunInfo run_info(const Trace& trace);

struct StepRecord {
  std::int64_t step = 0;
  double t_start = 0, t_end = 0;
  double t_prefill = 0;
  double t_decode = 0;
  double t_train = 0;
  double t_rollout_only = 0;
  double t_total = 0;
  std::vector<std::pair<RequestId, Version>> trained;
  std::int64_t discarded = 0;
  Tokens reprefill_tokens = 0;
  Tokens trained_tokens = 0;
  std::int64_t max_staleness = 0;
};

/// Steps end at train_done records. Prefill time is the measure of instants
/// with some prefill running; decode is the remaining rollout-active time;
/// rollout-only is rollout-active time with the trainer idle.
std::vector<StepRecord> step_decomposition(const Trace& trace);

struct DeviceBubble {
  std::int64_t device = 0;
  double intra = 0;
  double inter = 0;
};

struct BubbleReport {
  std::int64_t step = 0;
  std::vector<DeviceBubble> devices;
  double total_intra = 0;
  double total_inter = 0;
};

/// intra(d): idle slot time on d before its last completion in the step,
/// relative to the peak number of busy slots; inter(d): time from d's last
/// completion to the step's last completion.
BubbleReport compute_bubbles(const Trace& trace, std::int64_t step);

struct Throughput {
  double consumed = 0;  // trained tokens per second
  double produced = 0;  // completed tokens per second, trained or not
  Tokens consumed_tokens = 0;
  Tokens produced_tokens = 0;
  double wall = 0;
};

/// Throws PreconditionError when nothing was trained.
Throughput throughput(const Trace& trace);

struct OverheadFractions {
  double load_balancing = 0;
  double request_transfer = 0;
  double free_cache = 0;
  double lb_seconds = 0, xfer_seconds = 0, free_seconds = 0;
  double wall = 0;
  std::int64_t rebalances = 0;
};

OverheadFractions overhead_fractions(const Trace& trace);

struct AuditReport {
  std::string paradigm;
  int staleness_k = 0;
  std::int64_t c1_violations = 0;
  std::int64_t c2_dropped = 0;
  std::int64_t max_staleness = 0;
  bool group_integrity = true;
  std::vector<std::string> problems;  // violated claims of this paradigm

  bool passed() const { return problems.empty(); }
};

/// Counts and checks the constraints each paradigm claims: dora all three
/// (staleness <= K), synchronous staleness 0, one-step-off staleness <= 1,
/// partial rollout only C2, replication only C1.
AuditReport audit(const Trace& trace);

struct RunSummary {
  RunInfo info;
  std::int64_t steps = 0;
  double mean_step_time = 0;  // excluding warmup steps
  double rollout_only_fraction = 0;
  Throughput tput;
  OverheadFractions overheads;
  AuditReport audit;
  Tokens reprefill_tokens = 0;
  std::int64_t discarded = 0;
  double mean_trained_length = 0;
  double mean_discarded_length = 0;  // true lengths of discarded trajectories
};

RunSummary summarize(const Trace& trace, int warmup_steps);

void write_steps_csv(const std::vector<StepRecord>& steps, std::ostream& out);
void write_bubbles_csv(const Trace& trace, const std::vector<StepRecord>& steps, std::ostream& out);

/// Writes `content` to `path` through a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace dorasim
