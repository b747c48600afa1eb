#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dorasim/cluster.hpp"
#include "dorasim/kvcache.hpp"
#include "dorasim/metrics.hpp"
#include "dorasim/orchestrator.hpp"
#include "dorasim/simengine.hpp"
#include "dorasim/workload.hpp"

namespace dorasim {

enum class ParadigmKind { synchronous, one_step_off_policy, partial_rollout, dora, replication };

const char* to_string(ParadigmKind k);
/// Accepts the canonical names plus the short forms "sync" and "one_step_off".
std::optional<ParadigmKind> paradigm_from_string(std::string_view s);

struct ParadigmConfig {
  ParadigmKind kind = ParadigmKind::synchronous;
  std::int64_t tbs_prompts = 1;  // TBS in trajectories is tbs_prompts * G
  std::int64_t rbs_prompts = 1;  // dispatched prompts (dora, partial_rollout)
  int staleness_k = 1;
  Tokens segment_tokens = 4096;    // partial_rollout decode budget per iteration
  double oversample_factor = 2.0;  // replication
};

struct WorkloadConfig {
  LengthDistribution input = LengthDistribution::uniform(64, 2048, 2048);
  LengthDistribution output = LengthDistribution::point(100, 100);
  int group_size = 4;
  RewardModel reward;
};

struct OrchestratorConfig {
  TriggerPolicy triggers;
  double planner_base_seconds = 0.05;
  double planner_seconds_per_group = 0.002;
};

struct StopCondition {
  int n_steps = 4;
  double max_time = 1e7;  // virtual seconds; exceeding it is reported as a deadlock
  int warmup_steps = 1;   // excluded from mean step time
};

struct SimConfig {
  std::uint64_t seed = 0;
  ParadigmConfig paradigm;
  WorkloadConfig workload;
  ClusterTopology cluster;
  double train_fraction = 0.5;  // disaggregated paradigms: share of devices training
  ModelProfile model;
  NetworkProfile network;
  OrchestratorConfig orchestrator;
  StopCondition stop;

  std::int64_t tbs_trajectories() const { return paradigm.tbs_prompts * workload.group_size; }
  /// Devices running the trainer; the rest roll out (disaggregated paradigms).
  int train_devices() const;
  bool disaggregated() const;
  /// Throws ConfigError naming the offending field.
  void validate() const;
};

struct SimulationResult {
  Trace trace;
  std::vector<StepRecord> steps;
  KvStats kv;
  std::uint64_t events = 0;
};

SimulationResult run_synchronous(const SimConfig& cfg);
SimulationResult run_one_step_off(const SimConfig& cfg);
SimulationResult run_partial_rollout(const SimConfig& cfg);
SimulationResult run_replication(const SimConfig& cfg);
SimulationResult run_dora(const SimConfig& cfg);

/// Dispatches on cfg.paradigm.kind.
SimulationResult run_paradigm(const SimConfig& cfg);

}  // namespace dorasim
