#pragma once

#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "dorasim/cluster.hpp"

namespace dorasim {

enum class TriggerKind { update_driven = 0, utilization = 1, temporal = 2, window_advance = 3 };
const char* to_string(TriggerKind k);

struct TriggerPolicy {
  bool update_driven = true;
  double kv_utilization_threshold = 0.9;  // fraction of device KV capacity
  double temporal_period = 60.0;          // seconds; <= 0 is rejected
  double utilization_cooldown = 10.0;     // min seconds between utilization triggers

  void validate() const;
};

enum class StarvationPolicy {
  fail,          // more live versions than groups is an error
  drain_oldest,  // oldest live versions get one group each
};

struct PartitionOptions {
  /// Post-pass giving every version with work at least one group. It can
  /// push a donor's deviation past one group; see compute_partition.
  bool min_one_per_live_version = false;
  StarvationPolicy starvation = StarvationPolicy::fail;
};

class StarvationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Proportional DP-group counts per version, rounded with the largest
/// remainder method (ties to the newer version) so the counts always sum to
/// `dp_total` and each deviates from dp_total * R_w / sum(R) by less than
/// one group.
std::map<Version, int> compute_partition(const std::map<Version, std::int64_t>& counts, int dp_total,
                                         const PartitionOptions& options = {});

/// Chooses which concrete groups host which version so that the target
/// counts are met with the fewest weight flashes. Groups keep their version
/// when possible, busiest first.
std::map<GroupId, Version> assign_groups(const std::map<GroupId, Version>& current,
                                         const std::map<GroupId, std::int64_t>& load,
                                         const std::map<Version, int>& target_counts);

/// Groups whose hosted version changes: exactly the groups where the target
/// differs from the current assignment.
std::vector<GroupId> generate_p2p_maps(const std::map<GroupId, Version>& current,
                                       const std::map<GroupId, Version>& target);

struct LiveRequest {
  RequestId request_id = 0;
  Version version = 0;
  DeviceId device = -1;
  DeviceId origin_device = -1;  // rank of first dispatch
  Tokens kv_tokens = 0;
};

struct DeviceCapacity {
  DeviceId device = 0;
  GroupId group = 0;
  int free_slots = 0;
  Tokens free_kv_tokens = 0;
};

struct RequestMove {
  RequestId request_id = 0;
  DeviceId src = -1;
  DeviceId dst = -1;  // -1: no room, park the cache on host
  Tokens kv_tokens = 0;
};

struct MigrateMaps {
  std::vector<RequestMove> moves;  // includes parked requests (dst == -1)
  Tokens moved_tokens = 0;         // tokens crossing devices
  std::int64_t parked = 0;
};

class PlanRejected : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reassigns every request whose device will host another version. Requests
/// on a device that keeps their version stay put. Movers go largest cache
/// first; each prefers its original rank, then the tightest device (fewest
/// spare KV tokens) that still fits. When that parks something and at most
/// a dozen requests move, an exact search minimizes parked tokens instead.
/// `capacity` describes free room after
/// movers have left their sources. Throws PlanRejected when a live version
/// has no group at all in the target.
MigrateMaps generate_migrate_maps(const std::vector<LiveRequest>& active,
                                  const std::map<DeviceId, GroupId>& device_group,
                                  const std::map<GroupId, Version>& target,
                                  std::vector<DeviceCapacity> capacity);

struct LegacySlots {
  Version version = 0;
  std::int64_t idle_slots = 0;
  std::int64_t allowance = INT64_MAX;  // staleness budget, trajectories
};

struct SupplementationInput {
  std::int64_t rbs_trajectories = 0;
  int group_size = 1;
  Version latest = 0;
  std::int64_t outstanding = 0;  // R_sum
  std::int64_t latest_allowance = INT64_MAX;
  std::vector<LegacySlots> legacy;
};

/// New prompts per version: the latest version tops R_sum up to RBS, legacy
/// versions only fill their idle slots. Counts are prompts (groups of G).
std::map<Version, std::int64_t> plan_supplementation(const SupplementationInput& in);

struct GroupState {
  GroupId group = 0;
  Version version = 0;
  std::vector<DeviceId> devices;
};

/// Everything the planner needs, captured at trigger time.
struct OrchestratorSnapshot {
  std::vector<Version> window;  // newest first
  std::map<Version, std::int64_t> active;  // pending + in flight
  std::map<Version, std::int64_t> pending;
  std::int64_t outstanding = 0;  // pending + in flight + queued
  std::map<Version, std::int64_t> allowance;
  std::int64_t rbs_trajectories = 0;
  int group_size = 1;
  int slots_per_device = 1;
  std::vector<GroupState> groups;
  std::vector<LiveRequest> live;  // requests holding KV on devices
  std::vector<DeviceCapacity> capacity;  // current free room per device
};

struct MigrationPlan {
  TriggerKind trigger = TriggerKind::update_driven;
  std::map<Version, int> partition_before;
  std::map<Version, int> partition_after;
  std::map<GroupId, Version> target;
  std::vector<GroupId> flashed;
  MigrateMaps migrations;
  std::int64_t injected_latest = 0;  // prompts
  std::map<Version, std::int64_t> injected_legacy;  // prompts
};

/// Supplement count, partition, weight and request maps, legacy fill.
MigrationPlan plan_rebalance(const OrchestratorSnapshot& snap, TriggerKind trigger);

}  // namespace dorasim
