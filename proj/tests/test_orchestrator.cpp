#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "dorasim/errors.hpp"
#include "dorasim/orchestrator.hpp"
#include "oracles.hpp"

using namespace dorasim;

TEST(ComputePartition, ExactProportions) {
  EXPECT_EQ(compute_partition({{1, 10}, {2, 30}}, 8), (std::map<Version, int>{{1, 2}, {2, 6}}));
  EXPECT_EQ(compute_partition({{1, 0}, {2, 16}}, 8), (std::map<Version, int>{{1, 0}, {2, 8}}));
}

TEST(ComputePartition, LargestRemainderNewestTiebreak) {
  EXPECT_EQ(compute_partition({{1, 1}, {2, 1}, {3, 1}}, 4), (std::map<Version, int>{{1, 1}, {2, 1}, {3, 2}}));
}

TEST(ComputePartition, Preconditions) {
  EXPECT_THROW(compute_partition({{1, 0}}, 4), PreconditionError);
  EXPECT_THROW(compute_partition({{1, 3}}, 0), PreconditionError);
  EXPECT_THROW(compute_partition({{1, 1}, {2, 1}, {3, 1}}, 2), StarvationError);
  auto drained = compute_partition({{1, 1}, {2, 1}, {3, 1}}, 2, {false, StarvationPolicy::drain_oldest});
  EXPECT_EQ(drained, (std::map<Version, int>{{1, 1}, {2, 1}, {3, 0}}));
}

TEST(ComputePartition, MatchesHamiltonOracle) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 5000; ++trial) {
    const int n_versions = 1 + static_cast<int>(rng() % 4);
    const int dp = 1 + static_cast<int>(rng() % 64);
    std::map<Version, std::int64_t> counts;
    std::int64_t sum = 0;
    for (int v = 0; v < n_versions; ++v) {
      counts[v] = static_cast<std::int64_t>(rng() % 50);
      sum += counts[v];
    }
    if (sum == 0) counts[0] = 1;
    int live = 0;
    for (const auto& [v, c] : counts) live += c > 0;
    if (live > dp) {
      EXPECT_THROW(compute_partition(counts, dp), StarvationError);
      continue;
    }
    const auto got = compute_partition(counts, dp);
    EXPECT_EQ(got, oracle::hamilton(counts, dp));
    EXPECT_TRUE(oracle::within_one(counts, got, dp));
  }
}

TEST(ComputePartition, MinOnePassCoversLiveVersions) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 2000; ++trial) {
    std::map<Version, std::int64_t> counts;
    const int n_versions = 1 + static_cast<int>(rng() % 4);
    int live = 0;
    for (int v = 0; v < n_versions; ++v) {
      counts[v] = rng() % 3 == 0 ? 0 : 1 + static_cast<std::int64_t>(rng() % 100);
      live += counts[v] > 0;
    }
    if (live == 0) {
      counts[0] = 1;
      live = 1;
    }
    const int dp = live + static_cast<int>(rng() % 8);
    auto p = compute_partition(counts, dp, {true, StarvationPolicy::fail});
    int sum = 0;
    for (const auto& [v, n] : p) {
      sum += n;
      if (counts[v] > 0) {
        EXPECT_GE(n, 1);
      }
    }
    EXPECT_EQ(sum, dp);
  }
}

TEST(GenerateP2PMaps, MinimalFlashSet) {
  std::map<GroupId, Version> cur{{0, 1}, {1, 1}, {2, 2}};
  EXPECT_TRUE(generate_p2p_maps(cur, cur).empty());
  auto one = cur;
  one[1] = 2;
  EXPECT_EQ(generate_p2p_maps(cur, one), (std::vector<GroupId>{1}));
  auto swapped = cur;
  swapped[0] = 2;
  swapped[2] = 1;
  EXPECT_EQ(generate_p2p_maps(cur, swapped), (std::vector<GroupId>{0, 2}));
}

// Every subset of groups that, once flashed, yields the target must contain
// the returned set, and the returned set itself must yield the target.
TEST(GenerateP2PMaps, BruteForceMinimality) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 4);
    std::map<GroupId, Version> cur, tgt;
    for (int g = 0; g < n; ++g) {
      cur[g] = static_cast<Version>(rng() % 3);
      tgt[g] = static_cast<Version>(rng() % 3);
    }
    const auto flash = generate_p2p_maps(cur, tgt);
    std::size_t best = SIZE_MAX;
    for (int mask = 0; mask < (1 << n); ++mask) {
      bool ok = true;
      for (int g = 0; g < n; ++g) {
        if (!(mask >> g & 1) && cur[g] != tgt[g]) ok = false;
      }
      if (ok) best = std::min<std::size_t>(best, static_cast<std::size_t>(__builtin_popcount(mask)));
    }
    EXPECT_EQ(flash.size(), best);
  }
}

// assign_groups realizes the target counts with the fewest flashes.
TEST(AssignGroups, FewestFlashesBruteForce) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 4);
    std::map<GroupId, Version> cur;
    std::map<GroupId, std::int64_t> load;
    for (int g = 0; g < n; ++g) {
      cur[g] = static_cast<Version>(rng() % 3);
      load[g] = static_cast<std::int64_t>(rng() % 5);
    }
    std::map<Version, int> counts{{0, 0}, {1, 0}, {2, 0}};
    for (int g = 0; g < n; ++g) ++counts[static_cast<Version>(rng() % 3)];
    const auto got = assign_groups(cur, load, counts);
    std::map<Version, int> realized;
    for (const auto& [g, v] : got) ++realized[v];
    for (const auto& [v, c] : counts) EXPECT_EQ(realized[v], c);
    // brute force over all 3^n assignments with the right counts
    std::size_t best = SIZE_MAX;
    int total = 1;
    for (int i = 0; i < n; ++i) total *= 3;
    for (int code = 0; code < total; ++code) {
      std::map<GroupId, Version> a;
      std::map<Version, int> c2;
      int x = code;
      for (int g = 0; g < n; ++g, x /= 3) {
        a[g] = x % 3;
        ++c2[x % 3];
      }
      bool match = true;
      for (const auto& [v, c] : counts) match &= c2[v] == c;
      if (match) best = std::min(best, generate_p2p_maps(cur, a).size());
    }
    EXPECT_EQ(generate_p2p_maps(cur, got).size(), best);
  }
}

TEST(GenerateMigrateMaps, KeepsRequestsOnUnchangedGroups) {
  std::vector<LiveRequest> live{{1, 1, 0, 0, 100}};
  auto maps = generate_migrate_maps(live, {{0, 0}, {1, 1}}, {{0, 1}, {1, 2}},
                                    {{0, 0, 3, 1000}, {1, 1, 3, 1000}});
  EXPECT_TRUE(maps.moves.empty());
}

TEST(GenerateMigrateMaps, FlashedGroupMovesToRemainingGroup) {
  std::vector<LiveRequest> live{{1, 1, 0, 0, 100}, {2, 1, 0, 0, 50}};
  auto maps = generate_migrate_maps(live, {{0, 0}, {1, 1}}, {{0, 2}, {1, 1}},
                                    {{0, 0, 4, 1000}, {1, 1, 2, 1000}});
  ASSERT_EQ(maps.moves.size(), 2u);
  for (const auto& m : maps.moves) EXPECT_EQ(m.dst, 1);
  EXPECT_EQ(maps.moved_tokens, 150);
  EXPECT_EQ(maps.parked, 0);
}

TEST(GenerateMigrateMaps, PrefersOriginalRank) {
  std::vector<LiveRequest> live{{1, 1, 0, 2, 100}};
  auto maps = generate_migrate_maps(live, {{0, 0}, {1, 1}, {2, 2}}, {{0, 2}, {1, 1}, {2, 1}},
                                    {{0, 0, 4, 1000}, {1, 1, 2, 500}, {2, 2, 2, 1000}});
  ASSERT_EQ(maps.moves.size(), 1u);
  EXPECT_EQ(maps.moves[0].dst, 2);
}

TEST(GenerateMigrateMaps, NoGroupForLiveVersionRejected) {
  std::vector<LiveRequest> live{{1, 1, 0, 0, 100}};
  EXPECT_THROW(generate_migrate_maps(live, {{0, 0}}, {{0, 2}}, {{0, 0, 4, 1000}}), PlanRejected);
}

TEST(GenerateMigrateMaps, ThreeRequestsTwoGroupsMatchesBruteForce) {
  // requests of version 1 on flashed group 0; groups 1 and 2 keep version 1
  // with 1 and 2 free slots
  std::vector<LiveRequest> live{{1, 1, 0, 0, 300}, {2, 1, 0, 0, 200}, {3, 1, 0, 0, 100}};
  std::map<DeviceId, GroupId> dg{{0, 0}, {1, 1}, {2, 2}};
  std::map<GroupId, Version> tgt{{0, 2}, {1, 1}, {2, 1}};
  std::vector<DeviceCapacity> cap{{0, 0, 3, 10000}, {1, 1, 1, 10000}, {2, 2, 2, 10000}};
  auto maps = generate_migrate_maps(live, dg, tgt, cap);
  const auto best = oracle::min_cost_migration(live, dg, tgt, cap);
  EXPECT_EQ(maps.parked, 0);
  EXPECT_EQ(oracle::migration_cost(maps), best);
}

TEST(GenerateMigrateMaps, RandomSmallInstancesMatchBruteForce) {
  std::mt19937_64 rng(5);
  int checked = 0;
  for (int trial = 0; trial < 3000; ++trial) {
    auto inst = oracle::random_migration_instance(rng);
    auto maps = generate_migrate_maps(inst.live, inst.device_group, inst.target, inst.capacity);
    const auto best = oracle::min_cost_migration(inst.live, inst.device_group, inst.target, inst.capacity);
    EXPECT_EQ(oracle::migration_cost(maps), best) << "trial " << trial;
    oracle::check_migration_feasible(inst, maps);
    ++checked;
  }
  EXPECT_EQ(checked, 3000);
}

TEST(PlanSupplementation, TopsUpLatest) {
  SupplementationInput in;
  in.rbs_trajectories = 64;
  in.group_size = 1;
  in.latest = 3;
  in.outstanding = 40;
  EXPECT_EQ(plan_supplementation(in)[3], 24);
  in.outstanding = 64;
  EXPECT_EQ(plan_supplementation(in)[3], 0);
}

TEST(PlanSupplementation, LegacyFillsIdleSlotsOnly) {
  SupplementationInput in;
  in.rbs_trajectories = 64;
  in.group_size = 1;
  in.latest = 3;
  in.outstanding = 64;
  in.legacy = {{2, 3}};
  auto out = plan_supplementation(in);
  EXPECT_EQ(out[2], 3);
  EXPECT_EQ(out[3], 0);
  in.legacy = {{2, 3, 1}};
  EXPECT_EQ(plan_supplementation(in)[2], 1);
}

TEST(PlanSupplementation, WholeGroupsAndAllowance) {
  SupplementationInput in;
  in.rbs_trajectories = 64;
  in.group_size = 4;
  in.latest = 0;
  in.outstanding = 30;
  EXPECT_EQ(plan_supplementation(in)[0], 8);  // 34 trajectories -> 8 prompts
  in.latest_allowance = 9;
  EXPECT_EQ(plan_supplementation(in)[0], 2);
}

TEST(TriggerPolicy, Validation) {
  TriggerPolicy p;
  p.temporal_period = 0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.kv_utilization_threshold = 0;
  EXPECT_THROW(p.validate(), ConfigError);
  p.kv_utilization_threshold = 1.5;
  EXPECT_THROW(p.validate(), ConfigError);
}

TEST(PlanRebalance, ConservesRequests) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 500; ++trial) {
    auto inst = oracle::random_migration_instance(rng);
    OrchestratorSnapshot s;
    std::set<Version> vs;
    for (const auto& r : inst.live) vs.insert(r.version);
    for (const auto& [g, v] : inst.current) vs.insert(v);
    for (auto it = vs.rbegin(); it != vs.rend(); ++it) s.window.push_back(*it);
    for (const auto& r : inst.live) s.active[r.version] += 1;
    s.outstanding = static_cast<std::int64_t>(inst.live.size());
    s.rbs_trajectories = s.outstanding + static_cast<std::int64_t>(rng() % 8);
    s.group_size = 1;
    s.slots_per_device = 4;
    std::map<GroupId, GroupState> groups;
    for (const auto& [d, g] : inst.device_group) {
      groups[g].group = g;
      groups[g].version = inst.current.at(g);
      groups[g].devices.push_back(d);
    }
    for (const auto& [g, st] : groups) s.groups.push_back(st);
    s.live = inst.live;
    s.capacity = inst.capacity_before_moves;
    const auto plan = plan_rebalance(s, TriggerKind::update_driven);
    int sum = 0;
    for (const auto& [v, n] : plan.partition_after) sum += n;
    EXPECT_EQ(sum, static_cast<int>(s.groups.size()));
    // every live request is either untouched or appears once in the moves
    std::map<RequestId, int> seen;
    for (const auto& m : plan.migrations.moves) ++seen[m.request_id];
    for (const auto& r : inst.live) {
      const GroupId g = inst.device_group.at(r.device);
      const bool stays = plan.target.at(g) == r.version;
      EXPECT_EQ(seen[r.request_id], stays ? 0 : 1);
    }
  }
}

TEST(PlanRebalance, InjectionsShareTheStalenessBudget) {
  // both versions draw on the same 8 trajectories of slack
  OrchestratorSnapshot s;
  s.window = {1, 0};
  s.active = {{1, 1}, {0, 1}};
  s.allowance = {{1, 8}, {0, 8}};
  s.outstanding = 2;
  s.rbs_trajectories = 100;
  s.group_size = 1;
  s.slots_per_device = 4;
  s.groups = {{0, 1, {0}}, {1, 0, {1}}};
  s.live = {{0, 1, 0, 0, 10}, {1, 0, 1, 1, 10}};
  s.capacity = {{0, 0, 3, 1000}, {1, 1, 3, 1000}};
  const auto plan = plan_rebalance(s, TriggerKind::update_driven);
  std::int64_t injected = plan.injected_latest;
  for (const auto& [v, n] : plan.injected_legacy) injected += n;
  EXPECT_EQ(plan.injected_latest, 8);
  EXPECT_LE(injected, 8);
}
