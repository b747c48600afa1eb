#include "dorasim/orchestrator.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <set>

#include <fmt/format.h>

#include "dorasim/errors.hpp"

namespace dorasim {

const char* to_string(TriggerKind k) {
  switch (k) {
    case TriggerKind::update_driven: return "update_driven";
    case TriggerKind::utilization: return "utilization";
    case TriggerKind::temporal: return "temporal";
    case TriggerKind::window_advance: return "window_advance";
  }
  return "?";
}

void TriggerPolicy::validate() const {
  if (!(kv_utilization_threshold > 0 && kv_utilization_threshold <= 1)) {
    throw ConfigError(fmt::format("kv_utilization_threshold must lie in (0, 1], got {}",
                                  kv_utilization_threshold));
  }
  if (!(temporal_period > 0)) {
    throw ConfigError(fmt::format("temporal_period must be > 0, got {}", temporal_period));
  }
}

std::map<Version, int> compute_partition(const std::map<Version, std::int64_t>& counts, int dp_total,
                                         const PartitionOptions& options) {
  if (dp_total < 1) throw PreconditionError("dp_total must be >= 1");
  std::int64_t total = 0;
  std::vector<Version> live;
  for (const auto& [v, r] : counts) {
    if (r < 0) throw PreconditionError(fmt::format("negative request count for version {}", v));
    total += r;
    if (r > 0) live.push_back(v);
  }
  if (total == 0) throw PreconditionError("compute_partition needs at least one R_w > 0");

  std::map<Version, int> out;
  for (const auto& [v, r] : counts) out[v] = 0;

  if (static_cast<int>(live.size()) > dp_total) {
    if (options.starvation == StarvationPolicy::fail) {
      throw StarvationError(fmt::format("{} versions with work but only {} DP groups", live.size(),
                                        dp_total));
    }
    for (int i = 0; i < dp_total; ++i) out[live[static_cast<std::size_t>(i)]] = 1;
    return out;
  }

  struct Share {
    Version v;
    std::int64_t numer;  // dp_total * R_w, compared against total
    std::int64_t rem;
  };
  std::vector<Share> shares;
  int assigned = 0;
  for (const auto& [v, r] : counts) {
    const std::int64_t numer = static_cast<std::int64_t>(dp_total) * r;
    out[v] = static_cast<int>(numer / total);
    assigned += out[v];
    shares.push_back({v, numer, numer % total});
  }
  std::sort(shares.begin(), shares.end(), [](const Share& a, const Share& b) {
    return a.rem != b.rem ? a.rem > b.rem : a.v > b.v;
  });
  for (std::size_t i = 0; assigned < dp_total; ++i, ++assigned) ++out[shares[i].v];

  if (options.min_one_per_live_version) {
    for (Version v : live) {
      if (out[v] > 0) continue;
      // donor: the version furthest above its exact share
      std::optional<Share> donor;
      for (const auto& s : shares) {
        if (out[s.v] < 2) continue;
        const std::int64_t surplus = static_cast<std::int64_t>(out[s.v]) * total - s.numer;
        if (!donor) {
          donor = s;
          continue;
        }
        const std::int64_t best = static_cast<std::int64_t>(out[donor->v]) * total - donor->numer;
        if (surplus > best || (surplus == best && s.v > donor->v)) donor = s;
      }
      if (!donor) throw StarvationError("no donor group for a live version");
      --out[donor->v];
      out[v] = 1;
    }
  }
  return out;
}

std::map<GroupId, Version> assign_groups(const std::map<GroupId, Version>& current,
                                         const std::map<GroupId, std::int64_t>& load,
                                         const std::map<Version, int>& target_counts) {
  int wanted = 0;
  for (const auto& [v, n] : target_counts) {
    if (n < 0) throw PreconditionError("negative target group count");
    wanted += n;
  }
  if (wanted != static_cast<int>(current.size())) {
    throw PreconditionError(fmt::format("target counts sum to {} but there are {} groups", wanted,
                                        current.size()));
  }
  auto load_of = [&](GroupId g) {
    auto it = load.find(g);
    return it == load.end() ? std::int64_t{0} : it->second;
  };

  std::map<Version, std::vector<GroupId>> by_version;
  for (const auto& [g, v] : current) by_version[v].push_back(g);

  std::map<GroupId, Version> target;
  std::vector<GroupId> released;
  for (auto& [v, groups] : by_version) {
    std::sort(groups.begin(), groups.end(), [&](GroupId a, GroupId b) {
      return load_of(a) != load_of(b) ? load_of(a) > load_of(b) : a < b;
    });
    auto it = target_counts.find(v);
    const std::size_t keep = it == target_counts.end() ? 0 : static_cast<std::size_t>(it->second);
    for (std::size_t i = 0; i < groups.size(); ++i) {
      if (i < keep) {
        target[groups[i]] = v;
      } else {
        released.push_back(groups[i]);
      }
    }
  }
  std::sort(released.begin(), released.end(), [&](GroupId a, GroupId b) {
    return load_of(a) != load_of(b) ? load_of(a) < load_of(b) : a < b;
  });
  std::size_t next = 0;
  for (const auto& [v, n] : target_counts) {
    int have = 0;
    for (const auto& [g, tv] : target) have += tv == v;
    for (; have < n; ++have) target[released.at(next++)] = v;
  }
  return target;
}

std::vector<GroupId> generate_p2p_maps(const std::map<GroupId, Version>& current,
                                       const std::map<GroupId, Version>& target) {
  std::vector<GroupId> flash;
  for (const auto& [g, v] : target) {
    auto it = current.find(g);
    if (it == current.end()) throw PreconditionError(fmt::format("unknown group {}", g));
    if (it->second != v) flash.push_back(g);
  }
  return flash;
}

namespace {

constexpr std::size_t kExactMovers = 12;

// Greedy best-fit can park a cache that some other placement would fit.
// Small instances get an exact search that minimizes parked tokens (they
// cross the host link twice); the greedy result stays when it is optimal.
void refine_parked(MigrateMaps& maps, const std::vector<const LiveRequest*>& movers,
                   const std::map<GroupId, Version>& target, std::vector<DeviceCapacity> cap) {
  Tokens greedy_parked = 0;
  for (const auto& m : maps.moves) {
    if (m.dst < 0) greedy_parked += m.kv_tokens;
  }
  Tokens best = greedy_parked;
  std::vector<DeviceId> choice(movers.size(), -1), best_choice;
  std::function<void(std::size_t, Tokens)> go = [&](std::size_t i, Tokens parked) {
    if (parked >= best) return;
    if (i == movers.size()) {
      best = parked;
      best_choice = choice;
      return;
    }
    const auto* r = movers[i];
    for (auto& c : cap) {
      if (target.at(c.group) != r->version || c.free_slots < 1 || c.free_kv_tokens < r->kv_tokens) continue;
      c.free_slots -= 1;
      c.free_kv_tokens -= r->kv_tokens;
      choice[i] = c.device;
      go(i + 1, parked);
      c.free_slots += 1;
      c.free_kv_tokens += r->kv_tokens;
    }
    choice[i] = -1;
    go(i + 1, parked + r->kv_tokens);
  };
  go(0, 0);
  if (best_choice.empty()) return;
  maps.moves.clear();
  maps.moved_tokens = 0;
  maps.parked = 0;
  for (std::size_t i = 0; i < movers.size(); ++i) {
    const auto* r = movers[i];
    maps.moves.push_back({r->request_id, r->device, best_choice[i], r->kv_tokens});
    if (best_choice[i] < 0) {
      ++maps.parked;
    } else if (best_choice[i] != r->device) {
      maps.moved_tokens += r->kv_tokens;
    }
  }
}

}  // namespace

MigrateMaps generate_migrate_maps(const std::vector<LiveRequest>& active,
                                  const std::map<DeviceId, GroupId>& device_group,
                                  const std::map<GroupId, Version>& target,
                                  std::vector<DeviceCapacity> capacity) {
  std::set<Version> hosted;
  for (const auto& [g, v] : target) hosted.insert(v);
  auto target_of_device = [&](DeviceId d) {
    auto it = device_group.find(d);
    if (it == device_group.end()) throw PreconditionError(fmt::format("unknown device {}", d));
    return target.at(it->second);
  };

  std::vector<const LiveRequest*> movers;
  for (const auto& r : active) {
    if (target_of_device(r.device) == r.version) continue;
    if (!hosted.count(r.version)) {
      throw PlanRejected(fmt::format("request {} of version {} has no group in the target partition",
                                     r.request_id, r.version));
    }
    movers.push_back(&r);
  }
  std::sort(movers.begin(), movers.end(), [](const LiveRequest* a, const LiveRequest* b) {
    return a->kv_tokens != b->kv_tokens ? a->kv_tokens > b->kv_tokens : a->request_id < b->request_id;
  });

  std::sort(capacity.begin(), capacity.end(),
            [](const DeviceCapacity& a, const DeviceCapacity& b) { return a.device < b.device; });

  const auto initial = capacity;
  MigrateMaps maps;
  for (const auto* r : movers) {
    auto fits = [&](const DeviceCapacity& c) {
      return target.at(c.group) == r->version && c.free_slots >= 1 && c.free_kv_tokens >= r->kv_tokens;
    };
    DeviceCapacity* pick = nullptr;
    for (auto& c : capacity) {
      if (c.device == r->origin_device && fits(c)) pick = &c;
    }
    if (!pick) {
      for (auto& c : capacity) {
        if (!fits(c)) continue;
        if (!pick || c.free_kv_tokens < pick->free_kv_tokens ||
            (c.free_kv_tokens == pick->free_kv_tokens && c.free_slots > pick->free_slots)) {
          pick = &c;
        }
      }
    }
    RequestMove move{r->request_id, r->device, -1, r->kv_tokens};
    if (pick) {
      move.dst = pick->device;
      pick->free_slots -= 1;
      pick->free_kv_tokens -= r->kv_tokens;
      if (move.dst != move.src) maps.moved_tokens += r->kv_tokens;
    } else {
      ++maps.parked;
    }
    maps.moves.push_back(move);
  }
  if (maps.parked > 0 && movers.size() <= kExactMovers) refine_parked(maps, movers, target, initial);
  return maps;
}

std::map<Version, std::int64_t> plan_supplementation(const SupplementationInput& in) {
  if (in.group_size < 1) throw PreconditionError("group size must be >= 1");
  std::map<Version, std::int64_t> out;
  const std::int64_t deficit = std::max<std::int64_t>(0, in.rbs_trajectories - in.outstanding);
  out[in.latest] = std::min(deficit, in.latest_allowance) / in.group_size;
  for (const auto& l : in.legacy) {
    if (l.version == in.latest) continue;
    const std::int64_t room = std::min(std::max<std::int64_t>(0, l.idle_slots), l.allowance);
    out[l.version] += room / in.group_size;
  }
  return out;
}

namespace {

std::map<Version, int> count_groups(const std::map<GroupId, Version>& assignment) {
  std::map<Version, int> out;
  for (const auto& [g, v] : assignment) ++out[v];
  return out;
}

}  // namespace

MigrationPlan plan_rebalance(const OrchestratorSnapshot& snap, TriggerKind trigger) {
  if (snap.window.empty() || snap.groups.empty()) {
    throw PreconditionError("rebalance needs a window and at least one group");
  }
  MigrationPlan plan;
  plan.trigger = trigger;
  const Version latest = snap.window.front();

  // Step 1: top up to RBS on the latest version (counted before partitioning).
  SupplementationInput sup;
  sup.rbs_trajectories = snap.rbs_trajectories;
  sup.group_size = snap.group_size;
  sup.latest = latest;
  sup.outstanding = snap.outstanding;
  if (auto it = snap.allowance.find(latest); it != snap.allowance.end()) {
    sup.latest_allowance = it->second;
  }
  plan.injected_latest = plan_supplementation(sup)[latest];

  std::map<GroupId, Version> current;
  std::map<DeviceId, GroupId> device_group;
  for (const auto& g : snap.groups) {
    current[g.group] = g.version;
    for (DeviceId d : g.devices) device_group[d] = g.group;
  }
  plan.partition_before = count_groups(current);

  std::map<GroupId, std::int64_t> load;
  std::map<Version, std::int64_t> live_kv;
  for (const auto& r : snap.live) {
    ++load[device_group.at(r.device)];
    ++live_kv[r.version];
  }

  // Step 2: proportional partition over the window.
  std::map<Version, std::int64_t> counts;
  std::int64_t total = 0;
  for (Version v : snap.window) {
    auto it = snap.active.find(v);
    counts[v] = it == snap.active.end() ? 0 : it->second;
    if (v == latest) counts[v] += plan.injected_latest * snap.group_size;
    total += counts[v];
  }
  const int n_groups = static_cast<int>(snap.groups.size());
  PartitionOptions opts{true, StarvationPolicy::drain_oldest};

  auto attempt = [&](const std::map<Version, std::int64_t>& c) {
    std::map<Version, int> part;
    std::int64_t sum = 0;
    for (const auto& [v, n] : c) sum += n;
    if (sum == 0) {
      part[latest] = n_groups;
    } else {
      part = compute_partition(c, n_groups, opts);
    }
    auto target = assign_groups(current, load, part);
    auto maps = generate_migrate_maps(snap.live, device_group, target, [&] {
      // free room once movers have left their source devices
      auto cap = snap.capacity;
      std::map<DeviceId, std::size_t> index;
      for (std::size_t i = 0; i < cap.size(); ++i) index[cap[i].device] = i;
      for (const auto& r : snap.live) {
        if (target.at(device_group.at(r.device)) == r.version) continue;
        auto& c2 = cap[index.at(r.device)];
        c2.free_slots += 1;
        c2.free_kv_tokens += r.kv_tokens;
      }
      return cap;
    }());
    return std::make_tuple(part, target, maps);
  };

  std::map<Version, int> part;
  std::map<GroupId, Version> target;
  MigrateMaps maps;
  try {
    std::tie(part, target, maps) = attempt(counts);
  } catch (const PlanRejected&) {
    // Retry with only the versions that hold KV caches on devices.
    std::map<Version, std::int64_t> kv_only;
    for (const auto& [v, n] : live_kv) kv_only[v] = n;
    if (kv_only.empty()) kv_only[latest] = 0;
    try {
      std::tie(part, target, maps) = attempt(kv_only);
    } catch (const PlanRejected&) {
      target = current;
      part = count_groups(current);
      maps = {};
    }
  }
  plan.target = target;
  plan.partition_after = count_groups(target);
  plan.flashed = generate_p2p_maps(current, target);
  plan.migrations = maps;

  // Step 4: legacy groups only get enough prompts to fill idle slots.
  std::map<DeviceId, DeviceCapacity> room;
  for (const auto& c : snap.capacity) room[c.device] = c;
  for (const auto& r : snap.live) {
    if (target.at(device_group.at(r.device)) != r.version) {
      room[r.device].free_slots += 1;
      room[r.device].free_kv_tokens += r.kv_tokens;
    }
  }
  for (const auto& m : plan.migrations.moves) {
    if (m.dst >= 0) room[m.dst].free_slots -= 1;
  }
  std::map<Version, std::int64_t> idle;
  for (const auto& [d, c] : room) idle[target.at(device_group.at(d))] += c.free_slots;
  // Allowances share the cumulative staleness budget, so every injection is
  // charged against the allowance of the versions planned after it.
  std::int64_t used = plan.injected_latest * snap.group_size;
  for (Version v : snap.window) {
    if (v == latest || !idle.count(v)) continue;
    auto pend = snap.pending.find(v);
    auto allow = snap.allowance.find(v);
    SupplementationInput legacy;
    legacy.group_size = snap.group_size;
    legacy.latest = latest;
    legacy.rbs_trajectories = 0;
    const std::int64_t budget =
        allow == snap.allowance.end() ? INT64_MAX : std::max<std::int64_t>(0, allow->second - used);
    legacy.legacy.push_back({v, idle[v] - (pend == snap.pending.end() ? 0 : pend->second), budget});
    const std::int64_t n = plan_supplementation(legacy)[v];
    if (n > 0) {
      plan.injected_legacy[v] = n;
      used += n * snap.group_size;
    }
  }
  return plan;
}

}  // namespace dorasim
