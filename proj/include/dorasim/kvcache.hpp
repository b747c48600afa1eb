#pragma once

#include <optional>
#include <span>
#include <vector>

#include "dorasim/cluster.hpp"

namespace dorasim {

struct CacheLocation {
  bool on_host = false;
  DeviceId device = -1;  // meaningful when !on_host
};

struct CacheEntry {
  RequestId request_id = 0;
  Tokens resident_tokens = 0;
  CacheLocation location;
  Version version = 0;
};

/// Running totals reported per step.
struct KvStats {
  Bytes bytes_migrated = 0;
  Bytes bytes_offloaded = 0;
  Tokens reprefill_tokens = 0;
  std::int64_t migrations = 0;
  std::int64_t offloads = 0;
  double peak_utilization = 0;
};

/// Two-phase move (metadata RPC, then KV payload) between instances that host
/// the same version. Same-device reassignment is free. A destination hosting
/// another version throws ProtocolViolation.
double migrate_with_reuse(const CacheEntry& entry, DeviceId src, DeviceId dst, Version dst_version,
                          const ModelProfile& profile, const NetworkProfile& net,
                          KvStats* stats = nullptr);

/// Rebuilds the cache from scratch on the destination: prefill over
/// input + generated tokens, all counted as re-prefill.
double migrate_with_reprefill(const CacheEntry& entry, const ModelProfile& profile,
                              KvStats* stats = nullptr);

/// Device <-> host over the PCIe tier.
double offload_to_host(CacheEntry& entry, const ModelProfile& profile, const NetworkProfile& net,
                       KvStats* stats = nullptr);
/// Throws PreconditionError when `free_device_tokens` cannot hold the entry.
double onload(CacheEntry& entry, DeviceId device, Tokens free_device_tokens,
              const ModelProfile& profile, const NetworkProfile& net);

/// Entries to move to host, in eviction order, so that the device's resident
/// tokens plus `incoming_tokens` fit in `capacity_tokens`. Largest entry
/// first; ties go to the lower request id.
std::vector<RequestId> plan_offload(std::span<const CacheEntry> device_entries, Tokens capacity_tokens,
                                    Tokens incoming_tokens = 0);

}  // namespace dorasim
