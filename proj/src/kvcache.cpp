#include "dorasim/kvcache.hpp"

#include <algorithm>
#include <numeric>

#include <fmt/format.h>

#include "dorasim/errors.hpp"

namespace dorasim {

double migrate_with_reuse(const CacheEntry& entry, DeviceId src, DeviceId dst, Version dst_version,
                          const ModelProfile& profile, const NetworkProfile& net, KvStats* stats) {
  if (dst_version != entry.version) {
    throw ProtocolViolation(fmt::format(
        "request {}: KV cache of version {} cannot move to an instance hosting version {}",
        entry.request_id, entry.version, dst_version));
  }
  if (src == dst) return 0.0;
  const Bytes payload = kv_bytes(entry.resident_tokens, profile);
  if (stats) {
    stats->bytes_migrated += payload;
    ++stats->migrations;
  }
  return transfer_time(net.metadata_bytes, net.bandwidth, net.latency) +
         transfer_time(payload, net.bandwidth, net.latency);
}

double migrate_with_reprefill(const CacheEntry& entry, const ModelProfile& profile, KvStats* stats) {
  if (stats) stats->reprefill_tokens += entry.resident_tokens;
  return prefill_time(entry.resident_tokens, profile);
}

double offload_to_host(CacheEntry& entry, const ModelProfile& profile, const NetworkProfile& net,
                       KvStats* stats) {
  if (entry.location.on_host) {
    throw PreconditionError(fmt::format("request {} already on host", entry.request_id));
  }
  const Bytes payload = kv_bytes(entry.resident_tokens, profile);
  entry.location = CacheLocation{true, -1};
  if (stats) {
    stats->bytes_offloaded += payload;
    ++stats->offloads;
  }
  return transfer_time(payload, net.pcie_bandwidth, net.pcie_latency);
}

double onload(CacheEntry& entry, DeviceId device, Tokens free_device_tokens,
              const ModelProfile& profile, const NetworkProfile& net) {
  if (!entry.location.on_host) {
    throw PreconditionError(fmt::format("request {} is not on host", entry.request_id));
  }
  if (entry.resident_tokens > free_device_tokens) {
    throw PreconditionError(fmt::format("request {} needs {} KV tokens, device {} has {}",
                                        entry.request_id, entry.resident_tokens, device,
                                        free_device_tokens));
  }
  entry.location = CacheLocation{false, device};
  return transfer_time(kv_bytes(entry.resident_tokens, profile), net.pcie_bandwidth,
                       net.pcie_latency);
}

std::vector<RequestId> plan_offload(std::span<const CacheEntry> device_entries,
                                    Tokens capacity_tokens, Tokens incoming_tokens) {
  Tokens resident = incoming_tokens;
  for (const auto& e : device_entries) {
    if (!e.location.on_host) resident += e.resident_tokens;
  }
  std::vector<const CacheEntry*> order;
  for (const auto& e : device_entries) {
    if (!e.location.on_host) order.push_back(&e);
  }
  std::sort(order.begin(), order.end(), [](const CacheEntry* a, const CacheEntry* b) {
    return a->resident_tokens != b->resident_tokens ? a->resident_tokens > b->resident_tokens
                                                    : a->request_id < b->request_id;
  });
  std::vector<RequestId> victims;
  for (const auto* e : order) {
    if (resident <= capacity_tokens) break;
    victims.push_back(e->request_id);
    resident -= e->resident_tokens;
  }
  return victims;
}

}  // namespace dorasim
