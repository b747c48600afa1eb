#pragma once

#include <cstdint>
#include <vector>

#include "dorasim/workload.hpp"

namespace dorasim {

using DeviceId = int;
using GroupId = int;
using Bytes = double;

/// Training step cost: fixed seconds plus device-seconds per million trained
/// tokens, spread across the devices that run the trainer.
struct TrainTimeModel {
  double fixed_seconds = 0;
  double device_seconds_per_mtoken = 0;

  double step_time(Tokens trained_tokens, int train_devices) const;
};

struct ModelProfile {
  int layers = 32;
  int kv_heads = 8;
  int head_dim = 128;
  int dtype_bytes = 2;
  double prefill_a0 = 0;     // s
  double prefill_a1 = 1e-4;  // s / token
  double prefill_a2 = 0;     // s / token^2
  double tpot = 0.05;        // s / output token
  double prefill_inflation = 1;
  double weight_sync_time = 0;  // s per flash
  TrainTimeModel train;

  void validate() const;
};

struct NetworkProfile {
  double bandwidth = 50e9;  // bytes/s, inter-instance KV transfer
  double latency = 1e-3;
  double pcie_bandwidth = 25e9;  // host offload tier
  double pcie_latency = 1e-4;
  Bytes metadata_bytes = 1024;

  void validate() const;
};

/// Raises PreconditionError for tokens < 1.
double prefill_time(Tokens tokens, const ModelProfile& profile);
double decode_time(Tokens tokens, const ModelProfile& profile);
Bytes kv_bytes(Tokens tokens, const ModelProfile& profile);
double transfer_time(Bytes bytes, double bandwidth_bytes_per_s, double latency_s);

struct Device {
  DeviceId device_id = 0;
  GroupId dp_group_id = 0;
  int slots = 1;
  Tokens kv_capacity_tokens = 0;
  Tokens resident_kv_tokens = 0;
  std::vector<RequestId> active;
};

struct DpGroup {
  GroupId dp_group_id = 0;
  std::vector<DeviceId> device_ids;
  Version hosted_version = 0;
};

struct ClusterTopology {
  int n_devices = 8;
  int devices_per_group = 1;
  int slots = 16;
  Tokens kv_capacity_tokens = 1'000'000;

  void validate() const;
  int n_groups() const { return n_devices / devices_per_group; }
};

/// Builds `n_devices` devices grouped consecutively into DP groups.
std::vector<DpGroup> make_groups(int n_devices, int devices_per_group, DeviceId first_device = 0);

}  // namespace dorasim
