#include "dorasim/cluster.hpp"

#include <cmath>

#include <fmt/format.h>

#include "dorasim/errors.hpp"

namespace dorasim {

double TrainTimeModel::step_time(Tokens trained_tokens, int train_devices) const {
  if (train_devices < 1) throw PreconditionError("training needs at least one device");
  return fixed_seconds +
         device_seconds_per_mtoken * (static_cast<double>(trained_tokens) / 1e6) / train_devices;
}

void ModelProfile::validate() const {
  if (layers < 1 || kv_heads < 1 || head_dim < 1 || dtype_bytes < 1) {
    throw ConfigError("model shape fields must be >= 1");
  }
  if (!(tpot > 0)) throw ConfigError(fmt::format("tpot must be > 0, got {}", tpot));
  if (prefill_a0 < 0 || prefill_a1 < 0 || prefill_a2 < 0) {
    throw ConfigError("prefill coefficients must be >= 0");
  }
  if (!(prefill_inflation >= 1)) throw ConfigError("prefill_inflation must be >= 1");
  if (weight_sync_time < 0) throw ConfigError("weight_sync_time must be >= 0");
  if (train.fixed_seconds < 0 || train.device_seconds_per_mtoken < 0) {
    throw ConfigError("train time model must be nonnegative");
  }
}

void NetworkProfile::validate() const {
  if (!(bandwidth > 0) || !(pcie_bandwidth > 0)) throw ConfigError("bandwidths must be > 0");
  if (latency < 0 || pcie_latency < 0 || metadata_bytes < 0) {
    throw ConfigError("latencies and metadata size must be >= 0");
  }
}

void ClusterTopology::validate() const {
  if (n_devices < 1) throw ConfigError("n_devices must be >= 1");
  if (devices_per_group < 1 || n_devices % devices_per_group != 0) {
    throw ConfigError(fmt::format("devices_per_group {} must divide n_devices {}",
                                  devices_per_group, n_devices));
  }
  if (slots < 1) throw ConfigError("slots must be >= 1");
  if (kv_capacity_tokens < 1) throw ConfigError("kv_capacity_tokens must be >= 1");
}

double prefill_time(Tokens tokens, const ModelProfile& profile) {
  if (tokens < 1) throw PreconditionError(fmt::format("prefill of {} tokens", tokens));
  const auto t = static_cast<double>(tokens);
  return profile.prefill_inflation *
         (profile.prefill_a0 + profile.prefill_a1 * t + profile.prefill_a2 * t * t);
}

double decode_time(Tokens tokens, const ModelProfile& profile) {
  if (tokens < 0) throw PreconditionError("negative decode length");
  return profile.tpot * static_cast<double>(tokens);
}

Bytes kv_bytes(Tokens tokens, const ModelProfile& profile) {
  return 2.0 * profile.layers * profile.kv_heads * profile.head_dim * profile.dtype_bytes *
         static_cast<double>(tokens);
}

double transfer_time(Bytes bytes, double bandwidth_bytes_per_s, double latency_s) {
  if (bytes < 0 || !(bandwidth_bytes_per_s > 0)) {
    throw PreconditionError("transfer needs bytes >= 0 and bandwidth > 0");
  }
  return latency_s + bytes / bandwidth_bytes_per_s;
}

std::vector<DpGroup> make_groups(int n_devices, int devices_per_group, DeviceId first_device) {
  std::vector<DpGroup> groups;
  for (int g = 0; g * devices_per_group < n_devices; ++g) {
    DpGroup group{g, {}, 0};
    for (int d = 0; d < devices_per_group; ++d) {
      group.device_ids.push_back(first_device + g * devices_per_group + d);
    }
    groups.push_back(std::move(group));
  }
  return groups;
}

}  // namespace dorasim
