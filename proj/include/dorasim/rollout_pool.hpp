#pragma once

#include <deque>
#include <functional>
#include <map>
#include <set>
#include <vector>

#include "dorasim/cluster.hpp"
#include "dorasim/kvcache.hpp"
#include "dorasim/orchestrator.hpp"
#include "dorasim/simengine.hpp"
#include "dorasim/workload.hpp"

namespace dorasim {

enum class Phase : std::uint8_t { queued, lane, prefill, decode, moving, host, onloading, done };

struct PoolRequest {
  Request req;
  Version version = -1;  // tag used for the next placement
  Version seg_version = -1;  // version of the last started segment
  Version first_seg_version = -1;
  int n_versions = 0;        // distinct segment versions so far
  DeviceId device = -1;  // slot holder, or the device it was evicted from
  DeviceId origin = -1;
  Phase phase = Phase::queued;
  bool needs_reprefill = false;  // generated tokens whose KV was dropped
  double decode_start = 0;
  Tokens gen_at_start = 0;
  Tokens reserved = 0;  // KV tokens charged to the device outside decode
  EventId event = 0;
  bool has_event = false;
};

struct PoolDevice {
  DeviceId id = 0;
  GroupId group = 0;
  Version hosted = 0;
  bool paused = false;
  int free_slots = 0;
  std::set<RequestId> residents;
  std::deque<RequestId> lane;
  bool lane_busy = false;
  // KV(t) = static_kv + (n_decoding * t - sum_start) / tpot
  Tokens static_kv = 0;
  std::int64_t n_decoding = 0;
  double sum_start = 0;
  EventId pressure_event = 0;  // predicted threshold crossing during decode
  bool has_pressure_event = false;
};

/// Slots, prefill lanes and analytic decode for a set of rollout devices.
/// Requests are tagged with a version and only run on devices hosting it.
class RolloutPool {
 public:
  RolloutPool(Engine& engine, const ModelProfile& model, const NetworkProfile& net,
              const WorkloadStream& workload, int slots, Tokens kv_capacity,
              const std::vector<std::pair<DeviceId, GroupId>>& devices);

  void on_complete(std::function<void(PoolRequest&)> f) { on_complete_ = std::move(f); }
  /// Called when a device crosses `threshold` of its KV capacity, either on
  /// admission or while its residents decode.
  void on_kv_pressure(double threshold, std::function<void(DeviceId)> f) {
    pressure_threshold_ = threshold;
    on_pressure_ = std::move(f);
  }

  /// Creates the G requests of prompt `p`, tags them with `v` and queues them.
  void submit_prompt(PromptId p, Version v);
  /// Places queued requests on free slots (most free slots first).
  void fill();
  void fill_device(DeviceId d);

  PoolRequest& request(RequestId r) { return requests_.at(static_cast<std::size_t>(r)); }
  const PoolRequest& request(RequestId r) const { return requests_.at(static_cast<std::size_t>(r)); }
  bool known(RequestId r) const { return r >= 0 && static_cast<std::size_t>(r) < requests_.size(); }
  PoolDevice& device(DeviceId d) { return devices_.at(index_.at(d)); }
  const std::vector<PoolDevice>& devices() const { return devices_; }

  void set_hosted(DeviceId d, Version v) { device(d).hosted = v; }
  /// Unpausing refills the device.
  void set_paused(DeviceId d, bool paused);

  /// Lane or prefill request goes back to the front of its queue.
  void requeue(RequestId r);
  /// Ends the current decode segment; the KV cache is dropped, so the next
  /// admission re-prefills input + generated tokens. The request is not
  /// queued; see resubmit.
  void cut_segment(RequestId r);
  /// Queues a cut request under version `v` (a new segment version).
  void resubmit(RequestId r, Version v);
  /// Retags every queued request of version `from`.
  void move_queue(Version from, Version to);
  /// Moves a decoding request to `dst` (same version) after `delay`; the
  /// destination slot is reserved now. Returns the transfer duration.
  double migrate(RequestId r, DeviceId dst, double delay);
  /// Offloads a decoding request to host after `delay`; it resumes from the
  /// host tier on the next free slot of its version. Returns the duration.
  double park(RequestId r, double delay);
  void abort(RequestId r);

  /// Requests holding KV on devices (decoding), with their current size.
  std::vector<LiveRequest> live() const;
  std::vector<DeviceCapacity> capacity() const;
  Tokens device_kv(const PoolDevice& d) const;
  Tokens kv_of(const PoolRequest& r) const;
  Tokens generated_now(const PoolRequest& r) const;

  std::int64_t queued(Version v) const;
  std::int64_t queued_total() const { return queued_total_; }
  std::int64_t active() const { return active_; }  // slot holders + moving + host
  std::vector<RequestId> queued_ids(Version v) const;
  /// Every request not yet complete or discarded.
  std::vector<RequestId> unfinished() const;

  KvStats& stats() { return stats_; }
  Tokens kv_capacity() const { return kv_capacity_; }
  int slots() const { return slots_; }

 private:
  struct Queues {
    std::deque<RequestId> resume, pending;
  };

  void admit(PoolDevice& d, RequestId r);
  void kick_lane(PoolDevice& d);
  void begin_decode(PoolDevice& d, PoolRequest& r);
  void stop_decode(PoolDevice& d, PoolRequest& r);
  void release_slot(PoolDevice& d, PoolRequest& r);
  void check_overflow(PoolDevice& d);
  void watch_pressure(PoolDevice& d);
  void finish(RequestId r);
  void note_version(PoolRequest& r, Version v);
  void cancel_event(PoolRequest& r);
  std::optional<RequestId> pop_queue(Version v);

  Engine& engine_;
  ModelProfile model_;
  NetworkProfile net_;
  const WorkloadStream& workload_;
  int slots_;
  Tokens kv_capacity_;
  std::vector<PoolDevice> devices_;
  std::map<DeviceId, std::size_t> index_;
  std::vector<PoolRequest> requests_;
  std::map<Version, Queues> queues_;
  std::int64_t queued_total_ = 0;
  std::int64_t active_ = 0;
  std::function<void(PoolRequest&)> on_complete_;
  std::function<void(DeviceId)> on_pressure_;
  double pressure_threshold_ = 2.0;
  KvStats stats_;
};

}  // namespace dorasim
