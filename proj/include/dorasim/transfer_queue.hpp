#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dorasim/workload.hpp"

namespace dorasim {

struct VersionCounts {
  std::int64_t pending = 0;   // tagged, waiting for a slot
  std::int64_t inflight = 0;  // on a device, migrating, or offloaded
  std::int64_t queued = 0;    // complete, waiting in the queue

  std::int64_t active() const { return pending + inflight; }
  std::int64_t outstanding() const { return pending + inflight + queued; }
};

struct AdvanceResult {
  bool advanced = false;
  Version oldest = 0;  // oldest version at the time of the attempt
  VersionCounts residual;  // oldest version's counts when blocked
  std::string reason() const;
};

/// Sliding window of at most K consecutive active versions with per-version
/// request accounting.
class VersionWindow {
 public:
  explicit VersionWindow(int k, Version initial = 0);

  int k() const { return k_; }
  Version newest() const { return versions_.back(); }
  Version oldest() const { return versions_.front(); }
  std::size_t size() const { return versions_.size(); }
  bool contains(Version v) const { return v >= oldest() && v <= newest(); }
  /// Newest first.
  std::vector<Version> versions() const;

  const VersionCounts& counts(Version v) const;
  VersionCounts& counts_mut(Version v);

  /// Appends `new_version` if |W| < K, otherwise only after the oldest
  /// version has nothing pending, in flight, or queued. Non-consecutive
  /// versions throw ProtocolViolation.
  AdvanceResult advance(Version new_version);

 private:
  int k_;
  std::deque<Version> versions_;  // oldest .. newest
  std::map<Version, VersionCounts> counts_;
};

struct TrajectoryRecord {
  RequestId request_id = 0;
  PromptId prompt_id = 0;
  Version behavior_version = 0;
  Tokens input_tokens = 0;
  Tokens output_tokens = 0;
  double reward = 0;
  double completed_at = 0;
};

struct TrainBatch {
  std::int64_t step = 0;
  Version trainer_version = 0;
  std::vector<TrajectoryRecord> members;
  std::vector<std::size_t> group_offsets;  // start index of each prompt group in `members`

  Tokens total_tokens() const;
};

struct QueueSnapshot {
  Version oldest = 0, newest = 0;
  std::int64_t depth = 0;  // queued trajectories
  std::int64_t pending = 0, inflight = 0;
  std::int64_t complete_groups = 0;
};

/// Completed-trajectory queue with group-atomic batch formation and the
/// version window that bounds staleness. All operations are atomic with
/// respect to each other.
class TransferQueue {
 public:
  TransferQueue(int k, int group_size, Version initial = 0);

  VersionWindow& window() { return window_; }
  const VersionWindow& window() const { return window_; }
  int group_size() const { return group_size_; }

  void on_dispatch(Version v, std::int64_t n = 1);
  void on_start(Version v);
  void on_requeue(Version v);

  /// `traj.behavior_version` must be inside the window; an evicted version
  /// means the window advanced before drain (ProtocolViolation).
  void push_trajectory(const TrajectoryRecord& traj);

  /// Oldest-first complete groups totalling exactly `tbs` trajectories, or
  /// nothing when not enough complete groups are queued.
  std::optional<TrainBatch> try_form_batch(std::int64_t tbs);

  /// Like try_form_batch, but refuses any batch after which some still
  /// outstanding trajectory could no longer be trained within K versions of
  /// its behavior policy. The next batch is trained at version
  /// batches_formed().
  std::optional<TrainBatch> try_form_batch_bounded(std::int64_t tbs);

  /// Largest number of trajectories that may still be tagged with `v`
  /// without making the staleness bound unattainable, given batches of
  /// `tbs` trajectories.
  std::int64_t dispatch_allowance(Version v, std::int64_t tbs) const;

  AdvanceResult advance_window(Version new_version) { return window_.advance(new_version); }

  std::int64_t batches_formed() const { return batches_formed_; }
  std::int64_t pushed() const { return pushed_; }
  std::int64_t consumed() const { return consumed_; }
  std::int64_t depth() const { return pushed_ - consumed_; }
  std::int64_t complete_groups() const { return static_cast<std::int64_t>(ready_.size()); }
  QueueSnapshot snapshot() const;

 private:
  struct ReadyKey {
    Version version;
    std::uint64_t seq;
    auto operator<=>(const ReadyKey&) const = default;
  };
  struct PartialGroup {
    std::vector<TrajectoryRecord> members;
    Version min_version = 0;
  };

  std::vector<ReadyKey> take_oldest(std::int64_t n_groups) const;
  TrainBatch build(const std::vector<ReadyKey>& keys);

  VersionWindow window_;
  int group_size_;
  std::map<PromptId, PartialGroup> partial_;
  std::map<ReadyKey, std::vector<TrajectoryRecord>> ready_;
  std::uint64_t group_seq_ = 0;
  std::int64_t batches_formed_ = 0;
  std::int64_t pushed_ = 0;
  std::int64_t consumed_ = 0;
};

}  // namespace dorasim
