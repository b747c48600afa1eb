#include "dorasim/transfer_queue.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "dorasim/errors.hpp"

namespace dorasim {

std::string AdvanceResult::reason() const {
  if (advanced) return "advanced";
  return fmt::format("blocked: version {} has {} pending, {} in-flight, {} queued", oldest,
                     residual.pending, residual.inflight, residual.queued);
}

VersionWindow::VersionWindow(int k, Version initial) : k_(k) {
  if (k < 1) throw ConfigError(fmt::format("staleness bound K must be >= 1, got {}", k));
  versions_.push_back(initial);
  counts_[initial] = {};
}

std::vector<Version> VersionWindow::versions() const {
  return {versions_.rbegin(), versions_.rend()};
}

const VersionCounts& VersionWindow::counts(Version v) const {
  auto it = counts_.find(v);
  if (it == counts_.end()) {
    throw ProtocolViolation(fmt::format("version {} is outside window [{}, {}]", v, oldest(), newest()));
  }
  return it->second;
}

VersionCounts& VersionWindow::counts_mut(Version v) {
  return const_cast<VersionCounts&>(std::as_const(*this).counts(v));
}

AdvanceResult VersionWindow::advance(Version new_version) {
  if (new_version != newest() + 1) {
    throw ProtocolViolation(
        fmt::format("window advance to {} is not consecutive with newest {}", new_version, newest()));
  }
  AdvanceResult res;
  res.oldest = oldest();
  if (static_cast<int>(versions_.size()) == k_) {
    const auto& c = counts_.at(oldest());
    if (c.outstanding() != 0) {
      res.residual = c;
      return res;
    }
    counts_.erase(oldest());
    versions_.pop_front();
  }
  versions_.push_back(new_version);
  counts_[new_version] = {};
  res.advanced = true;
  return res;
}

Tokens TrainBatch::total_tokens() const {
  Tokens t = 0;
  for (const auto& m : members) t += m.input_tokens + m.output_tokens;
  return t;
}

TransferQueue::TransferQueue(int k, int group_size, Version initial)
    : window_(k, initial), group_size_(group_size) {
  if (group_size < 1) throw ConfigError("group size must be >= 1");
}

void TransferQueue::on_dispatch(Version v, std::int64_t n) {
  if (!window_.contains(v)) {
    throw ProtocolViolation(fmt::format("dispatch tagged with version {} outside window", v));
  }
  window_.counts_mut(v).pending += n;
}

void TransferQueue::on_start(Version v) {
  auto& c = window_.counts_mut(v);
  if (c.pending <= 0) throw ProtocolViolation(fmt::format("version {} has nothing pending", v));
  --c.pending;
  ++c.inflight;
}

void TransferQueue::on_requeue(Version v) {
  auto& c = window_.counts_mut(v);
  if (c.inflight <= 0) throw ProtocolViolation(fmt::format("version {} has nothing in flight", v));
  --c.inflight;
  ++c.pending;
}

void TransferQueue::push_trajectory(const TrajectoryRecord& traj) {
  if (!window_.contains(traj.behavior_version)) {
    throw ProtocolViolation(fmt::format(
        "trajectory {} carries version {} which left the window [{}, {}] before drain",
        traj.request_id, traj.behavior_version, window_.oldest(), window_.newest()));
  }
  auto& c = window_.counts_mut(traj.behavior_version);
  if (c.inflight <= 0) {
    throw ProtocolViolation(fmt::format("trajectory {} pushed but version {} has none in flight",
                                        traj.request_id, traj.behavior_version));
  }
  --c.inflight;
  ++c.queued;
  ++pushed_;

  auto& g = partial_[traj.prompt_id];
  if (g.members.empty() || traj.behavior_version < g.min_version) {
    g.min_version = traj.behavior_version;
  }
  g.members.push_back(traj);
  if (static_cast<int>(g.members.size()) == group_size_) {
    ready_.emplace(ReadyKey{g.min_version, group_seq_++}, std::move(g.members));
    partial_.erase(traj.prompt_id);
  }
}

std::vector<TransferQueue::ReadyKey> TransferQueue::take_oldest(std::int64_t n_groups) const {
  std::vector<ReadyKey> keys;
  for (auto it = ready_.begin(); it != ready_.end() && static_cast<std::int64_t>(keys.size()) < n_groups;
       ++it) {
    keys.push_back(it->first);
  }
  return keys;
}

TrainBatch TransferQueue::build(const std::vector<ReadyKey>& keys) {
  TrainBatch batch;
  batch.step = batches_formed_;
  batch.trainer_version = batches_formed_;
  for (const auto& key : keys) {
    auto node = ready_.extract(key);
    batch.group_offsets.push_back(batch.members.size());
    for (auto& m : node.mapped()) {
      window_.counts_mut(m.behavior_version).queued -= 1;
      batch.members.push_back(std::move(m));
    }
  }
  consumed_ += static_cast<std::int64_t>(batch.members.size());
  ++batches_formed_;
  return batch;
}

std::optional<TrainBatch> TransferQueue::try_form_batch(std::int64_t tbs) {
  if (tbs <= 0 || tbs % group_size_ != 0) {
    throw PreconditionError(fmt::format("tbs {} must be a positive multiple of G={}", tbs, group_size_));
  }
  const std::int64_t n_groups = tbs / group_size_;
  if (static_cast<std::int64_t>(ready_.size()) < n_groups) return std::nullopt;
  return build(take_oldest(n_groups));
}

std::optional<TrainBatch> TransferQueue::try_form_batch_bounded(std::int64_t tbs) {
  if (tbs <= 0 || tbs % group_size_ != 0) {
    throw PreconditionError(fmt::format("tbs {} must be a positive multiple of G={}", tbs, group_size_));
  }
  const std::int64_t n_groups = tbs / group_size_;
  if (static_cast<std::int64_t>(ready_.size()) < n_groups) return std::nullopt;
  auto keys = take_oldest(n_groups);

  const Version trainer = batches_formed_;
  const int k = window_.k();
  std::map<Version, std::int64_t> taken;
  for (const auto& key : keys) {
    for (const auto& m : ready_.at(key)) {
      if (trainer - m.behavior_version > k) {
        throw ProtocolViolation(fmt::format("trajectory {} (version {}) too stale for trainer {}",
                                            m.request_id, m.behavior_version, trainer));
      }
      ++taken[m.behavior_version];
    }
  }
  // After this batch the trainer moves to trainer+1; whatever of versions
  // <= u is left must fit in the batches still able to consume it.
  std::int64_t cum = 0, cum_taken = 0;
  for (Version u = window_.oldest(); u <= window_.newest(); ++u) {
    cum += window_.counts(u).outstanding();
    if (auto it = taken.find(u); it != taken.end()) cum_taken += it->second;
    const std::int64_t capacity = std::max<std::int64_t>(0, u + k - trainer) * tbs;
    if (cum - cum_taken > capacity) return std::nullopt;
  }
  return build(keys);
}

std::int64_t TransferQueue::dispatch_allowance(Version v, std::int64_t tbs) const {
  if (!window_.contains(v)) return 0;
  const Version next = batches_formed_;
  const int k = window_.k();
  std::int64_t cum = 0;
  std::int64_t allowance = INT64_MAX;
  for (Version u = window_.oldest(); u <= window_.newest(); ++u) {
    cum += window_.counts(u).outstanding();
    if (u < v) continue;
    const std::int64_t capacity = std::max<std::int64_t>(0, u + k - next + 1) * tbs;
    allowance = std::min(allowance, capacity - cum);
  }
  return std::max<std::int64_t>(0, allowance);
}

QueueSnapshot TransferQueue::snapshot() const {
  QueueSnapshot s;
  s.oldest = window_.oldest();
  s.newest = window_.newest();
  s.depth = depth();
  for (Version v = s.oldest; v <= s.newest; ++v) {
    s.pending += window_.counts(v).pending;
    s.inflight += window_.counts(v).inflight;
  }
  s.complete_groups = complete_groups();
  return s;
}

}  // namespace dorasim
