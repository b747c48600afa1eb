#include "dorasim/paradigms.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <set>

#include <fmt/format.h>

#include "dorasim/errors.hpp"
#include "dorasim/rollout_pool.hpp"
#include "dorasim/transfer_queue.hpp"

namespace dorasim {

const char* to_string(ParadigmKind k) {
  switch (k) {
    case ParadigmKind::synchronous: return "synchronous";
    case ParadigmKind::one_step_off_policy: return "one_step_off_policy";
    case ParadigmKind::partial_rollout: return "partial_rollout";
    case ParadigmKind::dora: return "dora";
    case ParadigmKind::replication: return "replication";
  }
  return "?";
}

std::optional<ParadigmKind> paradigm_from_string(std::string_view s) {
  if (s == "synchronous" || s == "sync") return ParadigmKind::synchronous;
  if (s == "one_step_off_policy" || s == "one_step_off") return ParadigmKind::one_step_off_policy;
  if (s == "partial_rollout" || s == "partial") return ParadigmKind::partial_rollout;
  if (s == "dora") return ParadigmKind::dora;
  if (s == "replication") return ParadigmKind::replication;
  return std::nullopt;
}

bool SimConfig::disaggregated() const {
  return paradigm.kind == ParadigmKind::one_step_off_policy || paradigm.kind == ParadigmKind::dora;
}

int SimConfig::train_devices() const {
  if (!disaggregated()) return cluster.n_devices;
  return std::max(1, static_cast<int>(std::lround(cluster.n_devices * train_fraction)));
}

void SimConfig::validate() const {
  cluster.validate();
  model.validate();
  network.validate();
  orchestrator.triggers.validate();
  workload.input.validate();
  workload.output.validate();
  if (workload.group_size < 1) throw ConfigError("workload.group_size must be >= 1");
  if (!(workload.reward.success_prob >= 0 && workload.reward.success_prob <= 1)) {
    throw ConfigError("workload.reward_success must lie in [0, 1]");
  }
  const auto& p = paradigm;
  if (p.tbs_prompts < 1) throw ConfigError("paradigm.tbs_prompts must be >= 1");
  if (p.staleness_k < 1) throw ConfigError("paradigm.staleness_k must be >= 1");
  if (p.segment_tokens < 1) throw ConfigError("paradigm.segment_tokens must be >= 1");
  if (p.kind == ParadigmKind::dora || p.kind == ParadigmKind::partial_rollout) {
    if (p.rbs_prompts < p.tbs_prompts) {
      throw ConfigError(fmt::format("paradigm.rbs_prompts ({}) must be >= tbs_prompts ({})",
                                    p.rbs_prompts, p.tbs_prompts));
    }
  }
  if (p.kind == ParadigmKind::replication && !(p.oversample_factor >= 1)) {
    throw ConfigError("paradigm.oversample_factor must be >= 1");
  }
  if (orchestrator.planner_base_seconds < 0 || orchestrator.planner_seconds_per_group < 0) {
    throw ConfigError("orchestrator planner costs must be >= 0");
  }
  if (stop.n_steps < 1) throw ConfigError("stop.n_steps must be >= 1");
  if (!(stop.max_time > 0)) throw ConfigError("stop.max_time must be > 0");
  if (stop.warmup_steps < 0) throw ConfigError("stop.warmup_steps must be >= 0");
  if (disaggregated()) {
    if (!(train_fraction > 0 && train_fraction < 1)) {
      throw ConfigError("train_fraction must lie in (0, 1)");
    }
    const int rollout = cluster.n_devices - train_devices();
    if (rollout < 1) throw ConfigError("train_fraction leaves no rollout devices");
    if (rollout % cluster.devices_per_group != 0) {
      throw ConfigError(fmt::format("{} rollout devices are not a multiple of devices_per_group {}",
                                    rollout, cluster.devices_per_group));
    }
    if (p.kind == ParadigmKind::dora && rollout / cluster.devices_per_group < p.staleness_k) {
      throw ConfigError(fmt::format("dora needs at least staleness_k={} rollout DP groups, have {}",
                                    p.staleness_k, rollout / cluster.devices_per_group));
    }
  }
}

namespace {

using Group = std::vector<TrajectoryRecord>;

TrajectoryRecord to_record(const PoolRequest& r) {
  TrajectoryRecord t;
  t.request_id = r.req.request_id;
  t.prompt_id = r.req.prompt_id;
  t.behavior_version = r.first_seg_version >= 0 ? r.first_seg_version : r.version;
  t.input_tokens = r.req.input_tokens;
  t.output_tokens = r.req.true_output_tokens;
  t.reward = r.req.reward;
  t.completed_at = r.req.completed_at;
  return t;
}

/// Completed trajectories grouped by prompt; complete groups in completion order.
struct GroupCollector {
  int g = 1;
  std::map<PromptId, Group> partial;
  std::deque<Group> ready;

  void push(const TrajectoryRecord& t) {
    auto& grp = partial[t.prompt_id];
    grp.push_back(t);
    if (static_cast<int>(grp.size()) == g) {
      ready.push_back(std::move(grp));
      partial.erase(t.prompt_id);
    }
  }
  std::vector<Group> take(std::size_t n) {
    std::vector<Group> out;
    for (std::size_t i = 0; i < n && !ready.empty(); ++i) {
      out.push_back(std::move(ready.front()));
      ready.pop_front();
    }
    return out;
  }
};

class Base {
 public:
  explicit Base(const SimConfig& cfg)
      : cfg_(cfg),
        stream_(cfg.seed, cfg.workload.group_size, cfg.workload.input, cfg.workload.output,
                cfg.workload.reward) {
    cfg.validate();
  }

 protected:
  void header(int train_devices, int k) {
    engine_.trace()
        .emit(0, TraceKind::run_header)
        .set(Field::paradigm, static_cast<double>(cfg_.paradigm.kind))
        .set(Field::g, cfg_.workload.group_size)
        .set(Field::k, k)
        .set(Field::tbs, static_cast<double>(cfg_.tbs_trajectories()))
        .set(Field::devices, cfg_.cluster.n_devices)
        .set(Field::train_devices, train_devices)
        .set(Field::slots, cfg_.cluster.slots)
        .set(Field::seed, static_cast<double>(cfg_.seed));
  }

  static std::vector<std::pair<DeviceId, GroupId>> device_list(int n, int per_group) {
    std::vector<std::pair<DeviceId, GroupId>> out;
    for (int d = 0; d < n; ++d) out.emplace_back(d, d / per_group);
    return out;
  }

  /// Emits the batch and its trained members, then runs the trainer.
  void train(const std::vector<Group>& groups, Version trainer_version, int devices,
             std::function<void()> done) {
    if (train_busy_) throw ProtocolViolation("trainer started while busy");
    Tokens tokens = 0;
    std::int64_t n = 0;
    for (const auto& g : groups) {
      for (const auto& m : g) {
        tokens += m.input_tokens + m.output_tokens;
        ++n;
      }
    }
    auto& trace = engine_.trace();
    const double now = engine_.now();
    trace.emit(now, TraceKind::batch_ready)
        .set(Field::step, static_cast<double>(train_step_))
        .set(Field::n, static_cast<double>(n))
        .set(Field::tokens, static_cast<double>(tokens));
    for (const auto& g : groups) {
      for (const auto& m : g) {
        if (m.behavior_version > trainer_version) {
          throw ProtocolViolation(fmt::format("trajectory {} is newer than the trainer", m.request_id));
        }
        trace.emit(now, TraceKind::trained)
            .set(Field::req, static_cast<double>(m.request_id))
            .set(Field::prompt, static_cast<double>(m.prompt_id))
            .set(Field::ver, static_cast<double>(m.behavior_version))
            .set(Field::tver, static_cast<double>(trainer_version))
            .set(Field::step, static_cast<double>(train_step_))
            .set(Field::in, static_cast<double>(m.input_tokens))
            .set(Field::out, static_cast<double>(m.output_tokens));
      }
    }
    const double dur = cfg_.model.train.step_time(tokens, devices);
    trace.emit(now, TraceKind::train_start)
        .set(Field::step, static_cast<double>(train_step_))
        .set(Field::tver, static_cast<double>(trainer_version))
        .set(Field::dur, dur)
        .set(Field::train_devices, devices);
    train_busy_ = true;
    engine_.schedule_in(dur, TraceKind::train_done, [this, done = std::move(done)] {
      train_busy_ = false;
      engine_.trace()
          .emit(engine_.now(), TraceKind::train_done)
          .set(Field::step, static_cast<double>(train_step_))
          .set(Field::ver, static_cast<double>(train_step_ + 1));
      ++train_step_;
      done();
    });
  }

  bool finished() const { return train_step_ >= cfg_.stop.n_steps; }

  SimulationResult run(RolloutPool& pool, std::function<std::string()> extra = {}) {
    engine_.set_deadlock_reporter([this, &pool, extra] {
      std::string msg = fmt::format("step {}, trainer {}; ", train_step_, train_busy_ ? "busy" : "idle");
      if (extra) msg += extra();
      auto stuck = pool.unfinished();
      msg += fmt::format("{} unfinished requests", stuck.size());
      for (std::size_t i = 0; i < std::min<std::size_t>(stuck.size(), 16); ++i) {
        const auto& r = pool.request(stuck[i]);
        msg += fmt::format("{} {}(v{} {} gen {}/{})", i == 0 ? ":" : ",", r.req.request_id, r.version,
                           to_string(r.req.state()), r.req.generated_tokens, r.req.true_output_tokens);
      }
      return msg;
    });
    engine_.run_until([this, &pool, extra] {
      if (engine_.now() > cfg_.stop.max_time) {
        throw DeadlockError(fmt::format("no progress: virtual time {} exceeds stop.max_time {} at step {}; {}",
                                        engine_.now(), cfg_.stop.max_time, train_step_,
                                        extra ? extra() : std::string()));
      }
      return finished();
    });
    engine_.trace().emit(engine_.now(), TraceKind::run_end).set(Field::step, static_cast<double>(train_step_));
    SimulationResult res;
    res.kv = pool.stats();
    res.events = engine_.executed_events();
    res.trace = std::move(engine_.trace());
    res.steps = step_decomposition(res.trace);
    return res;
  }

  const SimConfig& cfg_;
  Engine engine_;
  WorkloadStream stream_;
  PromptId next_prompt_ = 0;
  std::int64_t train_step_ = 0;
  bool train_busy_ = false;
};

// ---------------------------------------------------------------------------

class Synchronous : public Base {
 public:
  explicit Synchronous(const SimConfig& cfg)
      : Base(cfg),
        pool_(engine_, cfg.model, cfg.network, stream_, cfg.cluster.slots, cfg.cluster.kv_capacity_tokens,
              device_list(cfg.cluster.n_devices, cfg.cluster.devices_per_group)) {
    collector_.g = cfg.workload.group_size;
  }

  SimulationResult go() {
    header(cfg_.cluster.n_devices, 0);
    pool_.on_complete([this](PoolRequest& r) { on_complete(r); });
    start_step();
    return run(pool_);
  }

 private:
  void start_step() {
    for (std::int64_t i = 0; i < cfg_.paradigm.tbs_prompts; ++i) pool_.submit_prompt(next_prompt_++, version_);
    pool_.fill();
  }

  void on_complete(PoolRequest& r) {
    collector_.push(to_record(r));
    if (static_cast<std::int64_t>(collector_.ready.size()) < cfg_.paradigm.tbs_prompts) return;
    train(collector_.take(collector_.ready.size()), version_, cfg_.cluster.n_devices, [this] {
      ++version_;
      for (const auto& d : pool_.devices()) pool_.set_hosted(d.id, version_);
      if (!finished()) start_step();
    });
  }

  RolloutPool pool_;
  GroupCollector collector_;
  Version version_ = 0;
};

// ---------------------------------------------------------------------------

class Replication : public Base {
 public:
  explicit Replication(const SimConfig& cfg)
      : Base(cfg),
        pool_(engine_, cfg.model, cfg.network, stream_, cfg.cluster.slots, cfg.cluster.kv_capacity_tokens,
              device_list(cfg.cluster.n_devices, cfg.cluster.devices_per_group)) {
    collector_.g = cfg.workload.group_size;
  }

  SimulationResult go() {
    header(cfg_.cluster.n_devices, 0);
    pool_.on_complete([this](PoolRequest& r) { on_complete(r); });
    start_step();
    return run(pool_);
  }

 private:
  void start_step() {
    const auto n = static_cast<std::int64_t>(
        std::llround(cfg_.paradigm.oversample_factor * static_cast<double>(cfg_.paradigm.tbs_prompts)));
    for (std::int64_t i = 0; i < n; ++i) pool_.submit_prompt(next_prompt_++, version_);
    open_ = true;
    pool_.fill();
  }

  void discard_completed(const TrajectoryRecord& t) {
    engine_.trace()
        .emit(engine_.now(), TraceKind::discard)
        .set(Field::req, static_cast<double>(t.request_id))
        .set(Field::prompt, static_cast<double>(t.prompt_id))
        .set(Field::ver, static_cast<double>(t.behavior_version))
        .set(Field::in, static_cast<double>(t.input_tokens))
        .set(Field::out, static_cast<double>(t.output_tokens))
        .set(Field::len, static_cast<double>(t.output_tokens));
  }

  void on_complete(PoolRequest& r) {
    if (!open_) return;
    collector_.push(to_record(r));
    const auto tbs = static_cast<std::size_t>(cfg_.paradigm.tbs_prompts);
    if (collector_.ready.size() < tbs) return;
    open_ = false;
    auto groups = collector_.take(tbs);
    // Everything else of this step is thrown away: surplus complete groups,
    // completed members of unfinished groups, and requests still running.
    for (const auto& g : collector_.ready) {
      for (const auto& m : g) discard_completed(m);
    }
    for (const auto& [p, g] : collector_.partial) {
      for (const auto& m : g) discard_completed(m);
    }
    collector_.ready.clear();
    collector_.partial.clear();
    const RequestId self = r.req.request_id;
    for (RequestId id : pool_.unfinished()) {
      if (id != self) pool_.abort(id);
    }
    train(groups, version_, cfg_.cluster.n_devices, [this] {
      ++version_;
      for (const auto& d : pool_.devices()) pool_.set_hosted(d.id, version_);
      if (!finished()) start_step();
    });
  }

  RolloutPool pool_;
  GroupCollector collector_;
  Version version_ = 0;
  bool open_ = false;
};

// ---------------------------------------------------------------------------

class OneStepOff : public Base {
 public:
  explicit OneStepOff(const SimConfig& cfg)
      : Base(cfg),
        rollout_devices_(cfg.cluster.n_devices - cfg.train_devices()),
        pool_(engine_, cfg.model, cfg.network, stream_, cfg.cluster.slots, cfg.cluster.kv_capacity_tokens,
              device_list(rollout_devices_, cfg.cluster.devices_per_group)) {
    collector_.g = cfg.workload.group_size;
  }

  SimulationResult go() {
    header(cfg_.train_devices(), 1);
    pool_.on_complete([this](PoolRequest& r) { on_complete(r); });
    try_rollout();
    return run(pool_);
  }

 private:
  void try_rollout() {
    if (rolling_ || syncing_ || next_rollout_ >= cfg_.stop.n_steps) return;
    const Version need = std::max<std::int64_t>(0, next_rollout_ - 1);
    if (train_step_ < need) return;
    if (hosted_ == need) {
      launch(need);
      return;
    }
    syncing_ = true;
    const double ws = cfg_.model.weight_sync_time;
    engine_.schedule_in(ws, TraceKind::weight_sync_done, [this, need, ws] {
      for (const auto& d : pool_.devices()) pool_.set_hosted(d.id, need);
      hosted_ = need;
      syncing_ = false;
      engine_.trace()
          .emit(engine_.now(), TraceKind::weight_sync_done)
          .set(Field::ver, static_cast<double>(need))
          .set(Field::dur, ws)
          .set(Field::n, static_cast<double>(pool_.devices().size()));
      launch(need);
    });
  }

  void launch(Version v) {
    rolling_ = true;
    for (std::int64_t i = 0; i < cfg_.paradigm.tbs_prompts; ++i) pool_.submit_prompt(next_prompt_++, v);
    pool_.fill();
  }

  void on_complete(PoolRequest& r) {
    collector_.push(to_record(r));
    if (static_cast<std::int64_t>(collector_.ready.size()) < cfg_.paradigm.tbs_prompts) return;
    batches_.push_back(collector_.take(collector_.ready.size()));
    rolling_ = false;
    ++next_rollout_;
    try_train();
    try_rollout();
  }

  void try_train() {
    if (train_busy_ || batches_.empty()) return;
    auto groups = std::move(batches_.front());
    batches_.pop_front();
    train(groups, train_step_, cfg_.train_devices(), [this] {
      try_train();
      try_rollout();
    });
  }

  int rollout_devices_;
  RolloutPool pool_;
  GroupCollector collector_;
  std::deque<std::vector<Group>> batches_;
  std::int64_t next_rollout_ = 0;
  Version hosted_ = 0;
  bool rolling_ = false;
  bool syncing_ = false;
};

// ---------------------------------------------------------------------------

class PartialRollout : public Base {
 public:
  explicit PartialRollout(const SimConfig& cfg)
      : Base(cfg),
        pool_(engine_, cfg.model, cfg.network, stream_, cfg.cluster.slots, cfg.cluster.kv_capacity_tokens,
              device_list(cfg.cluster.n_devices, cfg.cluster.devices_per_group)),
        segment_(static_cast<double>(cfg.paradigm.segment_tokens) * cfg.model.tpot) {
    collector_.g = cfg.workload.group_size;
  }

  SimulationResult go() {
    header(cfg_.cluster.n_devices, 0);
    pool_.on_complete([this](PoolRequest& r) {
      ++completed_;
      collector_.push(to_record(r));
    });
    start_iteration();
    return run(pool_);
  }

 private:
  void start_iteration() {
    const std::int64_t g = cfg_.workload.group_size;
    const std::int64_t rbs = cfg_.paradigm.rbs_prompts * g;
    while (submitted_ - trained_ + g <= rbs) {
      pool_.submit_prompt(next_prompt_++, version_);
      submitted_ += g;
    }
    pool_.fill();
    engine_.schedule_in(segment_, TraceKind::decode_tick_batch, [this] { on_deadline(); });
  }

  void on_deadline() {
    const auto tbs = static_cast<std::size_t>(cfg_.paradigm.tbs_prompts);
    if (collector_.ready.size() < tbs) {
      // Not enough finished groups: keep decoding with the same weights.
      engine_.schedule_in(segment_, TraceKind::decode_tick_batch, [this] { on_deadline(); });
      return;
    }
    std::vector<RequestId> cut;
    for (const auto& d : pool_.devices()) {
      for (RequestId id : d.residents) cut.push_back(id);
    }
    std::sort(cut.begin(), cut.end());
    for (RequestId id : cut) pool_.cut_segment(id);
    for (const auto& d : pool_.devices()) pool_.device(d.id).paused = true;
    auto groups = collector_.take(tbs);
    for (const auto& g : groups) trained_ += static_cast<std::int64_t>(g.size());
    train(groups, version_, cfg_.cluster.n_devices, [this, cut] {
      ++version_;
      pool_.move_queue(version_ - 1, version_);
      for (RequestId id : cut) pool_.resubmit(id, version_);
      for (const auto& d : pool_.devices()) {
        pool_.set_hosted(d.id, version_);
        pool_.device(d.id).paused = false;
      }
      if (!finished()) start_iteration();
    });
  }

  RolloutPool pool_;
  GroupCollector collector_;
  double segment_;
  Version version_ = 0;
  std::int64_t submitted_ = 0;
  std::int64_t trained_ = 0;
  std::int64_t completed_ = 0;
};

// ---------------------------------------------------------------------------

class Dora : public Base {
 public:
  explicit Dora(const SimConfig& cfg)
      : Base(cfg),
        rollout_devices_(cfg.cluster.n_devices - cfg.train_devices()),
        pool_(engine_, cfg.model, cfg.network, stream_, cfg.cluster.slots, cfg.cluster.kv_capacity_tokens,
              device_list(rollout_devices_, cfg.cluster.devices_per_group)),
        tq_(cfg.paradigm.staleness_k, cfg.workload.group_size),
        tbs_(cfg.tbs_trajectories()),
        rbs_(cfg.paradigm.rbs_prompts * cfg.workload.group_size) {
    for (const auto& g : make_groups(rollout_devices_, cfg.cluster.devices_per_group)) {
      groups_.push_back({g.dp_group_id, 0, g.device_ids});
    }
  }

  SimulationResult go() {
    header(cfg_.train_devices(), cfg_.paradigm.staleness_k);
    pool_.on_complete([this](PoolRequest& r) { on_complete(r); });
    const auto& trig = cfg_.orchestrator.triggers;
    pool_.on_kv_pressure(trig.kv_utilization_threshold, [this](DeviceId) {
      if (engine_.now() - last_utilization_ < cfg_.orchestrator.triggers.utilization_cooldown) return;
      last_utilization_ = engine_.now();
      request_rebalance(TriggerKind::utilization);
    });
    refill();
    arm_temporal();
    return run(pool_, [this] { return describe(); });
  }

 private:
  void inject(Version v, std::int64_t prompts) {
    const int g = cfg_.workload.group_size;
    for (std::int64_t i = 0; i < prompts; ++i) {
      pool_.submit_prompt(next_prompt_++, v);
      tq_.on_dispatch(v, g);
      for (int j = 0; j < g; ++j) tq_.on_start(v);
    }
  }

  std::int64_t outstanding() const {
    std::int64_t n = 0;
    for (Version v : tq_.window().versions()) n += tq_.window().counts(v).outstanding();
    return n;
  }

  /// Streaming supplementation: keep RBS trajectories outstanding on the
  /// latest version, within its staleness allowance.
  void refill() {
    const Version latest = tq_.window().newest();
    SupplementationInput in;
    in.rbs_trajectories = rbs_;
    in.group_size = cfg_.workload.group_size;
    in.latest = latest;
    in.outstanding = outstanding();
    in.latest_allowance = tq_.dispatch_allowance(latest, tbs_);
    const auto n = plan_supplementation(in)[latest];
    if (n > 0) {
      inject(latest, n);
      pool_.fill();
    }
  }

  void arm_temporal() {
    engine_.schedule_in(cfg_.orchestrator.triggers.temporal_period, TraceKind::rebalance_trigger, [this] {
      if (pool_.active() == 0 && pool_.queued_total() == 0) return;
      rebalance(TriggerKind::temporal);
      arm_temporal();
    });
  }

  void on_complete(PoolRequest& r) {
    tq_.push_trajectory(to_record(r));
    try_train();
  }

  /// Admits every trained version the window can take. Returns whether the
  /// window moved.
  bool advance() {
    bool moved = false;
    while (tq_.window().newest() < train_step_) {
      auto res = tq_.advance_window(tq_.window().newest() + 1);
      if (!res.advanced) break;
      moved = true;
      engine_.trace()
          .emit(engine_.now(), TraceKind::window_advance)
          .set(Field::oldest, static_cast<double>(tq_.window().oldest()))
          .set(Field::newest, static_cast<double>(tq_.window().newest()));
    }
    return moved;
  }

  void try_train() {
    if (train_busy_ || finished()) return;
    auto batch = tq_.try_form_batch_bounded(tbs_);
    if (!batch) return;
    const auto snap = tq_.snapshot();
    engine_.trace()
        .emit(engine_.now(), TraceKind::queue)
        .set(Field::step, static_cast<double>(batch->step))
        .set(Field::depth, static_cast<double>(snap.depth))
        .set(Field::inflight, static_cast<double>(snap.inflight))
        .set(Field::pending, static_cast<double>(pool_.queued_total()))
        .set(Field::oldest, static_cast<double>(snap.oldest))
        .set(Field::newest, static_cast<double>(snap.newest));
    std::vector<Group> groups;
    for (std::size_t i = 0; i < batch->group_offsets.size(); ++i) {
      const std::size_t lo = batch->group_offsets[i];
      const std::size_t hi = i + 1 < batch->group_offsets.size() ? batch->group_offsets[i + 1] : batch->members.size();
      groups.emplace_back(batch->members.begin() + static_cast<std::ptrdiff_t>(lo),
                          batch->members.begin() + static_cast<std::ptrdiff_t>(hi));
    }
    train(groups, batch->trainer_version, cfg_.train_devices(), [this] { on_train_done(); });
    if (advance()) request_rebalance(TriggerKind::window_advance);
    refill();
  }

  void on_train_done() {
    const bool moved = advance();
    if (moved || cfg_.orchestrator.triggers.update_driven) request_rebalance(TriggerKind::update_driven);
    try_train();
  }

  void request_rebalance(TriggerKind trigger) {
    // Run from a fresh event so planning never re-enters pool callbacks.
    engine_.schedule_in(0.0, TraceKind::rebalance_trigger, [this, trigger] { rebalance(trigger); });
  }

  void rebalance(TriggerKind trigger) {
    if (finished()) return;
    if (planning_) {
      coalesced_ = trigger;
      return;
    }
    OrchestratorSnapshot snap;
    snap.window = tq_.window().versions();
    for (Version v : snap.window) {
      snap.active[v] = tq_.window().counts(v).active();
      snap.pending[v] = pool_.queued(v);
      snap.allowance[v] = tq_.dispatch_allowance(v, tbs_);
    }
    snap.outstanding = outstanding();
    snap.rbs_trajectories = rbs_;
    snap.group_size = cfg_.workload.group_size;
    snap.slots_per_device = cfg_.cluster.slots;
    snap.groups = groups_;
    snap.live = pool_.live();
    snap.capacity = pool_.capacity();
    const MigrationPlan plan = plan_rebalance(snap, trigger);

    const auto& orch = cfg_.orchestrator;
    const double lb = orch.planner_base_seconds + orch.planner_seconds_per_group * static_cast<double>(groups_.size());
    const double ws = cfg_.model.weight_sync_time;
    const std::set<GroupId> flashed(plan.flashed.begin(), plan.flashed.end());

    // Requests waiting for or in prefill on flashed groups hold no KV yet;
    // they simply go back to their queue.
    for (GroupId g : flashed) {
      for (DeviceId d : groups_[static_cast<std::size_t>(g)].devices) {
        auto& dev = pool_.device(d);
        dev.paused = true;
        std::vector<RequestId> waiting;
        for (RequestId id : dev.residents) {
          const auto ph = pool_.request(id).phase;
          if (ph == Phase::lane || ph == Phase::prefill) waiting.push_back(id);
        }
        for (RequestId id : waiting) pool_.requeue(id);
      }
    }
    for (auto& g : groups_) {
      g.version = plan.target.at(g.group);
      for (DeviceId d : g.devices) pool_.set_hosted(d, g.version);
    }
    std::map<DeviceId, GroupId> group_of;
    for (const auto& g : groups_) {
      for (DeviceId d : g.devices) group_of[d] = g.group;
    }
    double xfer = 0;
    std::int64_t moved = 0;
    for (const auto& m : plan.migrations.moves) {
      double dur = 0;
      if (m.dst >= 0) {
        const double delay = lb + (flashed.count(group_of.at(m.dst)) ? ws : 0.0);
        dur = pool_.migrate(m.request_id, m.dst, delay);
        if (m.dst != m.src) ++moved;
      } else {
        dur = pool_.park(m.request_id, lb);
      }
      xfer = std::max(xfer, dur);
    }
    const auto& net = cfg_.network;
    const double free = moved > 0 ? transfer_time(net.metadata_bytes, net.bandwidth, net.latency) : 0.0;
    const double flash_end = lb + std::max(flashed.empty() ? 0.0 : ws, xfer);

    if (!flashed.empty()) {
      engine_.schedule_in(flash_end, TraceKind::weight_sync_done, [this, flashed, ws] {
        for (GroupId g : flashed) {
          const auto& grp = groups_[static_cast<std::size_t>(g)];
          for (DeviceId d : grp.devices) pool_.device(d).paused = false;
          engine_.trace()
              .emit(engine_.now(), TraceKind::weight_sync_done)
              .set(Field::group, g)
              .set(Field::ver, static_cast<double>(grp.version))
              .set(Field::dur, ws);
        }
        pool_.fill();
      });
    }

    std::int64_t legacy = 0;
    if (plan.injected_latest > 0) inject(snap.window.front(), plan.injected_latest);
    for (const auto& [v, n] : plan.injected_legacy) {
      inject(v, n);
      legacy += n;
    }
    pool_.fill();

    auto& trace = engine_.trace();
    trace.emit(engine_.now(), TraceKind::rebalance)
        .set(Field::trigger, static_cast<double>(trigger))
        .set(Field::lb, lb)
        .set(Field::xfer, xfer)
        .set(Field::free, free)
        .set(Field::flashed, static_cast<double>(flashed.size()))
        .set(Field::moved, static_cast<double>(moved))
        .set(Field::injected_latest, static_cast<double>(plan.injected_latest))
        .set(Field::injected_legacy, static_cast<double>(legacy))
        .set(Field::nver, static_cast<double>(snap.window.size()))
        .set(Field::blocked, static_cast<double>(plan.migrations.parked));
    for (Version v : snap.window) {
      auto before = plan.partition_before.find(v);
      auto after = plan.partition_after.find(v);
      trace.emit(engine_.now(), TraceKind::partition)
          .set(Field::ver, static_cast<double>(v))
          .set(Field::before, before == plan.partition_before.end() ? 0 : before->second)
          .set(Field::after, after == plan.partition_after.end() ? 0 : after->second);
    }

    planning_ = true;
    engine_.schedule_in(flash_end + free, TraceKind::rebalance_trigger, [this] {
      planning_ = false;
      if (coalesced_) {
        const auto t = *coalesced_;
        coalesced_.reset();
        rebalance(t);
      }
    });
  }

  std::string describe() const {
    std::string s = "window [";
    for (Version v : tq_.window().versions()) {
      const auto& c = tq_.window().counts(v);
      s += fmt::format(" v{}: pending {} inflight {} queued {} waiting {};", v, c.pending, c.inflight,
                       c.queued, pool_.queued(v));
    }
    s += fmt::format(" ] complete groups {}, batches {}; groups:", tq_.complete_groups(), tq_.batches_formed());
    for (const auto& g : groups_) s += fmt::format(" {}->v{}", g.group, g.version);
    return s + "; ";
  }

  int rollout_devices_;
  RolloutPool pool_;
  TransferQueue tq_;
  std::int64_t tbs_, rbs_;
  std::vector<GroupState> groups_;
  bool planning_ = false;
  std::optional<TriggerKind> coalesced_;
  double last_utilization_ = -std::numeric_limits<double>::infinity();
};

}  // namespace

SimulationResult run_synchronous(const SimConfig& cfg) {
  if (cfg.paradigm.kind != ParadigmKind::synchronous) throw PreconditionError("config is not synchronous");
  return Synchronous(cfg).go();
}

SimulationResult run_one_step_off(const SimConfig& cfg) {
  if (cfg.paradigm.kind != ParadigmKind::one_step_off_policy) {
    throw PreconditionError("config is not one_step_off_policy");
  }
  return OneStepOff(cfg).go();
}

SimulationResult run_partial_rollout(const SimConfig& cfg) {
  if (cfg.paradigm.kind != ParadigmKind::partial_rollout) throw PreconditionError("config is not partial_rollout");
  return PartialRollout(cfg).go();
}

SimulationResult run_replication(const SimConfig& cfg) {
  if (cfg.paradigm.kind != ParadigmKind::replication) throw PreconditionError("config is not replication");
  return Replication(cfg).go();
}

SimulationResult run_dora(const SimConfig& cfg) {
  if (cfg.paradigm.kind != ParadigmKind::dora) throw PreconditionError("config is not dora");
  return Dora(cfg).go();
}

SimulationResult run_paradigm(const SimConfig& cfg) {
  switch (cfg.paradigm.kind) {
    case ParadigmKind::synchronous: return run_synchronous(cfg);
    case ParadigmKind::one_step_off_policy: return run_one_step_off(cfg);
    case ParadigmKind::partial_rollout: return run_partial_rollout(cfg);
    case ParadigmKind::replication: return run_replication(cfg);
    case ParadigmKind::dora: return run_dora(cfg);
  }
  throw PreconditionError("unknown paradigm");
}

}  // namespace dorasim
