#include "dorasim/rollout_pool.hpp"

#include <algorithm>
#include <cmath>
#include <queue>

#include <fmt/format.h>

#include "dorasim/errors.hpp"

namespace dorasim {

RolloutPool::RolloutPool(Engine& engine, const ModelProfile& model, const NetworkProfile& net,
                         const WorkloadStream& workload, int slots, Tokens kv_capacity,
                         const std::vector<std::pair<DeviceId, GroupId>>& devices)
    : engine_(engine), model_(model), net_(net), workload_(workload), slots_(slots),
      kv_capacity_(kv_capacity) {
  if (slots < 1) throw ConfigError("rollout devices need at least one slot");
  for (const auto& [id, group] : devices) {
    PoolDevice d;
    d.id = id;
    d.group = group;
    d.free_slots = slots;
    index_[id] = devices_.size();
    devices_.push_back(std::move(d));
  }
}

void RolloutPool::submit_prompt(PromptId p, Version v) {
  auto batch = workload_.prompt(p);
  for (auto& req : batch.requests) {
    const auto id = static_cast<std::size_t>(req.request_id);
    if (requests_.size() <= id) requests_.resize(id + 1);
    auto& pr = requests_[id];
    if (pr.req.request_id == req.request_id && pr.version >= 0) {
      throw ProtocolViolation(fmt::format("prompt {} submitted twice", p));
    }
    pr = PoolRequest{};
    pr.req = req;
    pr.req.created_at = engine_.now();
    pr.req.dispatched_at = engine_.now();
    pr.req.assign_version(v);
    pr.version = v;
    queues_[v].pending.push_back(req.request_id);
    ++queued_total_;
    engine_.trace()
        .emit(engine_.now(), TraceKind::dispatch)
        .set(Field::req, static_cast<double>(req.request_id))
        .set(Field::prompt, static_cast<double>(p))
        .set(Field::ver, static_cast<double>(v))
        .set(Field::in, static_cast<double>(req.input_tokens))
        .set(Field::out, static_cast<double>(req.true_output_tokens));
  }
}

std::optional<RequestId> RolloutPool::pop_queue(Version v) {
  auto it = queues_.find(v);
  if (it == queues_.end()) return std::nullopt;
  auto& q = it->second;
  std::deque<RequestId>* src = !q.resume.empty() ? &q.resume : !q.pending.empty() ? &q.pending : nullptr;
  if (!src) return std::nullopt;
  RequestId r = src->front();
  src->pop_front();
  --queued_total_;
  return r;
}

namespace {

Tokens admission_tokens(const PoolRequest& r) {
  return r.req.input_tokens + r.req.generated_tokens;
}

}  // namespace

void RolloutPool::fill() {
  for (auto& [v, q] : queues_) {
    if (q.resume.empty() && q.pending.empty()) continue;
    // (free slots, -id) max-heap: most free slots first, ties to the lower id
    std::priority_queue<std::pair<int, DeviceId>> heap;
    for (auto& d : devices_) {
      if (d.hosted == v && !d.paused && d.free_slots > 0) heap.emplace(d.free_slots, -d.id);
    }
    while (!heap.empty() && (!q.resume.empty() || !q.pending.empty())) {
      auto [free, neg_id] = heap.top();
      heap.pop();
      auto& d = device(-neg_id);
      const RequestId next = !q.resume.empty() ? q.resume.front() : q.pending.front();
      if (device_kv(d) + admission_tokens(request(next)) > kv_capacity_) {
        check_overflow(d);
        continue;
      }
      admit(d, *pop_queue(v));
      if (d.free_slots > 0) heap.emplace(d.free_slots, -d.id);
    }
  }
}

void RolloutPool::fill_device(DeviceId id) {
  auto& d = device(id);
  while (!d.paused && d.free_slots > 0) {
    auto it = queues_.find(d.hosted);
    if (it == queues_.end()) return;
    auto& q = it->second;
    if (q.resume.empty() && q.pending.empty()) return;
    const RequestId next = !q.resume.empty() ? q.resume.front() : q.pending.front();
    if (device_kv(d) + admission_tokens(request(next)) > kv_capacity_) {
      check_overflow(d);
      return;
    }
    admit(d, *pop_queue(d.hosted));
  }
}

void RolloutPool::set_paused(DeviceId id, bool paused) {
  device(id).paused = paused;
  if (!paused) fill_device(id);
}

void RolloutPool::admit(PoolDevice& d, RequestId id) {
  auto& r = request(id);
  r.device = d.id;
  if (r.origin < 0) r.origin = d.id;
  --d.free_slots;
  d.residents.insert(id);
  ++active_;
  r.reserved = admission_tokens(r);
  d.static_kv += r.reserved;
  if (r.phase == Phase::host) {
    r.phase = Phase::onloading;
    CacheEntry entry{id, r.reserved, {true, -1}, r.version};
    const double dur = onload(entry, d.id, kv_capacity_, model_, net_);
    r.has_event = true;
    r.event = engine_.schedule_in(dur, TraceKind::onload_done, [this, id, dur] {
      auto& rr = request(id);
      auto& dd = device(rr.device);
      rr.has_event = false;
      dd.static_kv -= rr.reserved;
      rr.reserved = 0;
      note_version(rr, rr.version);
      engine_.trace()
          .emit(engine_.now(), TraceKind::onload_done)
          .set(Field::req, static_cast<double>(id))
          .set(Field::dev, dd.id)
          .set(Field::ver, static_cast<double>(rr.version))
          .set(Field::dur, dur);
      begin_decode(dd, rr);
    });
    return;
  }
  r.req.transition(RequestState::prefilling);
  r.phase = Phase::lane;
  d.lane.push_back(id);
  kick_lane(d);
  if (on_pressure_ && device_kv(d) > pressure_threshold_ * static_cast<double>(kv_capacity_)) {
    on_pressure_(d.id);
  }
  watch_pressure(d);
}

void RolloutPool::watch_pressure(PoolDevice& d) {
  if (d.has_pressure_event) {
    engine_.cancel(d.pressure_event);
    d.has_pressure_event = false;
  }
  if (!on_pressure_ || d.n_decoding == 0) return;
  const double limit = pressure_threshold_ * static_cast<double>(kv_capacity_);
  if (static_cast<double>(device_kv(d)) > limit) return;
  // first t with static + floor((n t - sum_start) / tpot) > limit
  const double need = std::floor(limit - static_cast<double>(d.static_kv)) + 1.0;
  const double at = (need * model_.tpot + d.sum_start) / static_cast<double>(d.n_decoding) + 1e-9;
  const DeviceId dev = d.id;
  d.has_pressure_event = true;
  d.pressure_event = engine_.schedule(std::max(at, engine_.now()), TraceKind::rebalance_trigger, [this, dev] {
    auto& dd = device(dev);
    dd.has_pressure_event = false;
    if (static_cast<double>(device_kv(dd)) > pressure_threshold_ * static_cast<double>(kv_capacity_)) {
      on_pressure_(dev);
    } else {
      watch_pressure(dd);
    }
  });
}

void RolloutPool::kick_lane(PoolDevice& d) {
  if (d.lane_busy || d.lane.empty()) return;
  const RequestId id = d.lane.front();
  d.lane.pop_front();
  auto& r = request(id);
  r.phase = Phase::prefill;
  const Tokens tokens = r.req.input_tokens + r.req.generated_tokens;
  note_version(r, r.version);
  auto& trace = engine_.trace();
  trace.emit(engine_.now(), TraceKind::prefill_start)
      .set(Field::req, static_cast<double>(id))
      .set(Field::dev, d.id)
      .set(Field::ver, static_cast<double>(r.version))
      .set(Field::tokens, static_cast<double>(tokens));
  if (r.needs_reprefill) {
    stats_.reprefill_tokens += tokens;
    trace.emit(engine_.now(), TraceKind::reprefill)
        .set(Field::req, static_cast<double>(id))
        .set(Field::dev, d.id)
        .set(Field::ver, static_cast<double>(r.version))
        .set(Field::tokens, static_cast<double>(tokens));
  }
  d.lane_busy = true;
  r.has_event = true;
  const DeviceId dev = d.id;
  r.event = engine_.schedule_in(prefill_time(tokens, model_), TraceKind::prefill_done, [this, id, dev] {
    auto& rr = request(id);
    auto& dd = device(dev);
    rr.has_event = false;
    dd.lane_busy = false;
    dd.static_kv -= rr.reserved;
    rr.reserved = 0;
    rr.needs_reprefill = false;
    engine_.trace()
        .emit(engine_.now(), TraceKind::prefill_done)
        .set(Field::req, static_cast<double>(id))
        .set(Field::dev, dev)
        .set(Field::ver, static_cast<double>(rr.version));
    begin_decode(dd, rr);
    kick_lane(dd);
  });
}

void RolloutPool::begin_decode(PoolDevice& d, PoolRequest& r) {
  r.req.transition(RequestState::decoding);
  r.phase = Phase::decode;
  r.decode_start = engine_.now();
  r.gen_at_start = r.req.generated_tokens;
  if (r.req.first_token_at < 0) r.req.first_token_at = engine_.now();
  d.static_kv += r.req.input_tokens + r.gen_at_start;
  ++d.n_decoding;
  d.sum_start += r.decode_start;
  const RequestId id = r.req.request_id;
  r.has_event = true;
  r.event = engine_.schedule_in(decode_time(r.req.true_output_tokens - r.gen_at_start, model_),
                                TraceKind::request_complete, [this, id] { finish(id); });
  watch_pressure(d);
}

Tokens RolloutPool::generated_now(const PoolRequest& r) const {
  if (r.phase != Phase::decode) return r.req.generated_tokens;
  const double steps = (engine_.now() - r.decode_start) / model_.tpot;
  const auto g = r.gen_at_start + static_cast<Tokens>(std::floor(steps + 1e-9));
  return std::min(g, r.req.true_output_tokens);
}

Tokens RolloutPool::kv_of(const PoolRequest& r) const {
  switch (r.phase) {
    case Phase::decode: return r.req.input_tokens + generated_now(r);
    case Phase::host:
    case Phase::queued:
    case Phase::done: return 0;
    default: return r.reserved;
  }
}

Tokens RolloutPool::device_kv(const PoolDevice& d) const {
  const double growth =
      d.n_decoding > 0 ? (static_cast<double>(d.n_decoding) * engine_.now() - d.sum_start) / model_.tpot
                       : 0.0;
  return d.static_kv + static_cast<Tokens>(std::floor(std::max(0.0, growth) + 1e-6));
}

void RolloutPool::stop_decode(PoolDevice& d, PoolRequest& r) {
  r.req.generated_tokens = std::min(generated_now(r), r.req.true_output_tokens - 1);
  d.static_kv -= r.req.input_tokens + r.gen_at_start;
  --d.n_decoding;
  d.sum_start -= r.decode_start;
  if (d.n_decoding == 0) d.sum_start = 0;
  cancel_event(r);
  watch_pressure(d);
  engine_.trace()
      .emit(engine_.now(), TraceKind::preempt)
      .set(Field::req, static_cast<double>(r.req.request_id))
      .set(Field::dev, d.id)
      .set(Field::ver, static_cast<double>(r.version))
      .set(Field::len, static_cast<double>(r.req.generated_tokens));
}

void RolloutPool::release_slot(PoolDevice& d, PoolRequest& r) {
  d.residents.erase(r.req.request_id);
  ++d.free_slots;
}

void RolloutPool::cancel_event(PoolRequest& r) {
  if (r.has_event) engine_.cancel(r.event);
  r.has_event = false;
}

void RolloutPool::note_version(PoolRequest& r, Version v) {
  if (r.seg_version != v) {
    if (r.n_versions == 0) r.first_seg_version = v;
    ++r.n_versions;
    r.seg_version = v;
  }
}

void RolloutPool::finish(RequestId id) {
  auto& r = request(id);
  auto& d = device(r.device);
  r.has_event = false;
  d.static_kv -= r.req.input_tokens + r.gen_at_start;
  --d.n_decoding;
  d.sum_start -= r.decode_start;
  if (d.n_decoding == 0) d.sum_start = 0;
  watch_pressure(d);
  r.req.generated_tokens = r.req.true_output_tokens;
  r.req.completed_at = engine_.now();
  r.req.transition(RequestState::complete);
  r.phase = Phase::done;
  release_slot(d, r);
  --active_;
  engine_.trace()
      .emit(engine_.now(), TraceKind::request_complete)
      .set(Field::req, static_cast<double>(id))
      .set(Field::prompt, static_cast<double>(r.req.prompt_id))
      .set(Field::dev, d.id)
      .set(Field::ver, static_cast<double>(r.version))
      .set(Field::in, static_cast<double>(r.req.input_tokens))
      .set(Field::out, static_cast<double>(r.req.true_output_tokens))
      .set(Field::nver, r.n_versions);
  if (on_complete_) on_complete_(r);
  fill_device(d.id);
}

void RolloutPool::requeue(RequestId id) {
  auto& r = request(id);
  auto& d = device(r.device);
  if (r.phase == Phase::lane) {
    d.lane.erase(std::find(d.lane.begin(), d.lane.end(), id));
  } else if (r.phase == Phase::prefill) {
    cancel_event(r);
    d.lane_busy = false;
    engine_.trace()
        .emit(engine_.now(), TraceKind::preempt)
        .set(Field::req, static_cast<double>(id))
        .set(Field::dev, d.id)
        .set(Field::ver, static_cast<double>(r.version))
        .set(Field::len, static_cast<double>(r.req.generated_tokens));
  } else {
    throw ProtocolViolation(fmt::format("request {} is not waiting for prefill", id));
  }
  d.static_kv -= r.reserved;
  r.reserved = 0;
  release_slot(d, r);
  r.req.transition(RequestState::pending);
  r.phase = Phase::queued;
  auto& q = queues_[r.version];
  (r.needs_reprefill ? q.resume : q.pending).push_front(id);
  --active_;
  ++queued_total_;
  kick_lane(d);
}

void RolloutPool::cut_segment(RequestId id) {
  auto& r = request(id);
  if (r.phase == Phase::lane || r.phase == Phase::prefill) {
    requeue(id);
    auto& q = queues_[r.version];
    auto& src = r.needs_reprefill ? q.resume : q.pending;
    src.erase(std::find(src.begin(), src.end(), id));
    --queued_total_;
    return;
  }
  if (r.phase != Phase::decode) {
    throw ProtocolViolation(fmt::format("request {} cannot be cut in its phase", id));
  }
  auto& d = device(r.device);
  stop_decode(d, r);
  release_slot(d, r);
  r.req.transition(RequestState::pending);
  r.needs_reprefill = r.req.generated_tokens > 0;
  r.phase = Phase::queued;
  --active_;
}

void RolloutPool::resubmit(RequestId id, Version v) {
  auto& r = request(id);
  if (r.phase != Phase::queued) throw ProtocolViolation("resubmit of a placed request");
  r.version = v;
  auto& q = queues_[v];
  (r.needs_reprefill ? q.resume : q.pending).push_back(id);
  ++queued_total_;
}

void RolloutPool::move_queue(Version from, Version to) {
  auto it = queues_.find(from);
  if (it == queues_.end() || from == to) return;
  Queues moved = std::move(it->second);
  queues_.erase(it);
  auto& dst = queues_[to];
  for (RequestId id : moved.resume) {
    request(id).version = to;
    dst.resume.push_back(id);
  }
  for (RequestId id : moved.pending) {
    request(id).version = to;
    dst.pending.push_back(id);
  }
}

double RolloutPool::migrate(RequestId id, DeviceId dst_id, double delay) {
  auto& r = request(id);
  if (r.phase != Phase::decode) throw ProtocolViolation(fmt::format("request {} is not decoding", id));
  auto& src = device(r.device);
  auto& dst = device(dst_id);
  stop_decode(src, r);
  r.req.transition(RequestState::migrating);
  r.phase = Phase::moving;
  const Tokens kv = r.req.input_tokens + r.req.generated_tokens;
  CacheEntry entry{id, kv, {false, src.id}, r.version};
  const double dur = migrate_with_reuse(entry, src.id, dst.id, dst.hosted, model_, net_, &stats_);
  r.reserved = kv;
  src.static_kv += kv;
  if (dst.id != src.id) {
    --dst.free_slots;
    dst.residents.insert(id);
    dst.static_kv += kv;
  }
  const DeviceId s = src.id;
  r.has_event = true;
  r.event = engine_.schedule_in(delay + dur, TraceKind::migration_done, [this, id, s, dst_id, dur, kv] {
    auto& rr = request(id);
    auto& from = device(s);
    auto& to = device(dst_id);
    rr.has_event = false;
    from.static_kv -= kv;
    if (from.id != to.id) {
      release_slot(from, rr);
      to.static_kv -= kv;
    }
    rr.reserved = 0;
    rr.device = to.id;
    note_version(rr, rr.version);
    engine_.trace()
        .emit(engine_.now(), TraceKind::migration_done)
        .set(Field::req, static_cast<double>(id))
        .set(Field::src, s)
        .set(Field::dst, dst_id)
        .set(Field::dev, dst_id)
        .set(Field::ver, static_cast<double>(rr.version))
        .set(Field::bytes, kv_bytes(kv, model_))
        .set(Field::dur, dur);
    begin_decode(to, rr);
    if (from.id != to.id) fill_device(from.id);
  });
  return dur;
}

double RolloutPool::park(RequestId id, double delay) {
  auto& r = request(id);
  if (r.phase != Phase::decode) throw ProtocolViolation(fmt::format("request {} is not decoding", id));
  auto& d = device(r.device);
  stop_decode(d, r);
  r.req.transition(RequestState::offloaded);
  r.phase = Phase::moving;
  const Tokens kv = r.req.input_tokens + r.req.generated_tokens;
  CacheEntry entry{id, kv, {false, d.id}, r.version};
  const double dur = offload_to_host(entry, model_, net_, &stats_);
  r.reserved = kv;
  d.static_kv += kv;
  const DeviceId dev = d.id;
  r.has_event = true;
  r.event = engine_.schedule_in(delay + dur, TraceKind::offload_done, [this, id, dev, dur, kv] {
    auto& rr = request(id);
    auto& dd = device(dev);
    rr.has_event = false;
    dd.static_kv -= kv;
    rr.reserved = 0;
    release_slot(dd, rr);
    rr.phase = Phase::host;
    --active_;
    queues_[rr.version].resume.push_back(id);
    ++queued_total_;
    engine_.trace()
        .emit(engine_.now(), TraceKind::offload_done)
        .set(Field::req, static_cast<double>(id))
        .set(Field::dev, dev)
        .set(Field::ver, static_cast<double>(rr.version))
        .set(Field::bytes, kv_bytes(kv, model_))
        .set(Field::dur, dur);
    fill_device(dev);
    fill();
  });
  return dur;
}

void RolloutPool::check_overflow(PoolDevice& d) {
  const Tokens kv = device_kv(d);
  if (kv <= kv_capacity_) return;
  std::vector<CacheEntry> entries;
  Tokens pinned = 0;
  for (RequestId id : d.residents) {
    const auto& r = request(id);
    if (r.phase == Phase::decode) {
      entries.push_back({id, kv_of(r), {false, d.id}, r.version});
    } else {
      pinned += kv_of(r);
    }
  }
  if (entries.empty()) return;
  const Tokens budget = std::max<Tokens>(0, kv_capacity_ - pinned);
  for (RequestId id : plan_offload(entries, budget)) park(id, 0.0);
}

void RolloutPool::abort(RequestId id) {
  auto& r = request(id);
  switch (r.phase) {
    case Phase::queued: {
      auto& q = queues_[r.version];
      for (auto* dq : {&q.resume, &q.pending}) {
        auto it = std::find(dq->begin(), dq->end(), id);
        if (it != dq->end()) {
          dq->erase(it);
          --queued_total_;
          break;
        }
      }
      break;
    }
    case Phase::lane:
    case Phase::prefill: {
      requeue(id);
      auto& q = queues_[r.version];
      auto& src = r.needs_reprefill ? q.resume : q.pending;
      src.erase(std::find(src.begin(), src.end(), id));
      --queued_total_;
      break;
    }
    case Phase::decode: {
      auto& d = device(r.device);
      stop_decode(d, r);
      release_slot(d, r);
      --active_;
      break;
    }
    default:
      throw ProtocolViolation(fmt::format("request {} cannot be aborted while moving", id));
  }
  r.req.transition(RequestState::discarded);
  r.phase = Phase::done;
  engine_.trace()
      .emit(engine_.now(), TraceKind::discard)
      .set(Field::req, static_cast<double>(id))
      .set(Field::prompt, static_cast<double>(r.req.prompt_id))
      .set(Field::ver, static_cast<double>(r.version))
      .set(Field::in, static_cast<double>(r.req.input_tokens))
      .set(Field::out, static_cast<double>(r.req.generated_tokens))
      .set(Field::len, static_cast<double>(r.req.true_output_tokens));
}

std::vector<LiveRequest> RolloutPool::live() const {
  std::vector<LiveRequest> out;
  for (const auto& d : devices_) {
    for (RequestId id : d.residents) {
      const auto& r = request(id);
      if (r.phase != Phase::decode || r.device != d.id) continue;
      out.push_back({id, r.version, d.id, r.origin, kv_of(r)});
    }
  }
  return out;
}

std::vector<DeviceCapacity> RolloutPool::capacity() const {
  std::vector<DeviceCapacity> out;
  for (const auto& d : devices_) {
    out.push_back({d.id, d.group, d.free_slots, std::max<Tokens>(0, kv_capacity_ - device_kv(d))});
  }
  return out;
}

std::int64_t RolloutPool::queued(Version v) const {
  auto it = queues_.find(v);
  if (it == queues_.end()) return 0;
  return static_cast<std::int64_t>(it->second.resume.size() + it->second.pending.size());
}

std::vector<RequestId> RolloutPool::queued_ids(Version v) const {
  std::vector<RequestId> out;
  auto it = queues_.find(v);
  if (it == queues_.end()) return out;
  out.assign(it->second.resume.begin(), it->second.resume.end());
  out.insert(out.end(), it->second.pending.begin(), it->second.pending.end());
  return out;
}

std::vector<RequestId> RolloutPool::unfinished() const {
  std::vector<RequestId> out;
  for (const auto& r : requests_) {
    if (r.version >= 0 && r.phase != Phase::done) out.push_back(r.req.request_id);
  }
  return out;
}

}  // namespace dorasim
