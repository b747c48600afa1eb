#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <queue>
#include <string>
#include <string_view>
#include <vector>

namespace dorasim {

/// Record kinds. The first block are engine events; the rest are
/// annotations controllers append for audit tooling.
enum class TraceKind : std::uint8_t {
  dispatch,
  prefill_done,
  decode_tick_batch,
  request_complete,
  batch_ready,
  train_done,
  weight_sync_done,
  rebalance_trigger,
  migration_done,
  offload_done,
  // annotations
  run_header,
  prefill_start,
  onload_done,
  preempt,
  train_start,
  trained,
  discard,
  reprefill,
  queue,
  rebalance,
  partition,
  window_advance,
  run_end,
  count_
};

std::string_view to_string(TraceKind k);
std::optional<TraceKind> trace_kind_from_string(std::string_view s);

/// Payload keys. Stored as small enums so records stay allocation-free.
enum class Field : std::uint8_t {
  req, prompt, dev, group, ver, tver, step, in, out, len, tokens, n, bytes, dur, reward,
  nver, src, dst, trigger, flashed, moved, injected_latest, injected_legacy, lb, xfer, free,
  depth, oldest, newest, pending, inflight, queued, before, after, g, k, tbs, paradigm,
  devices, train_devices, slots, seed, blocked,
  count_
};

std::string_view to_string(Field f);
std::optional<Field> field_from_string(std::string_view s);

struct TraceRecord {
  static constexpr std::size_t kMaxFields = 10;

  double t = 0;
  TraceKind kind = TraceKind::run_header;
  std::uint8_t n_fields = 0;
  std::array<Field, kMaxFields> keys{};
  std::array<double, kMaxFields> values{};

  TraceRecord& set(Field f, double v);
  std::optional<double> get(Field f) const;
  /// Throws std::out_of_range when absent.
  double at(Field f) const;
  std::int64_t id(Field f) const { return static_cast<std::int64_t>(at(f)); }
};

/// Append-only, time-ordered record list.
class Trace {
 public:
  TraceRecord& emit(double t, TraceKind kind);
  const std::vector<TraceRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  void reserve(std::size_t n) { records_.reserve(n); }

  std::size_t count(TraceKind kind) const;

 private:
  std::vector<TraceRecord> records_;
};

/// One JSON object per line: {"t":..,"kind":"..","payload":{..}} with keys
/// in a fixed order so the byte stream is hashable.
std::string to_json_line(const TraceRecord& r);
void write_jsonl(const Trace& trace, std::ostream& out);
Trace read_jsonl(std::istream& in);
/// FNV-1a over the JSON-lines serialization.
std::uint64_t trace_hash(const Trace& trace);

using EventId = std::uint64_t;

struct Event {
  double time = 0;
  EventId seq = 0;
  TraceKind kind = TraceKind::dispatch;
  std::function<void()> action;
};

/// Single-threaded virtual-time event loop. Events run in (time, seq) order.
class Engine {
 public:
  double now() const { return now_; }

  /// Throws ProtocolViolation when `time` lies before the current clock.
  EventId schedule(double time, TraceKind kind, std::function<void()> action);
  EventId schedule_in(double delay, TraceKind kind, std::function<void()> action) {
    return schedule(now_ + delay, kind, std::move(action));
  }
  /// Cancelled events are dropped without running.
  void cancel(EventId id);
  bool pending(EventId id) const;

  /// Runs events until `stop()` holds. Throws DeadlockError when the queue
  /// drains first; the message includes the reporter's diagnostic.
  void run_until(const std::function<bool()>& stop);

  void set_deadlock_reporter(std::function<std::string()> reporter) {
    reporter_ = std::move(reporter);
  }

  Trace& trace() { return trace_; }
  const Trace& trace() const { return trace_; }
  std::size_t queued_events() const { return queue_.size(); }
  std::uint64_t executed_events() const { return executed_; }

 private:
  struct Later {
    bool operator()(const Event& a, const Event& b) const {
      return a.time != b.time ? a.time > b.time : a.seq > b.seq;
    }
  };

  double now_ = 0;
  EventId next_seq_ = 0;
  std::uint64_t executed_ = 0;
  std::priority_queue<Event, std::vector<Event>, Later> queue_;
  std::vector<char> cancelled_;
  std::vector<char> done_;
  std::function<std::string()> reporter_;
  Trace trace_;
};

}  // namespace dorasim
