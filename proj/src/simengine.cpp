#include "dorasim/simengine.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>

#include <fmt/format.h>
#include <json.hpp>

#include "dorasim/errors.hpp"

namespace dorasim {

namespace {

constexpr std::array<std::string_view, static_cast<std::size_t>(TraceKind::count_)> kKindNames{
    "dispatch",      "prefill_done",   "decode_tick_batch", "request_complete",
    "batch_ready",   "train_done",     "weight_sync_done",  "rebalance_trigger",
    "migration_done", "offload_done",  "run_header",        "prefill_start",
    "onload_done",   "preempt",        "train_start",       "trained",
    "discard",       "reprefill",      "queue",             "rebalance",
    "partition",     "window_advance", "run_end"};

constexpr std::array<std::string_view, static_cast<std::size_t>(Field::count_)> kFieldNames{
    "req",     "prompt",  "dev",     "group",    "ver",       "tver",
    "step",    "in",      "out",     "len",      "tokens",    "n",
    "bytes",   "dur",     "reward",  "nver",     "src",       "dst",
    "trigger", "flashed", "moved",   "injected_latest", "injected_legacy", "lb",
    "xfer",    "free",    "depth",   "oldest",   "newest",    "pending",
    "inflight", "queued", "before",  "after",    "g",         "k",
    "tbs",     "paradigm", "devices", "train_devices", "slots", "seed",
    "blocked"};

void append_number(std::string& out, double v) {
  if (std::isfinite(v) && std::floor(v) == v && std::abs(v) < 9.0e15) {
    fmt::format_to(std::back_inserter(out), "{}", static_cast<std::int64_t>(v));
  } else {
    fmt::format_to(std::back_inserter(out), "{}", v);
  }
}

}  // namespace

std::string_view to_string(TraceKind k) { return kKindNames.at(static_cast<std::size_t>(k)); }

std::optional<TraceKind> trace_kind_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i) {
    if (kKindNames[i] == s) return static_cast<TraceKind>(i);
  }
  return std::nullopt;
}

std::string_view to_string(Field f) { return kFieldNames.at(static_cast<std::size_t>(f)); }

std::optional<Field> field_from_string(std::string_view s) {
  for (std::size_t i = 0; i < kFieldNames.size(); ++i) {
    if (kFieldNames[i] == s) return static_cast<Field>(i);
  }
  return std::nullopt;
}

TraceRecord& TraceRecord::set(Field f, double v) {
  for (std::uint8_t i = 0; i < n_fields; ++i) {
    if (keys[i] == f) {
      values[i] = v;
      return *this;
    }
  }
  if (n_fields == kMaxFields) throw std::length_error("trace record payload full");
  keys[n_fields] = f;
  values[n_fields] = v;
  ++n_fields;
  return *this;
}

std::optional<double> TraceRecord::get(Field f) const {
  for (std::uint8_t i = 0; i < n_fields; ++i) {
    if (keys[i] == f) return values[i];
  }
  return std::nullopt;
}

double TraceRecord::at(Field f) const {
  if (auto v = get(f)) return *v;
  throw std::out_of_range(fmt::format("{} record has no field '{}'", to_string(kind), to_string(f)));
}

TraceRecord& Trace::emit(double t, TraceKind kind) {
  if (!records_.empty() && t < records_.back().t) {
    throw ProtocolViolation(
        fmt::format("trace time went backwards: {} after {}", t, records_.back().t));
  }
  auto& r = records_.emplace_back();
  r.t = t;
  r.kind = kind;
  return r;
}

std::size_t Trace::count(TraceKind kind) const {
  std::size_t n = 0;
  for (const auto& r : records_) n += r.kind == kind;
  return n;
}

std::string to_json_line(const TraceRecord& r) {
  std::string out = "{\"t\":";
  append_number(out, r.t);
  out += ",\"kind\":\"";
  out += to_string(r.kind);
  out += "\",\"payload\":{";
  for (std::uint8_t i = 0; i < r.n_fields; ++i) {
    if (i) out += ',';
    out += '"';
    out += to_string(r.keys[i]);
    out += "\":";
    append_number(out, r.values[i]);
  }
  out += "}}";
  return out;
}

void write_jsonl(const Trace& trace, std::ostream& out) {
  for (const auto& r : trace.records()) out << to_json_line(r) << '\n';
}

Trace read_jsonl(std::istream& in) {
  Trace trace;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      throw ConfigError(fmt::format("trace line {}: not a JSON object", lineno));
    }
    auto kind = trace_kind_from_string(j.value("kind", std::string{}));
    if (!kind) throw ConfigError(fmt::format("trace line {}: unknown kind", lineno));
    auto& rec = trace.emit(j.at("t").get<double>(), *kind);
    for (const auto& [key, value] : j.at("payload").items()) {
      auto f = field_from_string(key);
      if (!f) throw ConfigError(fmt::format("trace line {}: unknown field '{}'", lineno, key));
      rec.set(*f, value.get<double>());
    }
  }
  return trace;
}

std::uint64_t trace_hash(const Trace& trace) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& r : trace.records()) {
    std::string line = to_json_line(r);
    line += '\n';
    for (unsigned char c : line) {
      h ^= c;
      h *= 0x00000100000001b3ull;
    }
  }
  return h;
}

EventId Engine::schedule(double time, TraceKind kind, std::function<void()> action) {
  if (!(time >= now_)) {
    throw ProtocolViolation(fmt::format("event {} scheduled at t={} before clock {}",
                                        to_string(kind), time, now_));
  }
  const EventId id = next_seq_++;
  cancelled_.push_back(0);
  done_.push_back(0);
  queue_.push(Event{time, id, kind, std::move(action)});
  return id;
}

void Engine::cancel(EventId id) {
  if (id < cancelled_.size()) cancelled_[id] = 1;
}

bool Engine::pending(EventId id) const {
  return id < cancelled_.size() && !cancelled_[id] && !done_[id];
}

void Engine::run_until(const std::function<bool()>& stop) {
  while (!stop()) {
    // skip cancelled heads so an all-cancelled queue counts as empty
    while (!queue_.empty() && cancelled_[queue_.top().seq]) queue_.pop();
    if (queue_.empty()) {
      std::string why = reporter_ ? reporter_() : std::string("no diagnostic available");
      throw DeadlockError(fmt::format("deadlock at t={}: event queue empty before stop condition; {}",
                                      now_, why));
    }
    Event ev = std::move(const_cast<Event&>(queue_.top()));
    queue_.pop();
    now_ = ev.time;
    done_[ev.seq] = 1;
    ++executed_;
    if (ev.action) ev.action();
  }
}

}  // namespace dorasim
