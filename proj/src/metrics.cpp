#include "dorasim/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <set>

#include <fmt/format.h>

#include "dorasim/errors.hpp"

namespace dorasim {

namespace {

const char* paradigm_name(std::int64_t k) {
  static const char* names[] = {"synchronous", "one_step_off_policy", "partial_rollout", "dora",
                                "replication"};
  return k >= 0 && k < 5 ? names[k] : "unknown";
}

struct Interval {
  double lo, hi;
  std::int64_t dev;
};

/// Per-request open/close bookkeeping for rollout activity and prefill.
struct Activity {
  std::vector<Interval> active;   // slot doing work (prefill or decode)
  std::vector<Interval> prefill;  // prefill running
  std::vector<Interval> train;
  std::vector<double> step_end;

  explicit Activity(const Trace& trace) {
    std::map<std::int64_t, std::pair<double, std::int64_t>> open_active, open_prefill;
    std::map<std::int64_t, double> open_train;
    auto close = [](auto& open, std::int64_t req, double t, std::vector<Interval>& out) {
      auto it = open.find(req);
      if (it == open.end()) return;
      if (t > it->second.first) out.push_back({it->second.first, t, it->second.second});
      open.erase(it);
    };
    for (const auto& r : trace.records()) {
      switch (r.kind) {
        case TraceKind::prefill_start:
          open_prefill[r.id(Field::req)] = {r.t, r.id(Field::dev)};
          open_active.try_emplace(r.id(Field::req), r.t, r.id(Field::dev));
          break;
        case TraceKind::migration_done:
        case TraceKind::onload_done:
          open_active.try_emplace(r.id(Field::req), r.t, r.id(Field::dev));
          break;
        case TraceKind::prefill_done:
          close(open_prefill, r.id(Field::req), r.t, prefill);
          break;
        case TraceKind::request_complete:
        case TraceKind::preempt:
          close(open_prefill, r.id(Field::req), r.t, prefill);
          close(open_active, r.id(Field::req), r.t, active);
          break;
        case TraceKind::train_start:
          open_train[r.id(Field::step)] = r.t;
          break;
        case TraceKind::train_done: {
          auto it = open_train.find(r.id(Field::step));
          if (it != open_train.end()) {
            train.push_back({it->second, r.t, -1});
            open_train.erase(it);
          }
          step_end.push_back(r.t);
          break;
        }
        default: break;
      }
    }
    double end = trace.size() ? trace.records().back().t : 0.0;
    for (const auto& [req, o] : open_active) if (end > o.first) active.push_back({o.first, end, o.second});
    for (const auto& [req, o] : open_prefill) if (end > o.first) prefill.push_back({o.first, end, o.second});
    for (const auto& [s, t0] : open_train) if (end > t0) train.push_back({t0, end, -1});
  }
};

/// Sweep over the union of three interval families; returns per-step
/// measures of {active, prefill, train, active & !train}.
std::vector<std::array<double, 4>> sweep(const Activity& a, const std::vector<double>& bounds) {
  struct Edge {
    double t;
    int family;
    int delta;
  };
  std::vector<Edge> edges;
  edges.reserve(2 * (a.active.size() + a.prefill.size() + a.train.size()));
  auto add = [&](const std::vector<Interval>& v, int fam) {
    for (const auto& i : v) {
      edges.push_back({i.lo, fam, +1});
      edges.push_back({i.hi, fam, -1});
    }
  };
  add(a.active, 0);
  add(a.prefill, 1);
  add(a.train, 2);
  std::sort(edges.begin(), edges.end(), [](const Edge& x, const Edge& y) { return x.t < y.t; });

  const std::size_t n_steps = bounds.size() - 1;
  std::vector<std::array<double, 4>> out(n_steps, {0, 0, 0, 0});
  int depth[3] = {0, 0, 0};
  double prev = bounds.front();
  std::size_t step = 0;
  auto accumulate = [&](double from, double to) {
    while (from < to && step < n_steps) {
      const double seg_end = std::min(to, bounds[step + 1]);
      const double len = seg_end - from;
      if (len > 0) {
        if (depth[0] > 0) out[step][0] += len;
        if (depth[1] > 0) out[step][1] += len;
        if (depth[2] > 0) out[step][2] += len;
        if (depth[0] > 0 && depth[2] == 0) out[step][3] += len;
      }
      from = seg_end;
      if (from >= bounds[step + 1]) ++step;
    }
  };
  for (const auto& e : edges) {
    if (e.t > prev) {
      accumulate(prev, e.t);
      prev = e.t;
    }
    depth[e.family] += e.delta;
  }
  return out;
}

}  // namespace

RunInfo run_info(const Trace& trace) {
  for (const auto& r : trace.records()) {
    if (r.kind != TraceKind::run_header) continue;
    RunInfo info;
    info.paradigm = paradigm_name(r.id(Field::paradigm));
    info.group_size = static_cast<int>(r.id(Field::g));
    info.staleness_k = static_cast<int>(r.id(Field::k));
    info.tbs = r.id(Field::tbs);
    info.devices = static_cast<int>(r.id(Field::devices));
    info.train_devices = static_cast<int>(r.id(Field::train_devices));
    info.slots = static_cast<int>(r.id(Field::slots));
    info.seed = static_cast<std::uint64_t>(r.at(Field::seed));
    return info;
  }
  throw PreconditionError("trace has no run_header record");
}

std::vector<StepRecord> step_decomposition(const Trace& trace) {
  Activity act(trace);
  std::vector<StepRecord> steps(act.step_end.size());
  if (steps.empty()) return steps;
  std::vector<double> bounds{0.0};
  bounds.insert(bounds.end(), act.step_end.begin(), act.step_end.end());
  const auto m = sweep(act, bounds);
  for (std::size_t s = 0; s < steps.size(); ++s) {
    auto& st = steps[s];
    st.step = static_cast<std::int64_t>(s);
    st.t_start = bounds[s];
    st.t_end = bounds[s + 1];
    st.t_total = st.t_end - st.t_start;
    st.t_prefill = m[s][1];
    st.t_decode = m[s][0] - m[s][1];
    st.t_train = m[s][2];
    st.t_rollout_only = m[s][3];
  }
  // Event-attributed counters: a record at time t belongs to the first step
  // whose end is >= t; trained records carry their own step.
  auto step_of = [&](double t) {
    auto it = std::lower_bound(act.step_end.begin(), act.step_end.end(), t);
    return it == act.step_end.end() ? steps.size() : static_cast<std::size_t>(it - act.step_end.begin());
  };
  for (const auto& r : trace.records()) {
    if (r.kind == TraceKind::trained) {
      const auto s = static_cast<std::size_t>(r.id(Field::step));
      if (s >= steps.size()) continue;
      steps[s].trained.emplace_back(r.id(Field::req), r.id(Field::ver));
      steps[s].trained_tokens += r.id(Field::in) + r.id(Field::out);
      steps[s].max_staleness = std::max(steps[s].max_staleness, r.id(Field::tver) - r.id(Field::ver));
    } else if (r.kind == TraceKind::discard) {
      const auto s = step_of(r.t);
      if (s < steps.size()) ++steps[s].discarded;
    } else if (r.kind == TraceKind::reprefill) {
      const auto s = step_of(r.t);
      if (s < steps.size()) steps[s].reprefill_tokens += r.id(Field::tokens);
    }
  }
  return steps;
}

BubbleReport compute_bubbles(const Trace& trace, std::int64_t step) {
  Activity act(trace);
  if (step < 0 || static_cast<std::size_t>(step) >= act.step_end.size()) {
    throw PreconditionError(fmt::format("step {} not in trace", step));
  }
  const double lo = step == 0 ? 0.0 : act.step_end[static_cast<std::size_t>(step - 1)];
  const double hi = act.step_end[static_cast<std::size_t>(step)];
  std::map<std::int64_t, std::vector<Interval>> per_dev;
  for (const auto& i : act.active) {
    const double a = std::max(i.lo, lo), b = std::min(i.hi, hi);
    if (b > a) per_dev[i.dev].push_back({a, b, i.dev});
  }
  BubbleReport rep;
  rep.step = step;
  double rollout_end = lo;
  std::map<std::int64_t, double> last;
  for (const auto& [d, v] : per_dev) {
    double l = lo;
    for (const auto& i : v) l = std::max(l, i.hi);
    last[d] = l;
    rollout_end = std::max(rollout_end, l);
  }
  for (const auto& [d, v] : per_dev) {
    // occupancy sweep up to the device's last completion
    std::vector<std::pair<double, int>> edges;
    for (const auto& i : v) {
      edges.emplace_back(i.lo, +1);
      edges.emplace_back(i.hi, -1);
    }
    std::sort(edges.begin(), edges.end());
    int n = 0, peak = 0;
    for (const auto& e : edges) peak = std::max(peak, n += e.second);
    n = 0;
    double intra = 0, prev = edges.front().first;
    for (const auto& e : edges) {
      intra += (peak - n) * (e.first - prev);
      prev = e.first;
      n += e.second;
    }
    DeviceBubble b{d, intra, rollout_end - last[d]};
    rep.total_intra += b.intra;
    rep.total_inter += b.inter;
    rep.devices.push_back(b);
  }
  return rep;
}

Throughput throughput(const Trace& trace) {
  Throughput t;
  bool any = false;
  for (const auto& r : trace.records()) {
    if (r.kind == TraceKind::trained) {
      t.consumed_tokens += r.id(Field::in) + r.id(Field::out);
      any = true;
    } else if (r.kind == TraceKind::request_complete) {
      t.produced_tokens += r.id(Field::in) + r.id(Field::out);
    }
  }
  if (!any) throw PreconditionError("throughput of a run with no trained trajectories");
  t.wall = trace.records().back().t;
  if (!(t.wall > 0)) throw PreconditionError("throughput over zero wall time");
  t.consumed = static_cast<double>(t.consumed_tokens) / t.wall;
  t.produced = static_cast<double>(t.produced_tokens) / t.wall;
  return t;
}

OverheadFractions overhead_fractions(const Trace& trace) {
  OverheadFractions o;
  for (const auto& r : trace.records()) {
    if (r.kind != TraceKind::rebalance) continue;
    ++o.rebalances;
    o.lb_seconds += r.at(Field::lb);
    o.xfer_seconds += r.at(Field::xfer);
    o.free_seconds += r.at(Field::free);
  }
  o.wall = trace.size() ? trace.records().back().t : 0.0;
  if (o.wall > 0) {
    o.load_balancing = o.lb_seconds / o.wall;
    o.request_transfer = o.xfer_seconds / o.wall;
    o.free_cache = o.free_seconds / o.wall;
  }
  return o;
}

AuditReport audit(const Trace& trace) {
  const RunInfo info = run_info(trace);
  AuditReport a;
  a.paradigm = info.paradigm;
  a.staleness_k = info.staleness_k;
  std::map<std::int64_t, std::set<std::int64_t>> seg_versions;
  std::map<std::int64_t, std::map<std::int64_t, int>> step_prompts;  // step -> prompt -> members
  std::set<std::int64_t> trained_reqs;
  for (const auto& r : trace.records()) {
    switch (r.kind) {
      case TraceKind::prefill_start:
      case TraceKind::migration_done:
      case TraceKind::onload_done:
        seg_versions[r.id(Field::req)].insert(r.id(Field::ver));
        break;
      case TraceKind::discard:
        ++a.c2_dropped;
        break;
      case TraceKind::trained:
        a.max_staleness = std::max(a.max_staleness, r.id(Field::tver) - r.id(Field::ver));
        ++step_prompts[r.id(Field::step)][r.id(Field::prompt)];
        if (!trained_reqs.insert(r.id(Field::req)).second) a.group_integrity = false;
        break;
      default: break;
    }
  }
  for (const auto& [req, vs] : seg_versions) {
    if (vs.size() > 1) ++a.c1_violations;
  }
  std::set<std::int64_t> seen_prompts;
  for (const auto& [step, prompts] : step_prompts) {
    for (const auto& [p, n] : prompts) {
      if (n != info.group_size || !seen_prompts.insert(p).second) a.group_integrity = false;
    }
  }
  if (!a.group_integrity) a.problems.push_back("group integrity: a prompt group was split or repeated");
  const bool claims_c1 = info.paradigm != "partial_rollout";
  const bool claims_c2 = info.paradigm != "replication";
  if (claims_c1 && a.c1_violations > 0) {
    a.problems.push_back(fmt::format("C1: {} trajectories span several versions", a.c1_violations));
  }
  if (claims_c2 && a.c2_dropped > 0) {
    a.problems.push_back(fmt::format("C2: {} trajectories dropped", a.c2_dropped));
  }
  std::int64_t bound = -1;
  if (info.paradigm == "synchronous") bound = 0;
  if (info.paradigm == "one_step_off_policy") bound = 1;
  if (info.paradigm == "dora") bound = info.staleness_k;
  if (bound >= 0 && a.max_staleness > bound) {
    a.problems.push_back(fmt::format("C3: staleness {} exceeds bound {}", a.max_staleness, bound));
  }
  return a;
}

RunSummary summarize(const Trace& trace, int warmup_steps) {
  RunSummary s;
  s.info = run_info(trace);
  const auto steps = step_decomposition(trace);
  s.steps = static_cast<std::int64_t>(steps.size());
  double total = 0, rollout_only = 0;
  std::int64_t measured = 0;
  for (const auto& st : steps) {
    s.reprefill_tokens += st.reprefill_tokens;
    if (st.step < warmup_steps && static_cast<int>(steps.size()) > warmup_steps) continue;
    total += st.t_total;
    rollout_only += st.t_rollout_only;
    ++measured;
  }
  if (measured > 0) s.mean_step_time = total / static_cast<double>(measured);
  if (total > 0) s.rollout_only_fraction = rollout_only / total;
  s.tput = throughput(trace);
  s.overheads = overhead_fractions(trace);
  s.audit = audit(trace);
  double trained_len = 0, discarded_len = 0;
  std::int64_t n_trained = 0;
  for (const auto& r : trace.records()) {
    if (r.kind == TraceKind::trained) {
      trained_len += r.at(Field::out);
      ++n_trained;
    } else if (r.kind == TraceKind::discard) {
      discarded_len += r.at(Field::len);
      ++s.discarded;
    }
  }
  if (n_trained) s.mean_trained_length = trained_len / static_cast<double>(n_trained);
  if (s.discarded) s.mean_discarded_length = discarded_len / static_cast<double>(s.discarded);
  return s;
}

void write_steps_csv(const std::vector<StepRecord>& steps, std::ostream& out) {
  out << "step,t_prefill,t_decode,t_train,t_rollout_only,t_total,trained,discarded,reprefill_tokens,"
         "max_staleness\n";
  for (const auto& s : steps) {
    out << fmt::format("{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{},{},{},{}\n", s.step, s.t_prefill, s.t_decode,
                       s.t_train, s.t_rollout_only, s.t_total, s.trained.size(), s.discarded,
                       s.reprefill_tokens, s.max_staleness);
  }
}

void write_bubbles_csv(const Trace& trace, const std::vector<StepRecord>& steps, std::ostream& out) {
  out << "step,device,intra,inter\n";
  for (const auto& s : steps) {
    const auto b = compute_bubbles(trace, s.step);
    for (const auto& d : b.devices) {
      out << fmt::format("{},{},{:.6f},{:.6f}\n", s.step, d.device, d.intra, d.inter);
    }
  }
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error(fmt::format("cannot write {}", tmp.string()));
    f << content;
    if (!f.flush()) throw std::runtime_error(fmt::format("short write to {}", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace dorasim
