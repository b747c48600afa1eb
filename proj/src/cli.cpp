#include "dorasim/cli.hpp"

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "dorasim/errors.hpp"
#include "dorasim/grpo.hpp"

namespace dorasim {

using json = nlohmann::ordered_json;

namespace {

RunOutcome run_one(const SimConfig& cfg, bool keep_trace) {
  RunOutcome o;
  o.cfg = cfg;
  try {
    o.result = run_paradigm(cfg);
    o.hash = trace_hash(o.result.trace);
    o.summary = summarize(o.result.trace, cfg.stop.warmup_steps);
    if (!o.summary.audit.passed()) o.exit_code = exit_audit;
  } catch (const ConfigError& e) {
    o.exit_code = exit_config;
    o.error = e.what();
  } catch (const DeadlockError& e) {
    o.exit_code = exit_deadlock;
    o.error = e.what();
  } catch (const std::exception& e) {
    o.exit_code = exit_audit;
    o.error = fmt::format("simulation failed: {}", e.what());
  }
  if (!keep_trace) o.result.trace = Trace{};
  return o;
}

json summary_json(const RunOutcome& r) {
  const auto& s = r.summary;
  json a = {{"c1_violations", s.audit.c1_violations},
            {"c2_dropped", s.audit.c2_dropped},
            {"max_staleness", s.audit.max_staleness},
            {"group_integrity", s.audit.group_integrity},
            {"passed", s.audit.passed()},
            {"problems", s.audit.problems}};
  return {{"paradigm", to_string(r.cfg.paradigm.kind)},
          {"seed", r.cfg.seed},
          {"trace_hash", fmt::format("{:016x}", r.hash)},
          {"steps", s.steps},
          {"mean_step_time", s.mean_step_time},
          {"rollout_only_fraction", s.rollout_only_fraction},
          {"throughput_tokens_per_s", s.tput.consumed},
          {"produced_tokens_per_s", s.tput.produced},
          {"wall_time", s.tput.wall},
          {"overheads",
           {{"load_balancing", s.overheads.load_balancing},
            {"request_transfer", s.overheads.request_transfer},
            {"free_cache", s.overheads.free_cache},
            {"load_balancing_seconds", s.overheads.lb_seconds},
            {"request_transfer_seconds", s.overheads.xfer_seconds},
            {"free_cache_seconds", s.overheads.free_seconds},
            {"rebalances", s.overheads.rebalances}}},
          {"reprefill_tokens", s.reprefill_tokens},
          {"discarded", s.discarded},
          {"mean_trained_length", s.mean_trained_length},
          {"mean_discarded_length", s.mean_discarded_length},
          {"audit", a}};
}

std::string csv_xy(const std::vector<std::pair<std::string, double>>& rows) {
  std::string s = "x,y\n";
  for (const auto& [x, y] : rows) s += fmt::format("{},{:.6f}\n", x, y);
  return s;
}

std::filesystem::path output_dir(const RunConfig& rc, const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("DORASIM_OUT"); env && *env) return env;
  return rc.output_dir;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Common {
  std::string config;
  std::string out;
  std::string paradigms;
  std::vector<std::string> params;
  std::int64_t seed = -1;
  int jobs = 1;
  bool strict = false;
};

RunConfig load(const Common& c, const std::vector<std::string>& extra = {}) {
  std::vector<std::string> overrides = c.params;
  overrides.insert(overrides.end(), extra.begin(), extra.end());
  if (c.seed >= 0) overrides.push_back(fmt::format("seed={}", c.seed));
  if (!c.paradigms.empty()) {
    json list = json::array();
    for (const auto& p : split_list(c.paradigms)) list.push_back(p);
    overrides.push_back("paradigms=" + list.dump());
  }
  json base = read_config_source(c.config);
  if (!c.paradigms.empty() && base.is_object()) {
    base.erase("paradigm");
    base.erase("paradigms");
  }
  for (const auto& o : overrides) {
    if (o.rfind("paradigm=", 0) == 0) base.erase("paradigms");
    if (o.rfind("paradigms=", 0) == 0) base.erase("paradigm");
    apply_override(base, o);
  }
  return parse_config(base);
}

int cmd_run(const Common& c, std::ostream& out, std::ostream& err) {
  const RunConfig rc = load(c);
  const auto outcome = run_one(rc.sim, true);
  if (outcome.exit_code == exit_deadlock || outcome.exit_code == exit_config) {
    err << outcome.error << "\n";
    return outcome.exit_code;
  }
  if (!outcome.error.empty()) {
    err << outcome.error << "\n";
    return exit_audit;
  }
  const auto dir = output_dir(rc, c.out);
  write_run_bundle(dir, rc, outcome);
  out << summary_json(outcome).dump(2) << "\n";
  if (!outcome.summary.audit.passed()) {
    for (const auto& p : outcome.summary.audit.problems) err << "audit: " << p << "\n";
    if (c.strict) return exit_audit;
  }
  return exit_ok;
}

int cmd_compare(const Common& c, std::ostream& out, std::ostream& err) {
  const RunConfig rc = load(c);
  std::vector<SimConfig> cfgs;
  for (auto k : rc.paradigms) cfgs.push_back(for_paradigm(rc, k));
  auto runs = run_many(cfgs, c.jobs, true);
  const auto dir = output_dir(rc, c.out);
  json table = json::array();
  std::vector<std::pair<std::string, double>> step_bars, tput_bars, frac_bars;
  std::string stack = "x,intra,inter\n";
  int code = exit_ok;
  // Same seed, same prompt ids: the true output length of every request
  // dispatched by more than one paradigm must agree.
  std::map<std::int64_t, std::int64_t> lengths;
  bool same_workload = true;
  for (const auto& r : runs) {
    if (!r.error.empty()) {
      err << to_string(r.cfg.paradigm.kind) << ": " << r.error << "\n";
      code = std::max(code, r.exit_code);
      continue;
    }
    write_run_bundle(dir / to_string(r.cfg.paradigm.kind), rc, r);
    table.push_back(summary_json(r));
    const std::string name = to_string(r.cfg.paradigm.kind);
    step_bars.emplace_back(name, r.summary.mean_step_time);
    tput_bars.emplace_back(name, r.summary.tput.consumed);
    frac_bars.emplace_back(name, r.summary.rollout_only_fraction);
    double intra = 0, inter = 0;
    for (const auto& s : r.result.steps) {
      const auto b = compute_bubbles(r.result.trace, s.step);
      intra += b.total_intra;
      inter += b.total_inter;
    }
    stack += fmt::format("{},{:.6f},{:.6f}\n", name, intra, inter);
    for (const auto& rec : r.result.trace.records()) {
      if (rec.kind != TraceKind::dispatch) continue;
      auto [it, fresh] = lengths.emplace(rec.id(Field::req), rec.id(Field::out));
      if (!fresh && it->second != rec.id(Field::out)) same_workload = false;
    }
    if (c.strict && !r.summary.audit.passed()) code = std::max(code, static_cast<int>(exit_audit));
  }
  json cmp = {{"config", rc.resolved}, {"identical_workload", same_workload}, {"runs", table}};
  write_file_atomic(dir / "comparison.json", cmp.dump(2) + "\n");
  write_file_atomic(dir / "step_time_bars.csv", csv_xy(step_bars));
  write_file_atomic(dir / "throughput_bars.csv", csv_xy(tput_bars));
  write_file_atomic(dir / "rollout_fraction_bars.csv", csv_xy(frac_bars));
  write_file_atomic(dir / "bubble_stack.csv", stack);
  out << fmt::format("{:<22} {:>14} {:>14} {:>16} {:>8}\n", "paradigm", "mean_step_s", "rollout_only",
                     "tokens_per_s", "audit");
  for (const auto& row : table) {
    out << fmt::format("{:<22} {:>14.2f} {:>14.3f} {:>16.1f} {:>8}\n", row["paradigm"].get<std::string>(),
                       row["mean_step_time"].get<double>(), row["rollout_only_fraction"].get<double>(),
                       row["throughput_tokens_per_s"].get<double>(),
                       row["audit"]["passed"].get<bool>() ? "ok" : "FAIL");
  }
  return code;
}

int cmd_sweep(const Common& c, std::ostream& out, std::ostream& err) {
  if (c.params.empty()) throw ConfigError("sweep: empty grid (give at least one --param key=values)");
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  for (const auto& p : c.params) {
    const auto eq = p.find('=');
    if (eq == std::string::npos) throw ConfigError(fmt::format("sweep: '{}' is not key=values", p));
    axes.emplace_back(p.substr(0, eq), expand_grid_values(p.substr(eq + 1)));
  }
  std::vector<std::vector<std::string>> points{{}};
  for (const auto& [key, values] : axes) {
    std::vector<std::vector<std::string>> next;
    for (const auto& pt : points) {
      for (const auto& v : values) {
        auto q = pt;
        q.push_back(key + "=" + v);
        next.push_back(q);
      }
    }
    points = std::move(next);
  }
  Common base = c;
  base.params.clear();
  std::vector<SimConfig> cfgs;
  std::vector<std::size_t> point_of;
  RunConfig first;
  for (std::size_t i = 0; i < points.size(); ++i) {
    RunConfig rc = load(base, points[i]);
    if (i == 0) first = rc;
    for (auto k : rc.paradigms) {
      cfgs.push_back(for_paradigm(rc, k));
      point_of.push_back(i);
    }
  }
  auto runs = run_many(cfgs, c.jobs, false);
  std::string csv = "point";
  for (const auto& [k, v] : axes) csv += "," + k;
  csv += ",paradigm,seed,mean_step_time,rollout_only_fraction,throughput,max_staleness,c1_violations,"
         "c2_dropped,reprefill_tokens,trace_hash,status\n";
  json rows = json::array();
  std::map<std::string, double> baseline;
  int code = exit_ok;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i];
    const std::string name = to_string(r.cfg.paradigm.kind);
    std::string line = std::to_string(point_of[i]);
    json row = {{"point", point_of[i]}, {"paradigm", name}};
    for (const auto& a : points[point_of[i]]) {
      const auto eq = a.find('=');
      line += "," + a.substr(eq + 1);
      row[a.substr(0, eq)] = a.substr(eq + 1);
    }
    if (!r.error.empty()) {
      err << fmt::format("point {} {}: {}\n", point_of[i], name, r.error);
      code = std::max(code, r.exit_code);
      csv += line + fmt::format(",{},{},,,,,,,,,error\n", name, r.cfg.seed);
      continue;
    }
    const auto& s = r.summary;
    csv += line + fmt::format(",{},{},{:.6f},{:.6f},{:.3f},{},{},{},{},{:016x},{}\n", name, r.cfg.seed,
                              s.mean_step_time, s.rollout_only_fraction, s.tput.consumed,
                              s.audit.max_staleness, s.audit.c1_violations, s.audit.c2_dropped,
                              s.reprefill_tokens, r.hash, s.audit.passed() ? "ok" : "audit_failed");
    if (!baseline.count(name)) baseline[name] = s.mean_step_time;
    row["mean_step_time"] = s.mean_step_time;
    row["speedup_vs_first_point"] = s.mean_step_time > 0 ? baseline[name] / s.mean_step_time : 0.0;
    row["max_staleness"] = s.audit.max_staleness;
    row["trace_hash"] = fmt::format("{:016x}", r.hash);
    rows.push_back(row);
    if (c.strict && !s.audit.passed()) code = std::max(code, static_cast<int>(exit_audit));
  }
  const auto dir = output_dir(first, c.out);
  write_file_atomic(dir / "sweep.csv", csv);
  write_file_atomic(dir / "sweep.json", json({{"config", first.resolved}, {"rows", rows}}).dump(2) + "\n");
  out << csv;
  return code;
}

int cmd_audit(const std::string& path, bool write, const std::string& out_path, std::ostream& out,
              std::ostream& err) {
  std::ifstream f(path);
  if (!f) throw ConfigError(fmt::format("cannot open trace '{}'", path));
  const Trace trace = read_jsonl(f);
  const auto a = audit(trace);
  json j = {{"paradigm", a.paradigm},
            {"staleness_k", a.staleness_k},
            {"c1_violations", a.c1_violations},
            {"c2_dropped", a.c2_dropped},
            {"max_staleness", a.max_staleness},
            {"group_integrity", a.group_integrity},
            {"passed", a.passed()},
            {"problems", a.problems}};
  if (write) write_file_atomic(out_path, j.dump(2) + "\n");
  out << j.dump(2) << "\n";
  for (const auto& p : a.problems) err << "audit: " << p << "\n";
  return a.passed() ? exit_ok : exit_audit;
}

}  // namespace

std::vector<RunOutcome> run_many(const std::vector<SimConfig>& configs, int jobs, bool keep_traces) {
  std::vector<RunOutcome> out(configs.size());
  const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(configs.size())));
  if (workers == 1) {
    for (std::size_t i = 0; i < configs.size(); ++i) out[i] = run_one(configs[i], keep_traces);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < configs.size(); i = next++) out[i] = run_one(configs[i], keep_traces);
    });
  }
  for (auto& t : pool) t.join();
  return out;
}

void write_run_bundle(const std::filesystem::path& dir, const RunConfig& rc, const RunOutcome& run) {
  std::ostringstream trace;
  write_jsonl(run.result.trace, trace);
  write_file_atomic(dir / "trace.jsonl", trace.str());
  std::ostringstream steps;
  write_steps_csv(run.result.steps, steps);
  write_file_atomic(dir / "steps.csv", steps.str());
  std::ostringstream bubbles;
  write_bubbles_csv(run.result.trace, run.result.steps, bubbles);
  write_file_atomic(dir / "bubbles.csv", bubbles.str());

  json steps_json = json::array();
  std::vector<std::pair<std::string, double>> step_time;
  for (const auto& s : run.result.steps) {
    steps_json.push_back({{"step", s.step},
                          {"t_prefill", s.t_prefill},
                          {"t_decode", s.t_decode},
                          {"t_train", s.t_train},
                          {"t_rollout_only", s.t_rollout_only},
                          {"t_total", s.t_total},
                          {"trained", s.trained.size()},
                          {"discarded", s.discarded},
                          {"reprefill_tokens", s.reprefill_tokens},
                          {"max_staleness", s.max_staleness}});
    step_time.emplace_back(std::to_string(s.step), s.t_total);
  }
  write_file_atomic(dir / "step_time.csv", csv_xy(step_time));
  const auto& kv = run.result.kv;
  json report = {{"config", rc.resolved},
                 {"summary", summary_json(run)},
                 {"kv",
                  {{"bytes_migrated", kv.bytes_migrated},
                   {"bytes_offloaded", kv.bytes_offloaded},
                   {"migrations", kv.migrations},
                   {"offloads", kv.offloads},
                   {"reprefill_tokens", kv.reprefill_tokens}}},
                 {"steps", steps_json}};
  write_file_atomic(dir / "report.json", report.dump(2) + "\n");
}

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"dorasim: discrete-event simulator of asynchronous RL post-training"};
  app.require_subcommand(1);
  Common c;
  auto add_common = [&c](CLI::App* sub, bool with_jobs) {
    sub->add_option("--config", c.config, "config file, or preset:<name>")->required();
    sub->add_option("--seed", c.seed, "override the seed");
    sub->add_option("--paradigms", c.paradigms, "comma-separated paradigm list");
    sub->add_option("--param", c.params, "override key=value (repeatable)");
    sub->add_option("--out", c.out, "output directory (else $DORASIM_OUT, else config)");
    sub->add_flag("--strict-audit", c.strict, "exit 1 when an audit fails");
    if (with_jobs) sub->add_option("--jobs", c.jobs, "concurrent simulations")->check(CLI::PositiveNumber);
  };
  auto* run = app.add_subcommand("run", "run one simulation");
  add_common(run, false);
  auto* compare = app.add_subcommand("compare", "run several paradigms on the same workload");
  add_common(compare, true);
  auto* sweep = app.add_subcommand("sweep", "one run per grid point, e.g. --param K=1..4");
  add_common(sweep, true);

  auto* aud = app.add_subcommand("audit", "recompute constraint audits from a trace");
  std::string trace_path, audit_out;
  aud->add_option("trace", trace_path, "trace.jsonl")->required();
  aud->add_option("--out", audit_out, "also write the report here");

  auto* fix = app.add_subcommand("fixture", "write a preset config or a GRPO batch");
  std::string what, fix_preset = "paper64", fix_out;
  std::uint64_t fix_seed = 0;
  int fix_prompts = 8, fix_group = 4, fix_versions = 3;
  fix->add_option("what", what, "config | grpo")->required()->check(CLI::IsMember({"config", "grpo"}));
  fix->add_option("--preset", fix_preset, "preset for 'config'");
  fix->add_option("--seed", fix_seed, "seed for 'grpo'");
  fix->add_option("--prompts", fix_prompts, "prompts for 'grpo'")->check(CLI::PositiveNumber);
  fix->add_option("--group", fix_group, "G for 'grpo'")->check(CLI::Range(2, 64));
  fix->add_option("--versions", fix_versions, "behavior versions for 'grpo'")->check(CLI::Range(1, 8));
  fix->add_option("--out", fix_out, "output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, e2;
    const int code = app.exit(e, o, e2);
    out << o.str();
    err << e2.str();
    return code == 0 ? exit_ok : exit_config;
  }

  try {
    if (*run) return cmd_run(c, out, err);
    if (*compare) return cmd_compare(c, out, err);
    if (*sweep) return cmd_sweep(c, out, err);
    if (*aud) return cmd_audit(trace_path, !audit_out.empty(), audit_out, out, err);
    if (*fix) {
      std::string text;
      if (what == "config") {
        text = preset(fix_preset).dump(2) + "\n";
      } else {
        Rng rng(fix_seed);
        std::vector<grpo::ToyPolicy> behaviors;
        for (int v = 0; v < fix_versions; ++v) behaviors.push_back(grpo::ToyPolicy::random(8, 6, 1.0, rng));
        auto batch = grpo::sample_batch(
            behaviors, fix_prompts, fix_group, 1, 8, [&](int i) { return static_cast<Version>(i % fix_versions); },
            rng);
        grpo::score(batch, behaviors.back());
        std::ostringstream o;
        grpo::write_batch_jsonl(batch, o);
        text = o.str();
      }
      if (fix_out.empty()) {
        out << text;
      } else {
        write_file_atomic(fix_out, text);
      }
      return exit_ok;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return exit_config;
  } catch (const DeadlockError& e) {
    err << "deadlock: " << e.what() << "\n";
    return exit_deadlock;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_audit;
  }
  return exit_ok;
}

}  // namespace dorasim
