#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <json.hpp>

#include "dorasim/cli.hpp"
#include "dorasim/config.hpp"
#include "dorasim/errors.hpp"

namespace fs = std::filesystem;
using namespace dorasim;
using json = nlohmann::ordered_json;

namespace {

struct Cli {
  int code = -1;
  std::string out, err;
};

Cli cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dorasim");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream o, e;
  Cli r;
  r.code = cli_main(static_cast<int>(argv.size()), argv.data(), o, e);
  r.out = o.str();
  r.err = e.str();
  return r;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dorasim_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& s) {
  std::ofstream f(p);
  f << s;
}

// small preset trimmed to a couple of seconds of simulation
std::vector<std::string> quick() { return {"--param", "stop.n_steps=3", "--param", "workload.tbs_prompts=4",
                                           "--param", "workload.rbs_prompts=6"}; }

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST(Config, PresetsParse) {
  for (const auto& name : preset_names()) {
    const auto rc = load_config("preset:" + name);
    EXPECT_NO_THROW(rc.sim.validate()) << name;
    EXPECT_FALSE(rc.paradigms.empty());
  }
  EXPECT_EQ(load_config("preset:paper128").sim.cluster.n_devices, 128);
  EXPECT_THROW(load_config("preset:nope"), ConfigError);
}

TEST(Config, UnknownKeyNamesThePath) {
  json j = preset("small");
  j["cluster"]["n_devicez"] = 3;
  try {
    parse_config(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("cluster.n_devicez"), std::string::npos) << e.what();
  }
}

TEST(Config, IllTypedValueNamesThePath) {
  json j = preset("small");
  j["model"]["tpot"] = "fast";
  try {
    parse_config(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.tpot"), std::string::npos) << e.what();
  }
}

TEST(Config, PresetKeyIsOverridden) {
  const json j = {{"preset", "small"}, {"seed", 9}, {"cluster", {{"n_devices", 6}}}};
  const auto rc = parse_config(j);
  EXPECT_EQ(rc.sim.seed, 9u);
  EXPECT_EQ(rc.sim.cluster.n_devices, 6);
  EXPECT_EQ(rc.sim.cluster.slots, 8);  // untouched preset value
}

TEST(Config, OverridesAndAliases) {
  json j = preset("small");
  apply_override(j, "K=3");
  apply_override(j, "model.tpot=0.5");
  apply_override(j, "orchestrator.rounding=largest_remainder");
  const auto rc = parse_config(j);
  EXPECT_EQ(rc.sim.paradigm.staleness_k, 3);
  EXPECT_DOUBLE_EQ(rc.sim.model.tpot, 0.5);
}

TEST(Config, GridValues) {
  EXPECT_EQ(expand_grid_values("1..4"), (std::vector<std::string>{"1", "2", "3", "4"}));
  EXPECT_EQ(expand_grid_values("0.1,0.5"), (std::vector<std::string>{"0.1", "0.5"}));
  EXPECT_THROW(expand_grid_values("4..1"), ConfigError);
}

TEST(Config, BothParadigmKeysRejected) {
  json j = preset("small");
  j["paradigm"] = "dora";
  EXPECT_THROW(parse_config(j), ConfigError);
}

TEST(Cli, MalformedConfigExitsTwo) {
  const auto dir = scratch("malformed");
  write(dir / "bad.json", R"({"preset": "small", "workload": {"group_size": "four"}})");
  const auto r = cli({"run", "--config", (dir / "bad.json").string(), "--out", (dir / "o").string()});
  EXPECT_EQ(r.code, exit_config);
  EXPECT_NE(r.err.find("workload.group_size"), std::string::npos) << r.err;
  write(dir / "broken.json", "{ not json");
  EXPECT_EQ(cli({"run", "--config", (dir / "broken.json").string()}).code, exit_config);
  EXPECT_EQ(cli({"run"}).code, exit_config);
}

TEST(Cli, RunWritesBundle) {
  const auto dir = scratch("run");
  const auto r = cli(with({"run", "--config", "preset:small", "--paradigms", "dora", "--out", dir.string()}, quick()));
  ASSERT_EQ(r.code, exit_ok) << r.err;
  for (const char* f : {"trace.jsonl", "steps.csv", "bubbles.csv", "report.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const auto summary = json::parse(r.out);
  EXPECT_EQ(summary.at("paradigm"), "dora");
  const auto report = json::parse(slurp(dir / "report.json"));
  EXPECT_TRUE(report.contains("config"));
  EXPECT_EQ(report.at("config").at("stop").at("n_steps"), 3);

  // the audit subcommand agrees with the run
  const auto a = cli({"audit", (dir / "trace.jsonl").string()});
  EXPECT_EQ(a.code, exit_ok) << a.err;
  EXPECT_TRUE(json::parse(a.out).at("passed").get<bool>());
}

TEST(Cli, SeedChangesTheHash) {
  const auto dir = scratch("seed");
  auto run = [&](const std::string& seed) {
    const auto r = cli(with({"run", "--config", "preset:small", "--paradigms", "dora", "--seed", seed, "--out",
                             (dir / seed).string()},
                            quick()));
    EXPECT_EQ(r.code, exit_ok) << r.err;
    return json::parse(r.out).at("trace_hash").get<std::string>();
  };
  const auto a = run("1");
  EXPECT_EQ(a, run("1"));
  EXPECT_NE(a, run("2"));
}

TEST(Cli, CompareUsesOneWorkload) {
  const auto dir = scratch("compare");
  const auto r = cli(with({"compare", "--config", "preset:small", "--out", dir.string(), "--jobs", "2"}, quick()));
  ASSERT_EQ(r.code, exit_ok) << r.err;
  const auto cmp = json::parse(slurp(dir / "comparison.json"));
  EXPECT_TRUE(cmp.at("identical_workload").get<bool>());
  EXPECT_EQ(cmp.at("runs").size(), 4u);
  for (const char* p : {"synchronous", "one_step_off_policy", "partial_rollout", "dora"}) {
    EXPECT_TRUE(fs::exists(dir / p / "trace.jsonl")) << p;
  }
  for (const char* f : {"step_time_bars.csv", "throughput_bars.csv", "rollout_fraction_bars.csv", "bubble_stack.csv"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
}

TEST(Cli, SweepStalenessBound) {
  const auto dir = scratch("sweep");
  const auto r = cli(with({"sweep", "--config", "preset:small", "--paradigms", "dora", "--param", "K=2,3",
                           "--out", dir.string()},
                          quick()));
  ASSERT_EQ(r.code, exit_ok) << r.err;
  const auto j = json::parse(slurp(dir / "sweep.json"));
  ASSERT_EQ(j.at("rows").size(), 2u);
  for (const auto& row : j.at("rows")) {
    const int k = std::stoi(row.at("K").get<std::string>());
    EXPECT_LE(row.at("max_staleness").get<int>(), k);
  }
  EXPECT_TRUE(fs::exists(dir / "sweep.csv"));
}

TEST(Cli, SweepGridCartesian) {
  const auto dir = scratch("grid");
  const auto r = cli(with({"sweep", "--config", "preset:small", "--paradigms", "sync", "--param", "seed=1,2",
                           "--param", "stop.n_steps=2..3", "--out", dir.string()},
                          {"--param", "workload.tbs_prompts=4", "--param", "workload.rbs_prompts=4"}));
  ASSERT_EQ(r.code, exit_ok) << r.err;
  EXPECT_EQ(json::parse(slurp(dir / "sweep.json")).at("rows").size(), 4u);
}

TEST(Cli, EmptySweepGridIsAnError) {
  const auto r = cli({"sweep", "--config", "preset:small", "--out", scratch("empty").string()});
  EXPECT_EQ(r.code, exit_config);
}

TEST(Cli, AuditFlagsTamperedTrace) {
  const auto dir = scratch("tamper");
  ASSERT_EQ(cli(with({"run", "--config", "preset:small", "--paradigms", "dora", "--out", dir.string()}, quick())).code,
            exit_ok);
  // drop half of the trained records: completed trajectories go missing
  std::istringstream in(slurp(dir / "trace.jsonl"));
  std::string line, kept;
  int dropped = 0;
  while (std::getline(in, line)) {
    if (line.find("\"kind\":\"trained\"") != std::string::npos && dropped++ % 2 == 0) continue;
    kept += line + "\n";
  }
  ASSERT_GT(dropped, 0);
  write(dir / "tampered.jsonl", kept);
  const auto a = cli({"audit", (dir / "tampered.jsonl").string(), "--out", (dir / "audit.json").string()});
  EXPECT_EQ(a.code, exit_audit);
  EXPECT_TRUE(fs::exists(dir / "audit.json"));
  EXPECT_EQ(cli({"audit", (dir / "missing.jsonl").string()}).code, exit_config);
}

TEST(Cli, OutputDirPrecedence) {
  const auto dir = scratch("env");
  ::setenv("DORASIM_OUT", (dir / "from_env").string().c_str(), 1);
  auto r = cli(with({"run", "--config", "preset:small", "--paradigms", "sync"}, quick()));
  EXPECT_EQ(r.code, exit_ok) << r.err;
  EXPECT_TRUE(fs::exists(dir / "from_env" / "trace.jsonl"));
  r = cli(with({"run", "--config", "preset:small", "--paradigms", "sync", "--out", (dir / "flag").string()}, quick()));
  EXPECT_EQ(r.code, exit_ok);
  EXPECT_TRUE(fs::exists(dir / "flag" / "trace.jsonl"));
  ::unsetenv("DORASIM_OUT");
}

TEST(Cli, JobsDoNotChangeResults) {
  const auto a = scratch("jobs1");
  const auto b = scratch("jobs3");
  ASSERT_EQ(cli(with({"compare", "--config", "preset:small", "--jobs", "1", "--out", a.string()}, quick())).code, 0);
  ASSERT_EQ(cli(with({"compare", "--config", "preset:small", "--jobs", "3", "--out", b.string()}, quick())).code, 0);
  for (const char* p : {"synchronous", "one_step_off_policy", "partial_rollout", "dora"}) {
    EXPECT_EQ(slurp(a / p / "trace.jsonl"), slurp(b / p / "trace.jsonl")) << p;
  }
}

TEST(Cli, GrpoFixtureIsJsonl) {
  const auto r = cli({"fixture", "grpo", "--prompts", "3", "--group", "4", "--versions", "2"});
  ASSERT_EQ(r.code, exit_ok) << r.err;
  std::istringstream in(r.out);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EXPECT_NO_THROW(json::parse(line));
    ++n;
  }
  EXPECT_EQ(n, 12);
  const auto c = cli({"fixture", "config", "--preset", "paper64"});
  ASSERT_EQ(c.code, exit_ok);
  EXPECT_NO_THROW(parse_config(json::parse(c.out)));
}

TEST(Config, DistributionWithKindReplacesPreset) {
  const json j = {{"preset", "small"},
                  {"workload", {{"output", {{"kind", "point"}, {"value", 77}}}}}};
  const auto rc = parse_config(j);
  EXPECT_EQ(rc.resolved.at("workload").at("output").size(), 2u);
  EXPECT_EQ(rc.resolved.at("workload").at("group_size"), 4);
}

TEST(Config, ShippedFilesParse) {
  int n = 0;
  for (const auto& e : fs::directory_iterator(fs::path(DORASIM_SOURCE_DIR) / "config")) {
    if (e.path().extension() != ".json" || e.path().filename() == "schema.json") continue;
    EXPECT_NO_THROW(load_config(e.path().string())) << e.path();
    ++n;
  }
  EXPECT_GE(n, 3);
  EXPECT_EQ(load_config((fs::path(DORASIM_SOURCE_DIR) / "config" / "paper64.json").string()).resolved,
            load_config("preset:paper64").resolved);
}

namespace {

// Every key of `j` is declared under `schema`'s properties, recursively.
void covered(const json& j, const json& schema, const json& root, const std::string& path) {
  const json* s = &schema;
  if (s->contains("$ref")) {
    const auto ref = s->at("$ref").get<std::string>();  // "#/$defs/name"
    s = &root.at("$defs").at(ref.substr(ref.rfind('/') + 1));
  }
  if (!j.is_object()) return;
  if (s->contains("oneOf")) {
    bool any = false;
    for (const auto& alt : s->at("oneOf")) {
      bool all = true;
      for (const auto& [k, v] : j.items()) all = all && alt.at("properties").contains(k);
      any = any || all;
    }
    EXPECT_TRUE(any) << path;
    return;
  }
  for (const auto& [k, v] : j.items()) {
    ASSERT_TRUE(s->contains("properties") && s->at("properties").contains(k)) << path + "." + k;
    covered(v, s->at("properties").at(k), root, path + "." + k);
  }
}

}  // namespace

TEST(Config, SchemaDeclaresEveryPresetKey) {
  const auto schema = json::parse(slurp(fs::path(DORASIM_SOURCE_DIR) / "config" / "schema.json"));
  for (const auto& name : preset_names()) covered(preset(name), schema, schema, name);
  covered(json{{"preset", "small"}, {"paradigm", "dora"}}, schema, schema, "extra");
}
