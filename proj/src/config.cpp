#include "dorasim/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "dorasim/errors.hpp"

namespace dorasim {

using json = nlohmann::ordered_json;

namespace {

/// Object reader that remembers which keys were consumed.
class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(fmt::format("{}: expected an object", where()));
  }

  bool has(const char* key) const { return j_.contains(key); }

  std::string key_path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    const auto& v = j_.at(key);
    const auto kp = key_path(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(fmt::format("{}: expected true or false", kp));
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number()) throw ConfigError(fmt::format("{}: expected an integer", kp));
      const double d = v.get<double>();
      if (d != std::floor(d)) throw ConfigError(fmt::format("{}: expected an integer, got {}", kp, d));
      out = static_cast<T>(v.is_number_unsigned() ? static_cast<T>(v.get<std::uint64_t>())
                                                   : static_cast<T>(v.get<std::int64_t>()));
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(fmt::format("{}: expected a number", kp));
      out = v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(fmt::format("{}: expected a string", kp));
      out = v.get<std::string>();
    } else {
      static_assert(sizeof(T) == 0, "unsupported config type");
    }
  }

  Obj child(const char* key) {
    used_.insert(key);
    static const json empty = json::object();
    return Obj(j_.contains(key) ? j_.at(key) : empty, key_path(key));
  }

  const json& raw(const char* key) {
    used_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.count(k)) throw ConfigError(fmt::format("unknown key '{}'", key_path(k.c_str())));
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

LengthDistribution parse_distribution(Obj o, Tokens l_max) {
  std::string kind;
  o.get("kind", kind);
  LengthDistribution d;
  const auto kp = o.key_path("kind");
  if (kind == "point") {
    double v = 1;
    o.get("value", v);
    d = LengthDistribution::point(static_cast<Tokens>(std::llround(v)), l_max);
  } else if (kind == "uniform") {
    Tokens lo = 1, hi = 1;
    o.get("low", lo);
    o.get("high", hi);
    d = LengthDistribution::uniform(lo, hi, l_max);
  } else if (kind == "lognormal") {
    double mu = 0, sigma = 1, mean = -1;
    o.get("sigma", sigma);
    if (o.has("mean") && o.has("mu")) {
      throw ConfigError(fmt::format("{}: give either mu or mean, not both", o.key_path("mean")));
    }
    o.get("mu", mu);
    o.get("mean", mean);
    if (o.has("mean")) {
      if (!(mean > 0)) throw ConfigError(fmt::format("{}: must be > 0", o.key_path("mean")));
      mu = std::log(mean) - sigma * sigma / 2;  // untruncated mean
    }
    d = LengthDistribution::lognormal(mu, sigma, l_max);
  } else if (kind == "histogram") {
    std::string file;
    o.get("file", file);
    if (!file.empty()) {
      d = load_histogram(file, l_max);
    } else {
      if (!o.has("upper") || !o.has("prob")) {
        throw ConfigError(fmt::format("{}: histogram needs file or upper/prob", o.key_path("kind")));
      }
      try {
        d = LengthDistribution::histogram(o.raw("upper").get<std::vector<Tokens>>(),
                                          o.raw("prob").get<std::vector<double>>(), l_max);
      } catch (const nlohmann::json::exception&) {
        throw ConfigError(fmt::format("{}: upper/prob must be numeric arrays", o.key_path("upper")));
      }
    }
  } else {
    throw ConfigError(fmt::format("{}: unknown distribution '{}'", kp, kind));
  }
  o.finish();
  try {
    d.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(fmt::format("{}: {}", o.key_path("kind"), e.what()));
  }
  return d;
}

json merge(json base, const json& over) {
  if (!base.is_object() || !over.is_object()) return over;
  for (const auto& [k, v] : over.items()) {
    // a distribution with its own "kind" replaces the old one whole
    if (base.contains(k) && base[k].is_object() && v.is_object() && !v.contains("kind")) {
      base[k] = merge(base[k], v);
    } else {
      base[k] = v;
    }
  }
  return base;
}

json resolve_preset(const json& j) {
  if (!j.is_object() || !j.contains("preset")) return j;
  if (!j.at("preset").is_string()) throw ConfigError("preset: expected a string");
  json rest = j;
  rest.erase("preset");
  return merge(preset(j.at("preset").get<std::string>()), rest);
}

}  // namespace

std::vector<std::string> preset_names() { return {"paper64", "paper128", "small"}; }

json preset(const std::string& name) {
  json j = {
      {"seed", 0},
      {"paradigms", {"synchronous", "one_step_off_policy", "partial_rollout", "dora"}},
      {"output_dir", "out"},
      {"workload",
       {{"group_size", 16},
        {"tbs_prompts", 512},
        {"rbs_prompts", 768},
        {"l_max", 30000},
        {"reward_success", 0.5},
        {"input", {{"kind", "uniform"}, {"low", 64}, {"high", 2048}}},
        {"output", {{"kind", "lognormal"}, {"mean", 2400.0}, {"sigma", 1.2}}}}},
      {"cluster",
       {{"n_devices", 64},
        {"slots", 160},
        {"devices_per_group", 4},
        {"kv_capacity_tokens", 2000000},
        {"train_fraction", 0.5}}},
      {"model",
       {{"layers", 32},
        {"kv_heads", 8},
        {"head_dim", 128},
        {"dtype_bytes", 2},
        {"tpot", 0.03},
        {"prefill_a0", 0.01},
        {"prefill_a1", 5e-5},
        {"prefill_a2", 1e-9},
        {"prefill_inflation", 1.0},
        {"weight_sync_time", 5.0},
        {"train_fixed_seconds", 186.0},
        {"train_device_seconds_per_mtoken", 686.0}}},
      {"network",
       {{"bandwidth", 50e9},
        {"latency", 1e-3},
        {"pcie_bandwidth", 25e9},
        {"pcie_latency", 1e-4},
        {"metadata_bytes", 1024}}},
      {"orchestrator",
       {{"staleness_k", 3},
        {"rounding", "largest_remainder"},
        {"update_driven", true},
        {"kv_utilization_threshold", 0.9},
        {"temporal_period", 120.0},
        {"utilization_cooldown", 10.0},
        {"planner_base_seconds", 0.05},
        {"planner_seconds_per_group", 0.002}}},
      {"paradigm_options", {{"segment_tokens", 12000}, {"oversample_factor", 2.0}}},
      {"stop", {{"n_steps", 6}, {"max_time", 1e6}, {"warmup_steps", 1}}},
  };
  if (name == "paper64") return j;
  if (name == "paper128") {
    j["cluster"]["n_devices"] = 128;
    return j;
  }
  if (name == "small") {
    j["workload"] = {{"group_size", 4},
                     {"tbs_prompts", 8},
                     {"rbs_prompts", 12},
                     {"l_max", 4000},
                     {"reward_success", 0.5},
                     {"input", {{"kind", "uniform"}, {"low", 32}, {"high", 256}}},
                     {"output", {{"kind", "lognormal"}, {"mean", 400.0}, {"sigma", 1.0}}}};
    j["cluster"] = {{"n_devices", 8},
                    {"slots", 8},
                    {"devices_per_group", 1},
                    {"kv_capacity_tokens", 200000},
                    {"train_fraction", 0.5}};
    j["model"]["train_fixed_seconds"] = 4.0;
    j["model"]["train_device_seconds_per_mtoken"] = 200.0;
    j["model"]["weight_sync_time"] = 0.5;
    j["orchestrator"]["staleness_k"] = 2;
    j["orchestrator"]["temporal_period"] = 10.0;
    j["paradigm_options"]["segment_tokens"] = 1500;
    j["stop"] = {{"n_steps", 5}, {"max_time", 1e5}, {"warmup_steps", 1}};
    return j;
  }
  throw ConfigError(fmt::format("unknown preset '{}' (known: paper64, paper128, small)", name));
}

RunConfig parse_config(const json& input) {
  const json j = resolve_preset(input);
  RunConfig rc;
  rc.resolved = j;
  Obj top(j, "");
  SimConfig& s = rc.sim;
  top.get("seed", s.seed);
  top.get("output_dir", rc.output_dir);

  if (top.has("paradigm") && top.has("paradigms")) {
    throw ConfigError("paradigms: give either paradigm or paradigms, not both");
  }
  std::vector<std::string> names;
  if (top.has("paradigm")) {
    std::string one;
    top.get("paradigm", one);
    names.push_back(one);
  } else if (top.has("paradigms")) {
    const auto& arr = top.raw("paradigms");
    if (!arr.is_array()) throw ConfigError("paradigms: expected an array of names");
    for (const auto& v : arr) {
      if (!v.is_string()) throw ConfigError("paradigms: expected an array of names");
      names.push_back(v.get<std::string>());
    }
  } else {
    names.push_back("dora");
  }
  if (names.empty()) throw ConfigError("paradigms: empty list");
  for (const auto& n : names) {
    auto k = paradigm_from_string(n);
    if (!k) throw ConfigError(fmt::format("paradigms: unknown paradigm '{}'", n));
    rc.paradigms.push_back(*k);
  }
  s.paradigm.kind = rc.paradigms.front();

  {
    Obj w = top.child("workload");
    Tokens l_max = 30000;
    w.get("group_size", s.workload.group_size);
    w.get("tbs_prompts", s.paradigm.tbs_prompts);
    s.paradigm.rbs_prompts = s.paradigm.tbs_prompts;
    w.get("rbs_prompts", s.paradigm.rbs_prompts);
    w.get("l_max", l_max);
    w.get("reward_success", s.workload.reward.success_prob);
    if (l_max < 1) throw ConfigError("workload.l_max: must be >= 1");
    if (w.has("input")) s.workload.input = parse_distribution(w.child("input"), 0);
    if (w.has("output")) s.workload.output = parse_distribution(w.child("output"), l_max);
    w.finish();
  }
  {
    Obj c = top.child("cluster");
    c.get("n_devices", s.cluster.n_devices);
    c.get("slots", s.cluster.slots);
    c.get("devices_per_group", s.cluster.devices_per_group);
    c.get("kv_capacity_tokens", s.cluster.kv_capacity_tokens);
    c.get("train_fraction", s.train_fraction);
    c.finish();
  }
  {
    Obj m = top.child("model");
    auto& mp = s.model;
    m.get("layers", mp.layers);
    m.get("kv_heads", mp.kv_heads);
    m.get("head_dim", mp.head_dim);
    m.get("dtype_bytes", mp.dtype_bytes);
    m.get("tpot", mp.tpot);
    m.get("prefill_a0", mp.prefill_a0);
    m.get("prefill_a1", mp.prefill_a1);
    m.get("prefill_a2", mp.prefill_a2);
    m.get("prefill_inflation", mp.prefill_inflation);
    m.get("weight_sync_time", mp.weight_sync_time);
    m.get("train_fixed_seconds", mp.train.fixed_seconds);
    m.get("train_device_seconds_per_mtoken", mp.train.device_seconds_per_mtoken);
    m.finish();
  }
  {
    Obj n = top.child("network");
    n.get("bandwidth", s.network.bandwidth);
    n.get("latency", s.network.latency);
    n.get("pcie_bandwidth", s.network.pcie_bandwidth);
    n.get("pcie_latency", s.network.pcie_latency);
    n.get("metadata_bytes", s.network.metadata_bytes);
    n.finish();
  }
  {
    Obj o = top.child("orchestrator");
    auto& t = s.orchestrator.triggers;
    std::string rounding = "largest_remainder";
    o.get("staleness_k", s.paradigm.staleness_k);
    o.get("rounding", rounding);
    if (rounding != "largest_remainder") {
      throw ConfigError(fmt::format("orchestrator.rounding: unsupported method '{}'", rounding));
    }
    o.get("update_driven", t.update_driven);
    o.get("kv_utilization_threshold", t.kv_utilization_threshold);
    o.get("temporal_period", t.temporal_period);
    o.get("utilization_cooldown", t.utilization_cooldown);
    o.get("planner_base_seconds", s.orchestrator.planner_base_seconds);
    o.get("planner_seconds_per_group", s.orchestrator.planner_seconds_per_group);
    o.finish();
  }
  {
    Obj p = top.child("paradigm_options");
    p.get("segment_tokens", s.paradigm.segment_tokens);
    p.get("oversample_factor", s.paradigm.oversample_factor);
    p.finish();
  }
  {
    Obj st = top.child("stop");
    st.get("n_steps", s.stop.n_steps);
    st.get("max_time", s.stop.max_time);
    st.get("warmup_steps", s.stop.warmup_steps);
    st.finish();
  }
  top.finish();
  for (auto k : rc.paradigms) for_paradigm(rc, k).validate();
  return rc;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(fmt::format("override '{}': expected key=value", assignment));
  }
  std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  static const std::map<std::string, std::string> aliases = {
      {"K", "orchestrator.staleness_k"}, {"n_devices", "cluster.n_devices"}, {"n_steps", "stop.n_steps"}};
  if (auto it = aliases.find(key); it != aliases.end()) key = it->second;
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const nlohmann::json::parse_error&) {
    parsed = value;
  }
  json* node = &j;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) throw ConfigError(fmt::format("override '{}': {} is not an object", key, parts[i]));
    node = &(*node)[parts[i]];
    if (node->is_null()) *node = json::object();
  }
  (*node)[parts.back()] = parsed;
}

json read_config_source(const std::string& source) {
  if (source.rfind("preset:", 0) == 0) return preset(source.substr(7));
  std::ifstream f(source);
  if (!f) throw ConfigError(fmt::format("cannot open config file '{}'", source));
  json j;
  try {
    j = json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(fmt::format("{}: malformed JSON: {}", source, e.what()));
  }
  return resolve_preset(j);
}

RunConfig load_config(const std::string& source, const std::vector<std::string>& overrides) {
  json j = read_config_source(source);
  for (const auto& o : overrides) apply_override(j, o);
  return parse_config(j);
}

SimConfig for_paradigm(const RunConfig& cfg, ParadigmKind kind) {
  SimConfig s = cfg.sim;
  s.paradigm.kind = kind;
  return s;
}

std::vector<std::string> expand_grid_values(const std::string& spec) {
  std::vector<std::string> out;
  const auto dots = spec.find("..");
  if (dots != std::string::npos) {
    long long lo = 0, hi = 0;
    try {
      lo = std::stoll(spec.substr(0, dots));
      hi = std::stoll(spec.substr(dots + 2));
    } catch (const std::exception&) {
      throw ConfigError(fmt::format("grid '{}': range bounds must be integers", spec));
    }
    for (long long v = lo; v <= hi; ++v) out.push_back(std::to_string(v));
  } else {
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) out.push_back(item);
    }
  }
  if (out.empty()) throw ConfigError(fmt::format("grid '{}' has no values", spec));
  return out;
}

}  // namespace dorasim
