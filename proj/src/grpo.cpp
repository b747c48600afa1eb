#include "dorasim/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>

#include <fmt/format.h>
#include <json.hpp>

#include "dorasim/errors.hpp"

namespace dorasim::grpo {

void TrajectoryLogProbs::validate() const {
  if (tokens.empty()) throw PreconditionError("trajectory of length 0");
  if (logp_behavior.size() != tokens.size() || logp_current.size() != tokens.size()) {
    throw PreconditionError(fmt::format("trajectory arrays differ in length ({} tokens, {} / {} logp)",
                                        tokens.size(), logp_behavior.size(), logp_current.size()));
  }
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (logp_behavior[t] > 0 || logp_current[t] > 0) {
      throw PreconditionError("log-probabilities must be <= 0");
    }
  }
}

void ObjectiveConfig::validate() const {
  if (!(clip_eps > 0 && clip_eps < 1)) throw ConfigError("clip epsilon must lie in (0, 1)");
  if (group_size < 2) throw ConfigError("group size must be >= 2");
  if (!(std_floor > 0)) throw ConfigError("std floor must be > 0");
}

std::vector<double> group_advantage(std::span<const double> rewards, double std_floor) {
  if (rewards.size() < 2) throw PreconditionError("group advantage needs G >= 2");
  const double n = static_cast<double>(rewards.size());
  double mean = 0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double denom = std::max(std::sqrt(var / n), std_floor);
  std::vector<double> adv;
  adv.reserve(rewards.size());
  for (double r : rewards) adv.push_back((r - mean) / denom);
  return adv;
}

double clipped_term(double ratio, double advantage, double eps) {
  const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
  return std::min(ratio * advantage, clipped * advantage);
}

namespace {

std::vector<double> rewards_of(const PromptGroupLogProbs& group) {
  std::vector<double> r;
  r.reserve(group.size());
  for (const auto& t : group) r.push_back(t.reward);
  return r;
}

void check_batch(const Batch& batch, const ObjectiveConfig& cfg) {
  cfg.validate();
  if (batch.empty()) throw PreconditionError("empty batch");
  for (const auto& group : batch) {
    if (static_cast<int>(group.size()) != cfg.group_size) {
      throw PreconditionError(
          fmt::format("prompt group has {} trajectories, expected G={}", group.size(), cfg.group_size));
    }
    for (const auto& t : group) t.validate();
  }
}

double trajectory_term(const TrajectoryLogProbs& traj, double adv, double eps) {
  double sum = 0;
  for (std::size_t t = 0; t < traj.length(); ++t) {
    sum += clipped_term(std::exp(traj.logp_current[t] - traj.logp_behavior[t]), adv, eps);
  }
  return sum / static_cast<double>(traj.length());
}

}  // namespace

double objective_sync(const Batch& batch, const ObjectiveConfig& cfg) {
  check_batch(batch, cfg);
  double total = 0;
  for (const auto& group : batch) {
    for (const auto& t : group) {
      if (t.behavior_version != group.front().behavior_version) {
        throw PreconditionError("synchronous objective needs one behavior version per group");
      }
    }
    const auto rewards = rewards_of(group);
    const auto adv = group_advantage(rewards, cfg.std_floor);
    double inner = 0;
    for (std::size_t i = 0; i < group.size(); ++i) inner += trajectory_term(group[i], adv[i], cfg.clip_eps);
    total += inner / cfg.group_size;
  }
  return total / static_cast<double>(batch.size());
}

double objective_async(const Batch& batch, const ObjectiveConfig& cfg) {
  check_batch(batch, cfg);
  double total = 0;
  for (const auto& group : batch) {
    const auto rewards = rewards_of(group);
    const auto adv = group_advantage(rewards, cfg.std_floor);
    std::map<Version, std::vector<std::size_t>> by_version;  // B_j
    for (std::size_t i = 0; i < group.size(); ++i) by_version[group[i].behavior_version].push_back(i);
    double inner = 0;
    for (const auto& [version, members] : by_version) {
      for (std::size_t i : members) inner += trajectory_term(group[i], adv[i], cfg.clip_eps);
    }
    total += inner / cfg.group_size;
  }
  return total / static_cast<double>(batch.size());
}

ToyPolicy::ToyPolicy(int max_len, int vocab) : max_len_(max_len), vocab_(vocab) {
  if (max_len < 1 || max_len > 16 || vocab < 2 || vocab > 16) {
    throw ConfigError(fmt::format("toy policy limited to 1 <= L <= 16 and 2 <= V <= 16 (got {}, {})",
                                  max_len, vocab));
  }
  logits_.assign(static_cast<std::size_t>(max_len) * vocab, 0.0);
}

std::size_t ToyPolicy::index(int t, int v) const {
  if (t < 0 || t >= max_len_ || v < 0 || v >= vocab_) {
    throw PreconditionError(fmt::format("logit ({}, {}) out of range", t, v));
  }
  return static_cast<std::size_t>(t) * vocab_ + v;
}

std::vector<double> ToyPolicy::probs(int t) const {
  std::vector<double> p(static_cast<std::size_t>(vocab_));
  double mx = logit(t, 0);
  for (int v = 1; v < vocab_; ++v) mx = std::max(mx, logit(t, v));
  double z = 0;
  for (int v = 0; v < vocab_; ++v) z += p[v] = std::exp(logit(t, v) - mx);
  for (auto& x : p) x /= z;
  return p;
}

double ToyPolicy::log_prob(int t, int token) const {
  double mx = logit(t, 0);
  for (int v = 1; v < vocab_; ++v) mx = std::max(mx, logit(t, v));
  double z = 0;
  for (int v = 0; v < vocab_; ++v) z += std::exp(logit(t, v) - mx);
  return logit(t, token) - mx - std::log(z);
}

std::vector<int> ToyPolicy::sample(int length, Rng& rng) const {
  if (length < 1 || length > max_len_) throw PreconditionError("sample length out of range");
  std::vector<int> out;
  for (int t = 0; t < length; ++t) {
    auto p = probs(t);
    out.push_back(static_cast<int>(std::discrete_distribution<int>(p.begin(), p.end())(rng)));
  }
  return out;
}

ToyPolicy ToyPolicy::random(int max_len, int vocab, double scale, Rng& rng) {
  ToyPolicy p(max_len, vocab);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& x : p.logits_) x = n(rng);
  return p;
}

void score(Batch& batch, const ToyPolicy& policy) {
  for (auto& group : batch) {
    for (auto& traj : group) {
      traj.logp_current.resize(traj.tokens.size());
      for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
        traj.logp_current[t] = policy.log_prob(static_cast<int>(t), traj.tokens[t]);
      }
    }
  }
}

ObjectiveGradient objective_with_gradient(const Batch& batch, const ToyPolicy& policy,
                                          const ObjectiveConfig& cfg) {
  Batch scored = batch;
  score(scored, policy);
  check_batch(scored, cfg);
  ObjectiveGradient out;
  out.grad.assign(policy.n_params(), 0.0);
  const double prompt_w = 1.0 / static_cast<double>(scored.size());
  for (const auto& group : scored) {
    const auto rewards = rewards_of(group);
    const auto adv = group_advantage(rewards, cfg.std_floor);
    for (std::size_t i = 0; i < group.size(); ++i) {
      const auto& traj = group[i];
      const double w = prompt_w / (cfg.group_size * static_cast<double>(traj.length()));
      for (std::size_t t = 0; t < traj.length(); ++t) {
        const double ratio = std::exp(traj.logp_current[t] - traj.logp_behavior[t]);
        const double clipped = std::clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
        out.value += w * std::min(ratio * adv[i], clipped * adv[i]);
        if (ratio * adv[i] > clipped * adv[i]) continue;  // clipped branch is constant
        // d ratio / d logit[t][v] = ratio * (1[v == y_t] - p_v)
        const auto p = policy.probs(static_cast<int>(t));
        const double scale = w * adv[i] * ratio;
        for (int v = 0; v < policy.vocab(); ++v) {
          const double onehot = v == traj.tokens[t] ? 1.0 : 0.0;
          out.grad[static_cast<std::size_t>(t) * policy.vocab() + v] += scale * (onehot - p[v]);
        }
      }
    }
  }
  return out;
}

GradCheckResult grad_check(const ToyPolicy& policy, const Batch& batch, const ObjectiveConfig& cfg,
                           double h, std::size_t max_params) {
  const auto analytic = objective_with_gradient(batch, policy, cfg);
  const std::size_t n = policy.n_params();
  const std::size_t m = std::min(n, max_params);
  GradCheckResult res;
  ToyPolicy probe = policy;
  for (std::size_t k = 0; k < m; ++k) {
    const std::size_t i = k * n / m;
    const double saved = probe.param(i);
    probe.param(i) = saved + h;
    const double up = objective_with_gradient(batch, probe, cfg).value;
    probe.param(i) = saved - h;
    const double down = objective_with_gradient(batch, probe, cfg).value;
    probe.param(i) = saved;
    const double numeric = (up - down) / (2 * h);
    const double a = analytic.grad[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
    res.max_rel_error = std::max(res.max_rel_error, std::abs(a - numeric) / denom);
    ++res.params_checked;
  }
  return res;
}

double ascent_step(ToyPolicy& policy, const Batch& batch, const ObjectiveConfig& cfg, double lr) {
  const auto g = objective_with_gradient(batch, policy, cfg);
  for (std::size_t i = 0; i < policy.n_params(); ++i) policy.param(i) += lr * g.grad[i];
  return g.value;
}

Batch sample_batch(const std::vector<ToyPolicy>& behaviors, int n_prompts, int group_size,
                   int min_len, int max_len, const std::function<Version(int)>& version_of, Rng& rng,
                   double success_prob) {
  Batch batch;
  std::uniform_int_distribution<int> len(min_len, max_len);
  std::bernoulli_distribution win(success_prob);
  for (int p = 0; p < n_prompts; ++p) {
    PromptGroupLogProbs group;
    for (int i = 0; i < group_size; ++i) {
      const Version v = version_of(i);
      const auto& pol = behaviors.at(static_cast<std::size_t>(v));
      TrajectoryLogProbs traj;
      traj.prompt_id = p;
      traj.behavior_version = v;
      traj.tokens = pol.sample(len(rng), rng);
      for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
        traj.logp_behavior.push_back(pol.log_prob(static_cast<int>(t), traj.tokens[t]));
      }
      traj.reward = win(rng) ? 1.0 : 0.0;
      group.push_back(std::move(traj));
    }
    batch.push_back(std::move(group));
  }
  return batch;
}

void write_batch_jsonl(const Batch& batch, std::ostream& out) {
  for (const auto& group : batch) {
    for (const auto& t : group) {
      nlohmann::ordered_json j;
      j["prompt"] = t.prompt_id;
      j["version"] = t.behavior_version;
      j["reward"] = t.reward;
      j["tokens"] = t.tokens;
      j["logp_behavior"] = t.logp_behavior;
      j["logp_current"] = t.logp_current;
      out << j.dump() << '\n';
    }
  }
}

Batch read_batch_jsonl(std::istream& in) {
  Batch batch;
  std::map<PromptId, std::size_t> where;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    TrajectoryLogProbs t;
    t.prompt_id = j.at("prompt").get<PromptId>();
    t.behavior_version = j.at("version").get<Version>();
    t.reward = j.at("reward").get<double>();
    t.tokens = j.at("tokens").get<std::vector<int>>();
    t.logp_behavior = j.at("logp_behavior").get<std::vector<double>>();
    t.logp_current = j.value("logp_current", std::vector<double>{});
    auto [it, fresh] = where.emplace(t.prompt_id, batch.size());
    if (fresh) batch.emplace_back();
    batch[it->second].push_back(std::move(t));
  }
  return batch;
}

}  // namespace dorasim::grpo
