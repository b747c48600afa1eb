#pragma once

#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "dorasim/workload.hpp"

namespace dorasim::grpo {

struct TrajectoryLogProbs {
  PromptId prompt_id = 0;
  std::vector<int> tokens;
  std::vector<double> logp_behavior;  // ln pi_{w_j}(y_t | .)
  std::vector<double> logp_current;   // ln pi_theta(y_t | .)
  Version behavior_version = 0;
  double reward = 0;

  std::size_t length() const { return tokens.size(); }
  /// Throws PreconditionError unless both arrays match the token count and
  /// every log-probability is <= 0.
  void validate() const;
};

using PromptGroupLogProbs = std::vector<TrajectoryLogProbs>;
using Batch = std::vector<PromptGroupLogProbs>;

struct ObjectiveConfig {
  double clip_eps = 0.2;
  int group_size = 4;
  double std_floor = 1e-8;

  void validate() const;
};

/// (r_i - mean) / max(std, floor) with the population (1/G) deviation.
std::vector<double> group_advantage(std::span<const double> rewards, double std_floor = 1e-8);

/// min(r * A, clip(r, 1 - eps, 1 + eps) * A)
double clipped_term(double ratio, double advantage, double eps);

/// Single behavior version per prompt group; mean over prompts of
/// (1/G) sum_i (1/L_i) sum_t clipped_term.
double objective_sync(const Batch& batch, const ObjectiveConfig& cfg);

/// Groups may mix behavior versions; trajectories are aggregated per version
/// subset B_j with sum_j |B_j| = G. Prompts are weighted equally.
double objective_async(const Batch& batch, const ObjectiveConfig& cfg);

/// Position-conditional categorical policy: logits[t][v].
class ToyPolicy {
 public:
  ToyPolicy(int max_len, int vocab);

  int max_len() const { return max_len_; }
  int vocab() const { return vocab_; }
  std::size_t n_params() const { return logits_.size(); }
  double& param(std::size_t i) { return logits_.at(i); }
  double param(std::size_t i) const { return logits_.at(i); }
  double& logit(int t, int v) { return logits_[index(t, v)]; }
  double logit(int t, int v) const { return logits_[index(t, v)]; }

  double log_prob(int t, int token) const;
  std::vector<double> probs(int t) const;
  std::vector<int> sample(int length, Rng& rng) const;

  static ToyPolicy random(int max_len, int vocab, double scale, Rng& rng);

 private:
  std::size_t index(int t, int v) const;
  int max_len_, vocab_;
  std::vector<double> logits_;
};

/// Fills logp_current of every trajectory from `policy`.
void score(Batch& batch, const ToyPolicy& policy);

struct ObjectiveGradient {
  double value = 0;
  std::vector<double> grad;  // same layout as ToyPolicy params
};

/// Async objective and its analytic gradient w.r.t. the policy logits. Tokens
/// whose clipped branch is strictly smaller contribute no gradient.
ObjectiveGradient objective_with_gradient(const Batch& batch, const ToyPolicy& policy,
                                          const ObjectiveConfig& cfg);

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t params_checked = 0;
};

/// Central differences (step h) on at most `max_params` parameters spread
/// evenly over the matrix.
GradCheckResult grad_check(const ToyPolicy& policy, const Batch& batch, const ObjectiveConfig& cfg,
                           double h = 1e-5, std::size_t max_params = 200);

/// Plain gradient ascent; returns the objective before the step.
double ascent_step(ToyPolicy& policy, const Batch& batch, const ObjectiveConfig& cfg, double lr);

/// Prompts with G trajectories each; member i of every prompt is sampled
/// from `behaviors[version_of(i)]`. logp_current is left empty.
Batch sample_batch(const std::vector<ToyPolicy>& behaviors, int n_prompts, int group_size,
                   int min_len, int max_len, const std::function<Version(int)>& version_of, Rng& rng,
                   double success_prob = 0.5);

void write_batch_jsonl(const Batch& batch, std::ostream& out);
/// Groups consecutive lines by prompt id in first-seen order.
Batch read_batch_jsonl(std::istream& in);

}  // namespace dorasim::grpo
