#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace dorasim {

using Rng = std::mt19937_64;
using Tokens = std::int64_t;
using RequestId = std::int64_t;
using PromptId = std::int64_t;
using Version = std::int64_t;

enum class LengthKind { point, uniform, lognormal, histogram };

/// Output/input length law, truncated to [1, l_max].
struct LengthDistribution {
  LengthKind kind = LengthKind::point;
  double value = 1;           // point
  Tokens low = 1, high = 1;   // uniform, inclusive
  double mu = 0, sigma = 1;   // lognormal, parameters of ln(X)
  std::vector<Tokens> bin_upper;  // histogram: bin k covers (upper[k-1], upper[k]]
  std::vector<double> bin_prob;
  Tokens l_max = 1;

  static LengthDistribution point(Tokens v, Tokens l_max = 0);
  static LengthDistribution uniform(Tokens lo, Tokens hi, Tokens l_max = 0);
  static LengthDistribution lognormal(double mu, double sigma, Tokens l_max);
  static LengthDistribution histogram(std::vector<Tokens> upper, std::vector<double> prob,
                                      Tokens l_max = 0);

  /// Throws ConfigError if the parameters cannot produce lengths in [1, l_max].
  void validate() const;
};

/// Loads a two-column "upper-bound probability" file; '#' starts a comment.
LengthDistribution load_histogram(const std::filesystem::path& path, Tokens l_max = 0);

Tokens sample_output_length(const LengthDistribution& dist, Rng& rng);

enum class RequestState { pending, prefilling, decoding, migrating, offloaded, complete, discarded };

const char* to_string(RequestState s);

/// One prompt-response generation task. The output length is latent: it is
/// fixed at creation and only "discovered" by the simulator as tokens decode.
class Request {
 public:
  RequestId request_id = 0;
  PromptId prompt_id = 0;
  Tokens input_tokens = 0;
  Tokens true_output_tokens = 0;
  Tokens generated_tokens = 0;
  double reward = 0;

  double created_at = 0;
  double dispatched_at = -1;
  double first_token_at = -1;
  double completed_at = -1;

  RequestState state() const { return state_; }
  /// Throws ProtocolViolation on a transition outside the lifecycle graph.
  void transition(RequestState next);

  bool has_version() const { return version_.has_value(); }
  Version behavior_version() const;
  /// Tags the request with its behavior policy. A second call throws.
  void assign_version(Version v);

  Tokens resident_tokens() const { return input_tokens + generated_tokens; }

 private:
  RequestState state_ = RequestState::pending;
  std::optional<Version> version_;
};

bool transition_allowed(RequestState from, RequestState to);

struct PromptGroup {
  PromptId prompt_id = 0;
  int group_size = 0;
  std::vector<RequestId> members;
};

struct PromptBatch {
  std::vector<PromptGroup> groups;
  std::vector<Request> requests;
};

struct RewardModel {
  double success_prob = 0.5;  // Bernoulli reward in {0, 1}
};

PromptBatch make_prompt_batch(int n_prompts, int group_size, const LengthDistribution& input,
                              const LengthDistribution& output, Rng& rng,
                              RequestId first_request = 0, PromptId first_prompt = 0,
                              const RewardModel& reward = {});

/// Order-independent prompt source: prompt p always yields the same lengths
/// and rewards for a given seed, no matter when (or by which controller) it
/// is requested. Request ids are p * G + member index.
class WorkloadStream {
 public:
  WorkloadStream(std::uint64_t seed, int group_size, LengthDistribution input,
                 LengthDistribution output, RewardModel reward = {});

  PromptBatch prompt(PromptId p) const;
  int group_size() const { return group_size_; }
  const LengthDistribution& output_distribution() const { return output_; }

 private:
  std::uint64_t seed_;
  int group_size_;
  LengthDistribution input_, output_;
  RewardModel reward_;
};

}  // namespace dorasim
