#include "dorasim/workload.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "dorasim/errors.hpp"

namespace dorasim {

LengthDistribution LengthDistribution::point(Tokens v, Tokens l_max) {
  LengthDistribution d;
  d.kind = LengthKind::point;
  d.value = static_cast<double>(v);
  d.l_max = l_max > 0 ? l_max : v;
  return d;
}

LengthDistribution LengthDistribution::uniform(Tokens lo, Tokens hi, Tokens l_max) {
  LengthDistribution d;
  d.kind = LengthKind::uniform;
  d.low = lo;
  d.high = hi;
  d.l_max = l_max > 0 ? l_max : hi;
  return d;
}

LengthDistribution LengthDistribution::lognormal(double mu, double sigma, Tokens l_max) {
  LengthDistribution d;
  d.kind = LengthKind::lognormal;
  d.mu = mu;
  d.sigma = sigma;
  d.l_max = l_max;
  return d;
}

LengthDistribution LengthDistribution::histogram(std::vector<Tokens> upper, std::vector<double> prob,
                                                 Tokens l_max) {
  LengthDistribution d;
  d.kind = LengthKind::histogram;
  d.l_max = l_max > 0 ? l_max : (upper.empty() ? 1 : upper.back());
  d.bin_upper = std::move(upper);
  d.bin_prob = std::move(prob);
  return d;
}

void LengthDistribution::validate() const {
  if (l_max < 1) throw ConfigError(fmt::format("l_max must be >= 1, got {}", l_max));
  switch (kind) {
    case LengthKind::point:
      if (!(value >= 1)) throw ConfigError("point length must be >= 1");
      break;
    case LengthKind::uniform:
      if (low < 1 || high < low) {
        throw ConfigError(fmt::format("uniform bounds invalid: [{}, {}]", low, high));
      }
      break;
    case LengthKind::lognormal:
      if (!(sigma > 0) || !std::isfinite(mu)) {
        throw ConfigError(fmt::format("lognormal needs sigma > 0 and finite mu (mu={}, sigma={})",
                                      mu, sigma));
      }
      break;
    case LengthKind::histogram: {
      if (bin_upper.empty()) throw ConfigError("histogram has no bins");
      if (bin_upper.size() != bin_prob.size()) {
        throw ConfigError("histogram bounds and probabilities differ in length");
      }
      double total = 0;
      Tokens prev = 0;
      for (std::size_t k = 0; k < bin_upper.size(); ++k) {
        if (bin_prob[k] < 0) throw ConfigError("histogram probability is negative");
        if (bin_upper[k] <= prev) throw ConfigError("histogram bounds must increase from >= 1");
        prev = bin_upper[k];
        total += bin_prob[k];
      }
      if (std::abs(total - 1.0) > 1e-9) {
        throw ConfigError(fmt::format("histogram probabilities sum to {}, expected 1", total));
      }
      break;
    }
  }
}

LengthDistribution load_histogram(const std::filesystem::path& path, Tokens l_max) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open histogram file '{}'", path.string()));
  std::vector<Tokens> upper;
  std::vector<double> prob;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream row(line);
    double bound = 0, p = 0;
    if (!(row >> bound)) continue;
    if (!(row >> p)) {
      throw ConfigError(fmt::format("{}:{}: expected two columns", path.string(), lineno));
    }
    upper.push_back(static_cast<Tokens>(bound));
    prob.push_back(p);
  }
  auto d = LengthDistribution::histogram(std::move(upper), std::move(prob), l_max);
  d.validate();
  return d;
}

Tokens sample_output_length(const LengthDistribution& dist, Rng& rng) {
  Tokens raw = 1;
  switch (dist.kind) {
    case LengthKind::point:
      raw = static_cast<Tokens>(std::llround(dist.value));
      break;
    case LengthKind::uniform:
      raw = std::uniform_int_distribution<Tokens>(dist.low, dist.high)(rng);
      break;
    case LengthKind::lognormal: {
      double x = std::exp(dist.mu + dist.sigma * std::normal_distribution<double>(0.0, 1.0)(rng));
      raw = x >= static_cast<double>(dist.l_max) ? dist.l_max : static_cast<Tokens>(std::llround(x));
      break;
    }
    case LengthKind::histogram: {
      std::discrete_distribution<std::size_t> pick(dist.bin_prob.begin(), dist.bin_prob.end());
      std::size_t k = pick(rng);
      Tokens lo = k == 0 ? 1 : dist.bin_upper[k - 1] + 1;
      raw = std::uniform_int_distribution<Tokens>(lo, dist.bin_upper[k])(rng);
      break;
    }
  }
  return std::clamp<Tokens>(raw, 1, dist.l_max);
}

const char* to_string(RequestState s) {
  switch (s) {
    case RequestState::pending: return "pending";
    case RequestState::prefilling: return "prefilling";
    case RequestState::decoding: return "decoding";
    case RequestState::migrating: return "migrating";
    case RequestState::offloaded: return "offloaded";
    case RequestState::complete: return "complete";
    case RequestState::discarded: return "discarded";
  }
  return "?";
}

bool transition_allowed(RequestState from, RequestState to) {
  using S = RequestState;
  if (to == S::discarded) return from != S::complete && from != S::discarded;
  switch (from) {
    case S::pending: return to == S::prefilling;
    // prefill aborted by a weight flash goes back to the pending queue
    case S::prefilling: return to == S::decoding || to == S::pending;
    // decoding -> pending is a segment preemption (partial rollout)
    case S::decoding:
      return to == S::migrating || to == S::offloaded || to == S::complete || to == S::pending;
    case S::migrating: return to == S::decoding || to == S::offloaded;
    case S::offloaded: return to == S::decoding || to == S::migrating;
    case S::complete:
    case S::discarded: return false;
  }
  return false;
}

void Request::transition(RequestState next) {
  if (!transition_allowed(state_, next)) {
    throw ProtocolViolation(fmt::format("request {}: illegal transition {} -> {}", request_id,
                                        to_string(state_), to_string(next)));
  }
  state_ = next;
}

Version Request::behavior_version() const {
  if (!version_) throw ProtocolViolation(fmt::format("request {} has no version", request_id));
  return *version_;
}

void Request::assign_version(Version v) {
  if (version_) {
    throw ProtocolViolation(
        fmt::format("request {} already tagged with version {}", request_id, *version_));
  }
  version_ = v;
}

namespace {

void fill_prompt(PromptBatch& out, PromptId p, int group_size, RequestId first_id,
                 const LengthDistribution& input, const LengthDistribution& output,
                 const RewardModel& reward, Rng& rng) {
  PromptGroup group{p, group_size, {}};
  const Tokens in_tokens = sample_output_length(input, rng);
  std::bernoulli_distribution win(reward.success_prob);
  for (int i = 0; i < group_size; ++i) {
    Request r;
    r.request_id = first_id + i;
    r.prompt_id = p;
    r.input_tokens = in_tokens;
    r.true_output_tokens = sample_output_length(output, rng);
    r.reward = win(rng) ? 1.0 : 0.0;
    group.members.push_back(r.request_id);
    out.requests.push_back(std::move(r));
  }
  out.groups.push_back(std::move(group));
}

}  // namespace

PromptBatch make_prompt_batch(int n_prompts, int group_size, const LengthDistribution& input,
                              const LengthDistribution& output, Rng& rng, RequestId first_request,
                              PromptId first_prompt, const RewardModel& reward) {
  if (n_prompts < 1 || group_size < 1) {
    throw PreconditionError("make_prompt_batch needs n_prompts >= 1 and G >= 1");
  }
  input.validate();
  output.validate();
  PromptBatch batch;
  batch.groups.reserve(static_cast<std::size_t>(n_prompts));
  batch.requests.reserve(static_cast<std::size_t>(n_prompts) * group_size);
  for (int p = 0; p < n_prompts; ++p) {
    fill_prompt(batch, first_prompt + p, group_size,
                first_request + static_cast<RequestId>(p) * group_size, input, output, reward, rng);
  }
  return batch;
}

WorkloadStream::WorkloadStream(std::uint64_t seed, int group_size, LengthDistribution input,
                               LengthDistribution output, RewardModel reward)
    : seed_(seed),
      group_size_(group_size),
      input_(std::move(input)),
      output_(std::move(output)),
      reward_(reward) {
  if (group_size < 1) throw ConfigError("group size must be >= 1");
  input_.validate();
  output_.validate();
}

PromptBatch WorkloadStream::prompt(PromptId p) const {
  std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                    static_cast<std::uint32_t>(p), static_cast<std::uint32_t>(p >> 32)};
  Rng rng(seq);
  PromptBatch out;
  fill_prompt(out, p, group_size_, p * group_size_, input_, output_, reward_, rng);
  return out;
}

}  // namespace dorasim
