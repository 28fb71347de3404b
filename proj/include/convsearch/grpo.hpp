#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "convsearch/error.hpp"
#include "convsearch/protocol.hpp"
#include "convsearch/rewards.hpp"

namespace convsearch::grpo {

struct GroupSample {
  std::string trajectory_id;
  double reward = 0.0;
  std::vector<double> token_logprobs_new;
  std::vector<double> token_logprobs_old;
  std::vector<double> token_logprobs_ref;
};

struct AdvantageSet {
  std::vector<double> advantages;
  double group_mean = 0.0;
  double group_std = 0.0;  // population std; 0 for a degenerate group
};

inline constexpr double kDegenerateStd = 1e-12;

// Standardizes rewards within a group using the population mean and std.
inline AdvantageSet group_advantages(const std::vector<double>& rewards) {
  if (rewards.size() < 2) {
    throw GrpoError("GROUP_TOO_SMALL", "a group needs at least 2 rollouts, got " +
                                           std::to_string(rewards.size()));
  }
  for (const double r : rewards) {
    if (!std::isfinite(r)) throw GrpoError("NONFINITE_INPUT", "reward is not finite");
  }
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (const double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (const double r : rewards) var += (r - mean) * (r - mean);
  var /= n;
  const double sd = std::sqrt(var);

  AdvantageSet out;
  out.group_mean = mean;
  if (sd < kDegenerateStd) {
    out.advantages.assign(rewards.size(), 0.0);
    out.group_std = 0.0;
    return out;
  }
  out.group_std = sd;
  out.advantages.reserve(rewards.size());
  for (const double r : rewards) out.advantages.push_back((r - mean) / sd);
  return out;
}

inline void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw GrpoError("NONFINITE_INPUT", std::string(what) + " is not finite");
}

// Clipped surrogate min(phi*A, clip(phi, 1-eps, 1+eps)*A), phi = exp(new - old).
inline double surrogate_term(double logprob_new, double logprob_old, double advantage, double epsilon) {
  require_finite(logprob_new, "logprob_new");
  require_finite(logprob_old, "logprob_old");
  require_finite(advantage, "advantage");
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw GrpoError("INVALID_EPSILON", "epsilon must be positive and finite");
  }
  const double ratio = std::exp(logprob_new - logprob_old);
  const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
  return std::min(ratio * advantage, clipped * advantage);
}

// Per-token KL estimate exp(d) - d - 1 with d = ref - new; zero iff equal.
inline double kl_penalty(double logprob_new, double logprob_ref) {
  require_finite(logprob_new, "logprob_new");
  require_finite(logprob_ref, "logprob_ref");
  const double d = logprob_ref - logprob_new;
  return std::max(0.0, std::expm1(d) - d);
}

// Token-mean within each trajectory, then mean over the group.
inline double objective_value(const std::vector<GroupSample>& group, double epsilon = 0.2,
                              double gamma = 0.001) {
  if (group.size() < 2) {
    throw GrpoError("GROUP_TOO_SMALL", "a group needs at least 2 rollouts");
  }
  std::vector<double> rewards;
  rewards.reserve(group.size());
  for (const auto& s : group) {
    const auto n = s.token_logprobs_new.size();
    if (n == 0 || s.token_logprobs_old.size() != n || s.token_logprobs_ref.size() != n) {
      throw GrpoError("MISSING_LOGPROBS",
                      "sample '" + s.trajectory_id + "' lacks aligned new/old/ref logprobs");
    }
    rewards.push_back(s.reward);
  }
  const AdvantageSet adv = group_advantages(rewards);
  double total = 0.0;
  for (std::size_t i = 0; i < group.size(); ++i) {
    const auto& s = group[i];
    double surrogate = 0.0;
    double kl = 0.0;
    for (std::size_t t = 0; t < s.token_logprobs_new.size(); ++t) {
      surrogate += surrogate_term(s.token_logprobs_new[t], s.token_logprobs_old[t], adv.advantages[i],
                                  epsilon);
      kl += kl_penalty(s.token_logprobs_new[t], s.token_logprobs_ref[t]);
    }
    const double tokens = static_cast<double>(s.token_logprobs_new.size());
    total += surrogate / tokens - gamma * (kl / tokens);
  }
  return total / static_cast<double>(group.size());
}

// One trainer-facing record per rollout.
struct BatchRecord {
  std::string group_id;
  std::string trajectory_id;
  std::string prompt;
  Trajectory trajectory;
  RewardBreakdown reward;
  double advantage = 0.0;
};

inline nlohmann::json reward_json(const RewardBreakdown& r) {
  return {{"outcome", r.outcome()}, {"info_gain", r.info_gain()}, {"mia", r.mia()},
          {"total", r.total()}};
}

// Byte offsets of each step inside the canonical completion text.
inline nlohmann::json step_spans(const Trajectory& t) {
  nlohmann::json spans = nlohmann::json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    if (i > 0) ++offset;  // newline separator
    const std::size_t len = render_step(t.steps[i]).size();
    spans.push_back({{"kind", std::string(tag_name(t.steps[i].kind))},
                     {"begin", offset},
                     {"end", offset + len}});
    offset += len;
  }
  return spans;
}

inline nlohmann::json to_json(const BatchRecord& r) {
  return {{"group_id", r.group_id},
          {"trajectory_id", r.trajectory_id},
          {"prompt", r.prompt},
          {"completion", serialize(r.trajectory)},
          {"steps", step_spans(r.trajectory)},
          {"reward", reward_json(r.reward)},
          {"advantage", r.advantage}};
}

// Line-delimited JSON, records in the given order, keys sorted.
inline void export_batch(const std::vector<BatchRecord>& records, std::ostream& out) {
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  if (!out) throw GrpoError("IO_ERROR", "failed writing batch stream");
}

inline void export_batch(const std::vector<BatchRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw GrpoError("IO_ERROR", "cannot open '" + path.string() + "' for writing");
  export_batch(records, out);
  out.flush();
  if (!out) throw GrpoError("IO_ERROR", "failed writing '" + path.string() + "'");
}

}  // namespace convsearch::grpo
