#pragma once

#include <cassert>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "convsearch/metrics.hpp"
#include "convsearch/protocol.hpp"
#include "convsearch/retrieval.hpp"

namespace convsearch {

enum class OutcomeMetric { F1, EM };

inline std::string_view to_string(OutcomeMetric m) { return m == OutcomeMetric::F1 ? "f1" : "em"; }

// Reward decomposition for one trajectory. The total is derived from the
// components at construction and cannot be set independently.
class RewardBreakdown {
 public:
  RewardBreakdown() = default;
  RewardBreakdown(double outcome, double info_gain, double mia, double weight = 0.5)
      : outcome_(outcome), info_gain_(info_gain), mia_(mia), weight_(weight),
        total_(outcome + weight * (info_gain + mia)) {}

  double outcome() const { return outcome_; }
  double info_gain() const { return info_gain_; }
  double mia() const { return mia_; }
  double weight() const { return weight_; }
  double total() const { return total_; }

  friend bool operator==(const RewardBreakdown&, const RewardBreakdown&) = default;

 private:
  double outcome_ = 0.0;
  double info_gain_ = 0.0;
  double mia_ = 0.0;
  double weight_ = 0.5;
  double total_ = 0.0;
};

struct TurnGold {
  std::string gold_answer;
  std::optional<ActionKind> gold_action;  // nullopt: turn carries no action annotation
  std::set<std::string> gold_passage_ids;
};

struct SearchCall {
  std::string query;
  RankedList results;

  friend bool operator==(const SearchCall&, const SearchCall&) = default;
};

struct RewardConfig {
  OutcomeMetric outcome_metric = OutcomeMetric::F1;
  double weight = 0.5;
  metrics::InfoGainOptions info_gain;
};

inline double answer_score(std::string_view prediction, std::string_view gold, OutcomeMetric metric) {
  return metric == OutcomeMetric::EM ? metrics::exact_match(prediction, gold)
                                     : metrics::token_f1(prediction, gold);
}

// Score of the final answer. A clarification or refusal is not an answer: it
// only earns credit when the gold turn expects exactly that reaction and
// carries a reference text for it.
inline double outcome_reward(const Trajectory& trajectory, const TurnGold& gold, OutcomeMetric metric) {
  const TrajectoryStep* terminal = trajectory.terminal();
  if (terminal == nullptr || text::normalize_text(gold.gold_answer).empty()) return 0.0;
  if (terminal->kind == StepKind::Answer) return answer_score(terminal->text, gold.gold_answer, metric);
  if (gold.gold_action && action_of(terminal->kind) == gold.gold_action) {
    return answer_score(terminal->text, gold.gold_answer, metric);
  }
  return 0.0;
}

template <metrics::PassageLookup Corpus>
double ig_reward(const std::vector<SearchCall>& calls, const TurnGold& gold, const Corpus& corpus,
                 const metrics::InfoGainOptions& opts = {}) {
  if (calls.empty() || text::normalize_text(gold.gold_answer).empty()) return 0.0;
  std::vector<RankedList> lists;
  lists.reserve(calls.size());
  for (const auto& c : calls) lists.push_back(c.results);
  return metrics::info_gain(lists, gold.gold_answer, corpus, opts);
}

// 1 when the terminal reaction matches the annotated one, -0.5 otherwise,
// 0 when the turn is not annotated.
inline double mia_reward(const Trajectory& trajectory, const TurnGold& gold) {
  if (!gold.gold_action) return 0.0;
  const TrajectoryStep* terminal = trajectory.terminal();
  if (terminal != nullptr && action_of(terminal->kind) == gold.gold_action) return 1.0;
  return -0.5;
}

inline RewardBreakdown aggregate(double outcome, double info_gain, double mia, double weight = 0.5) {
  RewardBreakdown r(outcome, info_gain, mia, weight);
  assert(weight != 0.5 || (r.total() >= -0.25 - 1e-12 && r.total() <= 2.0 + 1e-12));
  return r;
}

template <metrics::PassageLookup Corpus>
RewardBreakdown compute_reward(const Trajectory& trajectory, const std::vector<SearchCall>& calls,
                               const TurnGold& gold, const Corpus& corpus,
                               const RewardConfig& cfg = {}) {
  return aggregate(outcome_reward(trajectory, gold, cfg.outcome_metric),
                   ig_reward(calls, gold, corpus, cfg.info_gain), mia_reward(trajectory, gold),
                   cfg.weight);
}

}  // namespace convsearch
