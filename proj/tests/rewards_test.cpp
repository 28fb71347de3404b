#include <gtest/gtest.h>

#include <random>

#include "convsearch/rewards.hpp"
#include "test_support.hpp"

using namespace convsearch;

namespace {

Trajectory ending(StepKind kind, std::string text = "") { return {{{kind, std::move(text)}}, 0}; }

TurnGold gold(std::string answer, std::optional<ActionKind> action = std::nullopt) {
  return {std::move(answer), action, {}};
}

}  // namespace

TEST(Breakdown, TotalIsDerived) {
  const RewardBreakdown r(0.5, 1.0, -0.5);
  EXPECT_DOUBLE_EQ(r.total(), 0.5 + 0.5 * 0.5);
  EXPECT_DOUBLE_EQ(RewardBreakdown(1, 1, 1).total(), 2.0);
  EXPECT_DOUBLE_EQ(RewardBreakdown(0, 0, -0.5).total(), -0.25);
  EXPECT_DOUBLE_EQ(RewardBreakdown(1, 1, 1, 0.25).total(), 1.5);
}

TEST(Outcome, AnswerScoredByF1OrEm) {
  const auto t = ending(StepKind::Answer, "Columbia");
  EXPECT_DOUBLE_EQ(outcome_reward(t, gold("Columbia Records"), OutcomeMetric::F1), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(outcome_reward(t, gold("Columbia Records"), OutcomeMetric::EM), 0.0);
  EXPECT_DOUBLE_EQ(outcome_reward(t, gold("columbia."), OutcomeMetric::EM), 1.0);
}

TEST(Outcome, NonAnswerTerminals) {
  const auto clarify = ending(StepKind::Clarify, "homemade or store-bought?");
  EXPECT_DOUBLE_EQ(outcome_reward(clarify, gold("1948", ActionKind::Answer), OutcomeMetric::F1), 0.0);
  EXPECT_GT(outcome_reward(clarify, gold("store-bought or homemade?", ActionKind::Clarify), OutcomeMetric::F1),
            0.9);
  EXPECT_DOUBLE_EQ(outcome_reward(ending(StepKind::NoAnswer), gold("", ActionKind::NoAnswer), OutcomeMetric::F1),
                   0.0);
  EXPECT_DOUBLE_EQ(outcome_reward(ending(StepKind::Answer, ""), gold(" the "), OutcomeMetric::F1), 0.0);
}

TEST(Mia, TruthTable) {
  const StepKind terminals[] = {StepKind::Answer, StepKind::Clarify, StepKind::NoAnswer};
  for (const StepKind k : terminals) {
    EXPECT_DOUBLE_EQ(mia_reward(ending(k), gold("x")), 0.0);
    for (const ActionKind a : kAllActions) {
      EXPECT_DOUBLE_EQ(mia_reward(ending(k), gold("x", a)), action_of(k) == a ? 1.0 : -0.5);
    }
  }
}

TEST(InfoGainReward, ZeroWithoutCallsOrGold) {
  const auto& idx = testsupport::fixture_index();
  EXPECT_EQ(ig_reward({}, gold("1948"), idx), 0.0);
  const SearchCall call{"q", idx.search("first vinyl record", 3)};
  EXPECT_EQ(ig_reward({call}, gold(""), idx), 0.0);
  EXPECT_EQ(ig_reward({call}, gold("1948"), idx), 1.0);
}

TEST(Compute, FullRewardOnPerfectTurn) {
  const auto& idx = testsupport::fixture_index();
  const SearchCall call{"q", idx.search("first vinyl record release year", 3)};
  Trajectory t{{{StepKind::Search, "q"}, {StepKind::Information, "i"}, {StepKind::Answer, "1948"}}, 0};
  const auto r = compute_reward(t, {call}, gold("1948", ActionKind::Answer), idx);
  EXPECT_DOUBLE_EQ(r.outcome(), 1.0);
  EXPECT_DOUBLE_EQ(r.info_gain(), 1.0);
  EXPECT_DOUBLE_EQ(r.mia(), 1.0);
  EXPECT_DOUBLE_EQ(r.total(), 2.0);
}

TEST(Compute, AgreesWithOracleAndStaysInRange) {
  std::mt19937_64 rng(21);
  const auto& idx = testsupport::fixture_index();
  for (int i = 0; i < 500; ++i) {
    const auto sc = testsupport::random_reward_scenario(rng);
    const auto got = compute_reward(sc.trajectory, sc.calls, sc.gold, idx);
    const auto want = oracle::reward(sc.oracle_case);
    ASSERT_NEAR(got.outcome(), want.outcome, 1e-9) << i;
    ASSERT_NEAR(got.info_gain(), want.ig, 1e-9) << i;
    ASSERT_NEAR(got.mia(), want.mia, 1e-9) << i;
    ASSERT_NEAR(got.total(), want.total, 1e-9) << i;
    EXPECT_GE(got.total(), -0.25);
    EXPECT_LE(got.total(), 2.0);
  }
}
