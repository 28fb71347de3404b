#include <gtest/gtest.h>

#include <set>

#include "convsearch/episode.hpp"
#include "test_support.hpp"

using namespace convsearch;

namespace {

const Conversation& conv(const std::string& id) {
  for (const auto& c : testsupport::fixture_dataset()) {
    if (c.id == id) return c;
  }
  throw std::runtime_error("missing fixture conversation " + id);
}

std::string code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return "OK";
}

// Records every request it receives.
class RecordingPolicy : public ScriptedPolicy {
 public:
  using ScriptedPolicy::ScriptedPolicy;
  std::vector<GenerationRequest> requests;

 protected:
  GenerationResponse produce(const GenerationRequest& r) override {
    requests.push_back(r);
    return ScriptedPolicy::produce(r);
  }
};

}  // namespace

TEST(Episode, SearchInjectsInformationAndScores) {
  const auto& idx = testsupport::fixture_index();
  RecordingPolicy p({"<think>need year</think><search>first vinyl record release year</search>",
                     "<answer>1948</answer>"});
  const auto r = run_episode(conv("c1-vinyl"), 0, p, idx, EpisodeConfig{}, 99);
  ASSERT_EQ(r.trajectory.steps.size(), 4u);
  EXPECT_EQ(r.trajectory.steps[2].kind, StepKind::Information);
  EXPECT_EQ(r.trajectory.steps[2].text.rfind("[1] Long-playing record:", 0), 0u);
  ASSERT_EQ(r.search_calls.size(), 1u);
  EXPECT_EQ(r.search_calls[0].results.entries[0].passage_id, "vinyl-01");
  EXPECT_EQ(r.terminal_action, ActionKind::Answer);
  EXPECT_DOUBLE_EQ(r.reward.total(), 2.0);
  EXPECT_EQ(r.trajectory.token_count, 7u);  // whitespace tokens of the raw emissions
  // The second prompt carries the transcript so far, including the information block.
  ASSERT_EQ(p.requests.size(), 2u);
  EXPECT_NE(p.requests[1].prompt.find("<information>[1] Long-playing record:"), std::string::npos);
  EXPECT_NE(p.requests[0].seed, p.requests[1].seed);
  EXPECT_EQ(r.prompt, p.requests[0].prompt);
}

TEST(Episode, GoldHistoryInPrompt) {
  const auto& idx = testsupport::fixture_index();
  ScriptedPolicy p({"<answer>Columbia Records</answer>"});
  const auto r = run_episode(conv("c1-vinyl"), 1, p, idx, EpisodeConfig{});
  EXPECT_NE(r.prompt.find("Turn 1 assistant: 1948"), std::string::npos);
  EXPECT_NE(r.prompt.find("Question: Who introduced it?"), std::string::npos);
}

TEST(Episode, SearchBudgetForcesNoAnswer) {
  const auto& idx = testsupport::fixture_index();
  EpisodeConfig cfg;
  cfg.max_search_calls = 2;
  ScriptedPolicy p({"<search>vinyl</search>", "<search>record</search>", "<search>speed</search>",
                    "<answer>x</answer>"});
  const auto r = run_episode(conv("c1-vinyl"), 0, p, idx, cfg);
  EXPECT_TRUE(r.budget_exceeded);
  EXPECT_EQ(r.search_calls.size(), 2u);
  EXPECT_EQ(r.trajectory.steps.back().kind, StepKind::NoAnswer);
  EXPECT_EQ(r.terminal_action, ActionKind::NoAnswer);
  EXPECT_DOUBLE_EQ(r.reward.mia(), -0.5);
}

TEST(Episode, TokenBudgetForcesNoAnswer) {
  const auto& idx = testsupport::fixture_index();
  EpisodeConfig cfg;
  cfg.max_total_tokens = 5;
  ScriptedPolicy p({"<think>one two three four</think>", "<think>five six</think>", "<answer>x</answer>"});
  const auto r = run_episode(conv("c1-vinyl"), 0, p, idx, cfg);
  EXPECT_TRUE(r.budget_exceeded);
  EXPECT_EQ(r.trajectory.count(StepKind::Think), 1u);
  EXPECT_LE(r.trajectory.token_count, 5u);
}

TEST(Episode, FormatViolations) {
  const auto& idx = testsupport::fixture_index();
  class Raw : public Policy {
   public:
    explicit Raw(std::string t) : t_(std::move(t)) {}

   protected:
    GenerationResponse produce(const GenerationRequest&) override { return {t_, std::nullopt, 1}; }

   private:
    std::string t_;
  };
  for (const char* bad : {"no tags at all", "<answer>unclosed", "<bogus>x</bogus>", "<search> </search>"}) {
    Raw p(bad);
    EXPECT_EQ(code_of([&] { run_episode(conv("c1-vinyl"), 0, p, idx, EpisodeConfig{}); }), "FORMAT_VIOLATION")
        << bad;
  }
}

TEST(Episode, InvalidTurnAndConfig) {
  const auto& idx = testsupport::fixture_index();
  ScriptedPolicy p({"<answer>x</answer>"});
  EXPECT_EQ(code_of([&] { run_episode(conv("c1-vinyl"), 9, p, idx, EpisodeConfig{}); }), "INVALID_TURN");
  EpisodeConfig cfg;
  cfg.top_k = 0;
  EXPECT_EQ(code_of([&] { run_episode(conv("c1-vinyl"), 0, p, idx, cfg); }), "INVALID_CONFIG");
}

TEST(Episode, StepsAfterTerminalInOneSegmentAreDropped) {
  const auto& idx = testsupport::fixture_index();
  ScriptedPolicy p({"<answer>1948</answer>"});
  const auto r = run_episode(conv("c1-vinyl"), 0, p, idx, EpisodeConfig{});
  EXPECT_EQ(r.trajectory.steps.size(), 1u);
}

TEST(Seeds, DistinctAndStable) {
  std::set<std::uint64_t> seen;
  for (const char* c : {"a", "b"}) {
    for (std::size_t t = 0; t < 5; ++t) {
      for (std::size_t r = 0; r < 5; ++r) seen.insert(derive_seed(1, c, t, r));
    }
  }
  EXPECT_EQ(seen.size(), 50u);
  EXPECT_EQ(derive_seed(7, "x", 1, 2), derive_seed(7, "x", 1, 2));
  EXPECT_NE(derive_seed(7, "x", 1, 2), derive_seed(8, "x", 1, 2));
}

TEST(Clarification, ExpandedQueryRetrievesDisambiguatedPassage) {
  const auto& idx = testsupport::fixture_index();
  const auto& c = conv("c2-buttermilk");
  ScriptedPolicy p({"<search>buttermilk substitutes</search>",
                    "<clarify>Do you mean store-bought commercial substitutes or homemade ones?</clarify>"});
  const auto clar = run_episode(c, 1, p, idx, EpisodeConfig{});
  ASSERT_EQ(clar.terminal_action, ActionKind::Clarify);
  EXPECT_DOUBLE_EQ(clar.reward.mia(), 1.0);
  EXPECT_NE(clar.search_calls[0].results.entries[0].passage_id, "milk-05");

  ScriptedPolicy follow({"<search>anything</search>", "<answer>powdered buttermilk</answer>"});
  const auto r = apply_clarification(c, 1, clar, "commercial", follow, idx, EpisodeConfig{});
  const std::string qc = "Do you mean store-bought commercial substitutes or homemade ones? commercial";
  EXPECT_EQ(r.question, qc);
  EXPECT_NE(r.prompt.find("Question: " + qc), std::string::npos);
  ASSERT_EQ(r.search_calls.size(), 1u);
  EXPECT_EQ(r.search_calls[0].query, "buttermilk substitutes " + qc);
  EXPECT_EQ(r.search_calls[0].results.entries[0].passage_id, "milk-05");
  EXPECT_DOUBLE_EQ(r.reward.outcome(), 1.0);
  EXPECT_DOUBLE_EQ(r.reward.mia(), 0.0);
}

TEST(Clarification, ReplyOnlyAndFirstQueryOptions) {
  const auto& idx = testsupport::fixture_index();
  const auto& c = conv("c2-buttermilk");
  ScriptedPolicy p({"<search>buttermilk substitutes</search>", "<search>buttermilk</search>",
                    "<clarify>Which kind?</clarify>"});
  const auto clar = run_episode(c, 1, p, idx, EpisodeConfig{});
  EpisodeConfig cfg;
  cfg.reply_merge = ReplyMerge::ReplyOnly;
  cfg.rewritten_query = RewrittenQueryChoice::First;
  ScriptedPolicy follow({"<search>x</search>", "<answer>y</answer>"});
  const auto r = apply_clarification(c, 1, clar, "  homemade ", follow, idx, cfg);
  EXPECT_EQ(r.question, "homemade");
  EXPECT_EQ(r.search_calls[0].query, "buttermilk substitutes homemade");
}

TEST(Clarification, RequiresClarifyingEpisode) {
  const auto& idx = testsupport::fixture_index();
  ScriptedPolicy p({"<answer>x</answer>"});
  const auto r = run_episode(conv("c1-vinyl"), 0, p, idx, EpisodeConfig{});
  ScriptedPolicy follow({"<answer>y</answer>"});
  EXPECT_EQ(code_of([&] { apply_clarification(conv("c1-vinyl"), 0, r, "x", follow, idx, EpisodeConfig{}); }),
            "NOT_A_CLARIFICATION");
}

TEST(Group, AdvantagesFromRewards) {
  const auto& idx = testsupport::fixture_index();
  const auto& c = conv("c1-vinyl");
  const PolicyFactory make = [](std::size_t rollout, std::uint64_t) -> std::unique_ptr<Policy> {
    if (rollout % 2 == 0) return std::make_unique<ScriptedPolicy>(std::vector<std::string>{"<answer>1948</answer>"});
    return std::make_unique<ScriptedPolicy>(std::vector<std::string>{"<answer>1950</answer>"});
  };
  const auto g = run_group(c, 0, make, idx, EpisodeConfig{}, 4, 5);
  ASSERT_EQ(g.episodes.size(), 4u);
  EXPECT_NEAR(g.advantages.advantages[0], 1.0, 1e-12);
  EXPECT_NEAR(g.advantages.advantages[1], -1.0, 1e-12);
  EXPECT_EQ(g.episodes[2].seed, derive_seed(5, c.id, 0, 2));
  EXPECT_EQ(code_of([&] { run_group(c, 0, make, idx, EpisodeConfig{}, 1); }), "GROUP_TOO_SMALL");
}

TEST(Serialization, EpisodeJson) {
  const auto& idx = testsupport::fixture_index();
  ScriptedPolicy p({"<search>Titan</search>", "<answer>Titan</answer>"});
  const auto j = to_json(run_episode(conv("c3-titan"), 0, p, idx, EpisodeConfig{}));
  EXPECT_EQ(j["terminal_action"], "answer");
  EXPECT_EQ(j["steps"].size(), 3u);
  EXPECT_EQ(j["search_calls"][0]["results"][0]["rank"], 1);
  EXPECT_TRUE(j["clarification_text"].is_null());
  EXPECT_EQ(j["reward"]["total"], 2.0);
}
