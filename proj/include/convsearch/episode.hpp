#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "convsearch/conversation.hpp"
#include "convsearch/error.hpp"
#include "convsearch/grpo.hpp"
#include "convsearch/policy.hpp"
#include "convsearch/protocol.hpp"
#include "convsearch/retrieval.hpp"
#include "convsearch/rewards.hpp"

namespace convsearch {

// Which earlier search payload serves as q' when expanding a clarified query.
enum class RewrittenQueryChoice { Last, First };
// How the user's reply merges into the clarified question.
enum class ReplyMerge { Append, ReplyOnly };

struct EpisodeConfig {
  std::size_t top_k = 3;
  std::size_t max_search_calls = 4;
  std::size_t max_total_tokens = 4096;
  std::size_t passage_truncation = 120;  // whitespace tokens per rendered passage
  std::size_t max_new_tokens = 512;
  double temperature = 1.0;
  std::string template_id = "default";
  RewardConfig reward;
  RefusalPatterns refusals;
  RewrittenQueryChoice rewritten_query = RewrittenQueryChoice::Last;
  ReplyMerge reply_merge = ReplyMerge::Append;

  void validate() const {
    if (top_k == 0 || max_search_calls == 0 || max_total_tokens == 0 || passage_truncation == 0 ||
        max_new_tokens == 0) {
      throw EpisodeError("INVALID_CONFIG", "episode limits must be positive");
    }
  }
};

struct EpisodeResult {
  Trajectory trajectory;
  std::vector<SearchCall> search_calls;
  RewardBreakdown reward;
  ActionKind terminal_action = ActionKind::NoAnswer;
  std::optional<std::string> clarification_text;
  bool budget_exceeded = false;
  std::string prompt;    // prompt of the first policy call
  std::string question;  // query the answer was generated for
  std::uint64_t seed = 0;
};

// splitmix64 finalizer.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t run_seed, std::string_view conversation_id,
                                 std::size_t turn_index, std::size_t rollout_index) {
  std::uint64_t h = text::fnv1a(conversation_id, mix64(run_seed));
  h = mix64(h ^ mix64(turn_index + 1));
  return mix64(h ^ mix64((rollout_index + 1) * 0x100000001b3ULL));
}

// Everything needed to run one turn, independent of where it came from.
struct TurnSetup {
  std::vector<HistoryTurn> history;
  std::string question;
  TurnGold gold;
  std::uint64_t seed = 0;
  // When set, every retrieval call uses this string instead of the policy's
  // search payload (clarification follow-ups).
  std::optional<std::string> retrieval_override;
};

// Gold-history (teacher-forced) context for `turn_index`.
inline std::vector<HistoryTurn> gold_history(const Conversation& c, std::size_t turn_index) {
  std::vector<HistoryTurn> h;
  for (std::size_t i = 0; i < turn_index && i < c.turns.size(); ++i) {
    h.push_back({c.turns[i].query, c.turns[i].gold_answer});
  }
  return h;
}

inline EpisodeResult run_turn(const TurnSetup& setup, Policy& policy, const Index& index,
                              const EpisodeConfig& config) {
  config.validate();
  EpisodeResult result;
  result.question = setup.question;
  result.seed = setup.seed;

  PromptContext ctx{setup.history, setup.question, ""};
  std::size_t tokens_used = 0;
  std::size_t call_index = 0;
  auto& steps = result.trajectory.steps;

  auto force_no_answer = [&] {
    result.budget_exceeded = true;
    steps.push_back({StepKind::NoAnswer, ""});
  };

  while (steps.empty() || !is_terminal(steps.back().kind)) {
    if (tokens_used >= config.max_total_tokens) {
      force_no_answer();
      break;
    }
    GenerationRequest req;
    req.prompt = build_prompt(ctx, config.template_id);
    if (call_index == 0) result.prompt = req.prompt;
    req.max_tokens = std::min(config.max_new_tokens, config.max_total_tokens - tokens_used);
    req.temperature = config.temperature;
    req.seed = mix64(setup.seed ^ mix64(call_index++));
    GenerationResponse resp = policy.generate(req);

    if (tokens_used + resp.token_count > config.max_total_tokens) {
      force_no_answer();
      break;
    }
    tokens_used += resp.token_count;

    std::vector<TrajectoryStep> emitted;
    try {
      emitted = parse_segment(resp.text, config.refusals);
    } catch (const ProtocolError& e) {
      throw EpisodeError("FORMAT_VIOLATION", e.code() + " in policy output: " + e.what());
    }
    if (emitted.empty()) {
      throw EpisodeError("FORMAT_VIOLATION",
                         std::string(protocol_codes::kMissingTerminal) + ": segment has no tagged step");
    }

    bool budget_hit = false;
    for (auto& step : emitted) {
      if (!steps.empty() && is_terminal(steps.back().kind)) break;
      if (step.kind == StepKind::Search) {
        if (result.search_calls.size() >= config.max_search_calls) {
          budget_hit = true;
          break;
        }
        const std::string query = setup.retrieval_override.value_or(step.text);
        RankedList ranked = index.search(query, config.top_k);
        TrajectoryStep info{StepKind::Information,
                            std::string(text::trim(render_passages(ranked, index, config.passage_truncation)))};
        ctx.transcript_so_far += render_step(step) + "\n" + render_step(info) + "\n";
        steps.push_back(std::move(step));
        steps.push_back(std::move(info));
        result.search_calls.push_back({query, std::move(ranked)});
      } else {
        ctx.transcript_so_far += render_step(step) + "\n";
        steps.push_back(std::move(step));
      }
    }
    if (budget_hit) {
      force_no_answer();
      break;
    }
  }

  result.trajectory.token_count = tokens_used;
  const TrajectoryStep& terminal = steps.back();
  result.terminal_action = *action_of(terminal.kind);
  if (terminal.kind == StepKind::Clarify) result.clarification_text = terminal.text;
  result.reward = compute_reward(result.trajectory, result.search_calls, setup.gold, index, config.reward);
  return result;
}

inline const ConversationTurn& turn_at(const Conversation& c, std::size_t turn_index) {
  if (turn_index >= c.turns.size()) {
    throw EpisodeError("INVALID_TURN", "conversation '" + c.id + "' has no turn " +
                                           std::to_string(turn_index));
  }
  return c.turns[turn_index];
}

// Runs one turn with gold history unless `history` is supplied.
inline EpisodeResult run_episode(const Conversation& conversation, std::size_t turn_index,
                                 Policy& policy, const Index& index, const EpisodeConfig& config,
                                 std::uint64_t seed = 0,
                                 std::optional<std::vector<HistoryTurn>> history = std::nullopt) {
  const auto& turn = turn_at(conversation, turn_index);
  TurnSetup setup;
  setup.history = history ? std::move(*history) : gold_history(conversation, turn_index);
  setup.question = turn.query;
  setup.gold = turn.gold();
  setup.seed = seed;
  return run_turn(setup, policy, index, config);
}

struct GroupResult {
  std::vector<EpisodeResult> episodes;
  grpo::AdvantageSet advantages;
};

// Builds a fresh policy for one rollout; receives the rollout index and seed.
using PolicyFactory = std::function<std::unique_ptr<Policy>(std::size_t rollout, std::uint64_t seed)>;

inline GroupResult run_group(const Conversation& conversation, std::size_t turn_index,
                             const PolicyFactory& make_policy, const Index& index,
                             const EpisodeConfig& config, std::size_t group_size,
                             std::uint64_t run_seed = 0) {
  if (group_size < 2) {
    throw GrpoError("GROUP_TOO_SMALL", "group size must be at least 2");
  }
  turn_at(conversation, turn_index);
  GroupResult out;
  std::vector<double> rewards;
  for (std::size_t i = 0; i < group_size; ++i) {
    const std::uint64_t seed = derive_seed(run_seed, conversation.id, turn_index, i);
    auto policy = make_policy(i, seed);
    out.episodes.push_back(run_episode(conversation, turn_index, *policy, index, config, seed));
    rewards.push_back(out.episodes.back().reward.total());
  }
  out.advantages = grpo::group_advantages(rewards);
  return out;
}

inline std::string clarified_question(const EpisodeResult& clarifying, std::string_view user_reply,
                                      ReplyMerge merge) {
  const std::string reply(text::trim(user_reply));
  if (merge == ReplyMerge::ReplyOnly) return reply;
  std::string q = *clarifying.clarification_text;
  if (!reply.empty()) q += " " + reply;
  return q;
}

// Follow-up episode after a clarification: retrieval uses q' + " " + q^c and
// the answer is generated for q^c in place of the original query. The
// follow-up is scored against `gold` (default: the turn's follow-up answer,
// or its gold answer, with no action annotation).
inline EpisodeResult apply_clarification(const Conversation& conversation, std::size_t turn_index,
                                         const EpisodeResult& clarifying, std::string_view user_reply,
                                         Policy& policy, const Index& index, const EpisodeConfig& config,
                                         std::uint64_t seed = 0,
                                         std::optional<TurnGold> gold = std::nullopt,
                                         std::optional<std::vector<HistoryTurn>> history = std::nullopt) {
  if (clarifying.terminal_action != ActionKind::Clarify || !clarifying.clarification_text) {
    throw EpisodeError("NOT_A_CLARIFICATION", "episode did not end in a clarification");
  }
  const auto& turn = turn_at(conversation, turn_index);
  TurnSetup setup;
  setup.history = history ? std::move(*history) : gold_history(conversation, turn_index);
  setup.question = clarified_question(clarifying, user_reply, config.reply_merge);
  if (gold) {
    setup.gold = std::move(*gold);
  } else {
    setup.gold = turn.follow_up_gold();
  }
  setup.seed = seed;
  if (!clarifying.search_calls.empty()) {
    const auto& prior = config.rewritten_query == RewrittenQueryChoice::Last
                            ? clarifying.search_calls.back()
                            : clarifying.search_calls.front();
    setup.retrieval_override = prior.query + " " + setup.question;
  }
  return run_turn(setup, policy, index, config);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const RankedList& r) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& e : r.entries) {
    out.push_back({{"passage_id", e.passage_id}, {"score", e.score}, {"rank", e.rank}});
  }
  return out;
}

inline nlohmann::json to_json(const Trajectory& t) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : t.steps) steps.push_back({{"kind", std::string(tag_name(s.kind))}, {"text", s.text}});
  return steps;
}

inline nlohmann::json to_json(const EpisodeResult& r) {
  nlohmann::json calls = nlohmann::json::array();
  for (const auto& c : r.search_calls) calls.push_back({{"query", c.query}, {"results", to_json(c.results)}});
  nlohmann::json j = {{"steps", to_json(r.trajectory)},
                      {"token_count", r.trajectory.token_count},
                      {"search_calls", std::move(calls)},
                      {"reward", grpo::reward_json(r.reward)},
                      {"terminal_action", std::string(to_string(r.terminal_action))},
                      {"budget_exceeded", r.budget_exceeded},
                      {"question", r.question},
                      {"seed", r.seed}};
  j["clarification_text"] = r.clarification_text ? nlohmann::json(*r.clarification_text) : nlohmann::json();
  return j;
}

}  // namespace convsearch
