#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "convsearch/conversation.hpp"
#include "convsearch/episode.hpp"
#include "convsearch/error.hpp"
#include "convsearch/grpo.hpp"
#include "convsearch/metrics.hpp"
#include "convsearch/policy.hpp"
#include "convsearch/retrieval.hpp"

namespace convsearch {

// ---------------------------------------------------------------------------
// Run configuration (flat key = value file)
// ---------------------------------------------------------------------------

enum class HistoryMode { TeacherForced, SelfHistory };

struct RunConfig {
  EpisodeConfig episode;
  Bm25Params bm25;
  double temperature_eval = 0.0;
  double temperature_rollout = 1.0;
  double epsilon = 0.2;
  double gamma = 0.001;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::size_t group_size = 4;
  HistoryMode history_mode = HistoryMode::TeacherForced;
  bool short_answer_dataset = false;
  std::string template_file;
  HttpPolicyConfig endpoint;
  std::string host = "127.0.0.1";
  int port = 8080;
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw HarnessError("CONFIG_ERROR", key + ": expected a boolean, got '" + v + "'");
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  T out{};
  in >> out;
  if (in.fail() || !in.eof()) {
    throw HarnessError("CONFIG_ERROR", key + ": cannot parse '" + v + "' as a number");
  }
  return out;
}

inline std::size_t parse_positive(const std::string& key, const std::string& v) {
  const auto n = parse_number<long long>(key, v);
  if (n <= 0) throw HarnessError("CONFIG_ERROR", key + " must be positive");
  return static_cast<std::size_t>(n);
}

}  // namespace detail

// Applies one key; unknown keys and bad values raise CONFIG_ERROR.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_number;
  using detail::parse_positive;
  auto& ep = cfg.episode;
  auto choice = [&](std::initializer_list<const char*> allowed) {
    for (const char* a : allowed) {
      if (value == a) return;
    }
    throw HarnessError("CONFIG_ERROR", key + ": unsupported value '" + value + "'");
  };
  if (key == "top_k") ep.top_k = parse_positive(key, value);
  else if (key == "max_search_calls") ep.max_search_calls = parse_positive(key, value);
  else if (key == "max_total_tokens") ep.max_total_tokens = parse_positive(key, value);
  else if (key == "passage_truncation") ep.passage_truncation = parse_positive(key, value);
  else if (key == "max_new_tokens") ep.max_new_tokens = parse_positive(key, value);
  else if (key == "template") ep.template_id = value;
  else if (key == "template_file") cfg.template_file = value;
  else if (key == "outcome_metric") {
    choice({"f1", "em"});
    ep.reward.outcome_metric = value == "em" ? OutcomeMetric::EM : OutcomeMetric::F1;
  } else if (key == "reward_weight") ep.reward.weight = parse_number<double>(key, value);
  else if (key == "short_answer_max_tokens") ep.reward.info_gain.short_max_tokens = parse_positive(key, value);
  else if (key == "long_overlap") {
    choice({"concatenated", "per_passage_max"});
    ep.reward.info_gain.long_per_passage_max = value == "per_passage_max";
  } else if (key == "short_overlap") {
    choice({"max_over_calls", "cumulative_union"});
    ep.reward.info_gain.short_cumulative_union = value == "cumulative_union";
  } else if (key == "rewritten_query") {
    choice({"last", "first"});
    ep.rewritten_query = value == "first" ? RewrittenQueryChoice::First : RewrittenQueryChoice::Last;
  } else if (key == "reply_merge") {
    choice({"append", "reply_only"});
    ep.reply_merge = value == "reply_only" ? ReplyMerge::ReplyOnly : ReplyMerge::Append;
  } else if (key == "refusal_patterns") {
    ep.refusals.patterns.clear();
    std::istringstream in(value);
    for (std::string p; std::getline(in, p, '|');) {
      if (!text::trim(p).empty()) ep.refusals.patterns.emplace_back(text::trim(p));
    }
  } else if (key == "bm25_k1") cfg.bm25.k1 = parse_number<double>(key, value);
  else if (key == "bm25_b") cfg.bm25.b = parse_number<double>(key, value);
  else if (key == "temperature_eval") cfg.temperature_eval = parse_number<double>(key, value);
  else if (key == "temperature_rollout") cfg.temperature_rollout = parse_number<double>(key, value);
  else if (key == "epsilon") cfg.epsilon = parse_number<double>(key, value);
  else if (key == "gamma") cfg.gamma = parse_number<double>(key, value);
  else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "threads") cfg.threads = parse_positive(key, value);
  else if (key == "group_size") cfg.group_size = parse_positive(key, value);
  else if (key == "history_mode") {
    choice({"teacher_forced", "self_history"});
    cfg.history_mode = value == "self_history" ? HistoryMode::SelfHistory : HistoryMode::TeacherForced;
  } else if (key == "short_answer_dataset") cfg.short_answer_dataset = parse_bool(key, value);
  else if (key == "endpoint") cfg.endpoint.endpoint = value;
  else if (key == "retries") cfg.endpoint.retries = static_cast<int>(parse_number<long long>(key, value));
  else if (key == "backoff_ms") cfg.endpoint.backoff = std::chrono::milliseconds(parse_positive(key, value));
  else if (key == "timeout_ms") cfg.endpoint.timeout = std::chrono::milliseconds(parse_positive(key, value));
  else if (key == "max_in_flight") cfg.endpoint.max_in_flight = static_cast<std::ptrdiff_t>(parse_positive(key, value));
  else if (key == "host") cfg.host = value;
  else if (key == "port") cfg.port = static_cast<int>(parse_positive(key, value));
  else throw HarnessError("CONFIG_ERROR", "unknown config key '" + key + "'");
}

// "key = value" lines; '#' starts a comment.
inline void read_config(std::istream& in, RunConfig& cfg) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto body = text::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) {
      throw HarnessError("CONFIG_ERROR", "line " + std::to_string(line_no) + ": expected key = value");
    }
    set_config_value(cfg, std::string(text::trim(body.substr(0, eq))),
                     std::string(text::trim(body.substr(eq + 1))));
  }
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw HarnessError("IO_ERROR", "cannot open config '" + path + "'");
  RunConfig cfg;
  read_config(in, cfg);
  return cfg;
}

// Canonical settings that affect results (transport settings excluded).
inline nlohmann::json config_json(const RunConfig& cfg) {
  const auto& ep = cfg.episode;
  return {{"top_k", ep.top_k},
          {"max_search_calls", ep.max_search_calls},
          {"max_total_tokens", ep.max_total_tokens},
          {"passage_truncation", ep.passage_truncation},
          {"max_new_tokens", ep.max_new_tokens},
          {"template", ep.template_id},
          {"outcome_metric", std::string(to_string(ep.reward.outcome_metric))},
          {"reward_weight", ep.reward.weight},
          {"short_answer_max_tokens", ep.reward.info_gain.short_max_tokens},
          {"long_overlap", ep.reward.info_gain.long_per_passage_max ? "per_passage_max" : "concatenated"},
          {"short_overlap", ep.reward.info_gain.short_cumulative_union ? "cumulative_union" : "max_over_calls"},
          {"rewritten_query", ep.rewritten_query == RewrittenQueryChoice::First ? "first" : "last"},
          {"reply_merge", ep.reply_merge == ReplyMerge::ReplyOnly ? "reply_only" : "append"},
          {"refusal_patterns", ep.refusals.patterns},
          {"bm25_k1", cfg.bm25.k1},
          {"bm25_b", cfg.bm25.b},
          {"temperature_eval", cfg.temperature_eval},
          {"temperature_rollout", cfg.temperature_rollout},
          {"epsilon", cfg.epsilon},
          {"gamma", cfg.gamma},
          {"seed", cfg.seed},
          {"history_mode", cfg.history_mode == HistoryMode::SelfHistory ? "self_history" : "teacher_forced"},
          {"short_answer_dataset", cfg.short_answer_dataset}};
}

inline std::string config_hash(const RunConfig& cfg) { return text::hex64(text::fnv1a(config_json(cfg).dump())); }

inline Index load_index(const std::string& corpus_path, const Bm25Params& params = {}) {
  std::ifstream in(corpus_path, std::ios::binary);
  if (!in) throw HarnessError("IO_ERROR", "cannot open corpus '" + corpus_path + "'");
  return Index::build(read_corpus_jsonl(in), params);
}

// ---------------------------------------------------------------------------
// Policy sources
// ---------------------------------------------------------------------------

struct PolicyRequest {
  const Conversation* conversation = nullptr;
  std::size_t turn_index = 0;
  std::size_t rollout = 0;
  std::uint64_t seed = 0;
  bool follow_up = false;  // episode after a clarification reply
};

using TurnPolicyFactory = std::function<std::unique_ptr<Policy>(const PolicyRequest&)>;

// Canned segments per (conversation, turn). File format, one entry per line:
//   {conversation_id, turn_index, segments: [...], alternatives?: [[...]],
//    follow_up?: [...]}
// conversation_id "*" matches any conversation (used for live sessions).
class ScriptBook {
 public:
  struct Entry {
    std::vector<std::string> segments;
    std::vector<std::vector<std::string>> alternatives;
    std::vector<std::string> follow_up;
  };

  void add(const std::string& conversation_id, std::size_t turn_index, Entry e) {
    entries_[{conversation_id, turn_index}] = std::move(e);
  }

  const Entry* find(const std::string& conversation_id, std::size_t turn_index) const {
    if (auto it = entries_.find({conversation_id, turn_index}); it != entries_.end()) return &it->second;
    if (auto it = entries_.find({"*", turn_index}); it != entries_.end()) return &it->second;
    return nullptr;
  }

  std::size_t size() const { return entries_.size(); }

  static ScriptBook read(std::istream& in) {
    ScriptBook book;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (text::trim(line).empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        Entry e;
        e.segments = j.at("segments").get<std::vector<std::string>>();
        if (j.contains("alternatives")) {
          e.alternatives = j["alternatives"].get<std::vector<std::vector<std::string>>>();
        }
        if (j.contains("follow_up")) e.follow_up = j["follow_up"].get<std::vector<std::string>>();
        book.add(j.at("conversation_id").get<std::string>(), j.at("turn_index").get<std::size_t>(),
                 std::move(e));
      } catch (const nlohmann::json::exception& e) {
        throw HarnessError("SCHEMA_ERROR", "scripts line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    return book;
  }

  static ScriptBook load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw HarnessError("IO_ERROR", "cannot open scripts '" + path + "'");
    return read(in);
  }

 private:
  std::map<std::pair<std::string, std::size_t>, Entry> entries_;
};

// Scripted policies from a ScriptBook. Rollouts draw from `alternatives`
// (plus the primary script) when `use_alternatives` is set.
inline TurnPolicyFactory scripted_factory(std::shared_ptr<const ScriptBook> book, bool use_alternatives) {
  return [book = std::move(book), use_alternatives](const PolicyRequest& req) -> std::unique_ptr<Policy> {
    const std::string id = req.conversation ? req.conversation->id : "*";
    const ScriptBook::Entry* e = book->find(id, req.turn_index);
    if (e == nullptr) {
      throw PolicyError("SCRIPT_EXHAUSTED",
                        "no script for " + id + " turn " + std::to_string(req.turn_index));
    }
    if (req.follow_up) return std::make_unique<ScriptedPolicy>(e->follow_up);
    if (use_alternatives && !e->alternatives.empty()) {
      std::vector<std::vector<std::string>> all = {e->segments};
      all.insert(all.end(), e->alternatives.begin(), e->alternatives.end());
      return std::make_unique<ScriptMixturePolicy>(std::move(all));
    }
    return std::make_unique<ScriptedPolicy>(e->segments);
  };
}

namespace detail {

// Non-owning adapter so a shared remote policy can be handed out per episode.
class SharedPolicy : public Policy {
 public:
  explicit SharedPolicy(std::shared_ptr<Policy> inner) : inner_(std::move(inner)) {}

 protected:
  GenerationResponse produce(const GenerationRequest& req) override { return inner_->generate(req); }

 private:
  std::shared_ptr<Policy> inner_;
};

}  // namespace detail

inline TurnPolicyFactory shared_factory(std::shared_ptr<Policy> policy) {
  return [policy = std::move(policy)](const PolicyRequest&) -> std::unique_ptr<Policy> {
    return std::make_unique<detail::SharedPolicy>(policy);
  };
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline constexpr std::size_t kLastTurnBucket = 13;

struct RunOutput {
  nlohmann::json report;
  std::vector<std::string> log_lines;  // raw run-log, one JSON document per line
};

namespace detail {

inline bool is_answer_turn(const ConversationTurn& t) {
  return (!t.gold_action || *t.gold_action == ActionKind::Answer) && !text::normalize_text(t.gold_answer).empty();
}

inline std::string final_answer_text(const EpisodeResult& r) {
  const TrajectoryStep* t = r.trajectory.terminal();
  return (t && t->kind == StepKind::Answer) ? t->text : std::string();
}

inline std::size_t reasoning_tokens(const Trajectory& t) {
  std::size_t n = 0;
  for (const auto& s : t.steps) {
    if (s.kind == StepKind::Think) n += text::count_whitespace_tokens(s.text);
  }
  return n;
}

inline nlohmann::json gold_json(const ConversationTurn& t) {
  return {{"answer", t.gold_answer},
          {"action", t.gold_action ? nlohmann::json(std::string(to_string(*t.gold_action))) : nlohmann::json()},
          {"passage_ids", t.gold_passage_ids}};
}

// Per-turn evaluation values; nulls mark metrics that do not apply.
inline nlohmann::json turn_metrics(const ConversationTurn& turn, const EpisodeResult& r, const Index& index,
                                   const RunConfig& cfg) {
  nlohmann::json m;
  const bool answer_turn = is_answer_turn(turn);
  const std::string prediction = final_answer_text(r);
  m["answer_turn"] = answer_turn;
  m["f1"] = answer_turn ? nlohmann::json(metrics::token_f1(prediction, turn.gold_answer)) : nlohmann::json();
  m["em"] = answer_turn && cfg.short_answer_dataset
                ? nlohmann::json(metrics::exact_match(prediction, turn.gold_answer))
                : nlohmann::json();
  if (turn.gold_passage_ids.empty()) {
    m["ndcg3"] = nullptr;
  } else {
    m["ndcg3"] = r.search_calls.empty() ? 0.0 : ndcg_at_k(r.search_calls.back().results, turn.gold_passage_ids, 3);
  }
  if (answer_turn) {
    std::vector<RankedList> lists;
    for (const auto& c : r.search_calls) lists.push_back(c.results);
    m["info_gain"] = metrics::info_gain(lists, turn.gold_answer, index, cfg.episode.reward.info_gain);
  } else {
    m["info_gain"] = nullptr;
  }
  m["action_correct"] =
      turn.gold_action ? nlohmann::json(r.terminal_action == *turn.gold_action) : nlohmann::json();
  m["reasoning_tokens"] = reasoning_tokens(r.trajectory);
  return m;
}

inline void run_parallel(std::size_t jobs, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, jobs));
  if (threads == 1) {
    for (std::size_t i = 0; i < jobs; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < jobs; i = next++) fn(i);
    });
  }
}

struct Mean {
  double sum = 0.0;
  std::size_t n = 0;
  void add(double v) { sum += v, ++n; }
  nlohmann::json value() const { return n ? nlohmann::json(sum / static_cast<double>(n)) : nlohmann::json(); }
};

inline nlohmann::json pearson(const std::vector<std::pair<double, double>>& pairs) {
  if (pairs.size() < 2) return nullptr;
  double mx = 0, my = 0;
  for (const auto& [x, y] : pairs) mx += x, my += y;
  mx /= static_cast<double>(pairs.size());
  my /= static_cast<double>(pairs.size());
  double sxy = 0, sxx = 0, syy = 0;
  for (const auto& [x, y] : pairs) {
    sxy += (x - mx) * (y - my);
    sxx += (x - mx) * (x - mx);
    syy += (y - my) * (y - my);
  }
  if (sxx <= 0 || syy <= 0) return nullptr;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace detail

// Aggregates a raw run-log into the evaluation report. The report depends
// on nothing but the log.
inline nlohmann::json report_from_log(const std::vector<std::string>& lines) {
  using detail::Mean;
  nlohmann::json header;
  Mean f1, em, ndcg, ig, action, clarify, noanswer, reward_total;
  std::size_t turns = 0, errors = 0, ndcg_unjudged = 0, budget_exceeded = 0;
  std::map<std::size_t, Mean> f1_by_pos, reasoning_by_pos;
  std::vector<std::pair<double, double>> pairs;
  nlohmann::json pair_records = nlohmann::json::array();

  for (const auto& line : lines) {
    const auto j = nlohmann::json::parse(line);
    if (j.at("type") == "header") {
      header = j;
      continue;
    }
    ++turns;
    if (j.contains("error")) {
      ++errors;
      continue;
    }
    const auto& m = j.at("metrics");
    const std::size_t bucket = std::min<std::size_t>(j.at("turn_index").get<std::size_t>() + 1, kLastTurnBucket);
    if (!m["f1"].is_null()) {
      f1.add(m["f1"].get<double>());
      f1_by_pos[bucket].add(m["f1"].get<double>());
    }
    if (!m["em"].is_null()) em.add(m["em"].get<double>());
    if (m["ndcg3"].is_null()) {
      ++ndcg_unjudged;
    } else {
      ndcg.add(m["ndcg3"].get<double>());
    }
    if (!m["info_gain"].is_null()) ig.add(m["info_gain"].get<double>());
    if (!m["action_correct"].is_null()) {
      const double ok = m["action_correct"].get<bool>() ? 1.0 : 0.0;
      action.add(ok);
      const auto gold_action = j.at("gold").at("action").get<std::string>();
      if (gold_action == "clarify") clarify.add(ok);
      if (gold_action == "noanswer") noanswer.add(ok);
    }
    reasoning_by_pos[bucket].add(m["reasoning_tokens"].get<double>());
    const auto& ep = j.at("episode");
    reward_total.add(ep.at("reward").at("total").get<double>());
    if (ep.at("budget_exceeded").get<bool>()) ++budget_exceeded;
    if (!m["f1"].is_null() && !m["info_gain"].is_null()) {
      pairs.emplace_back(m["info_gain"].get<double>(), m["f1"].get<double>());
      pair_records.push_back({{"conversation_id", j["conversation_id"]},
                              {"turn_index", j["turn_index"]},
                              {"info_gain", m["info_gain"]},
                              {"f1", m["f1"]}});
    }
  }

  nlohmann::json series = nlohmann::json::array();
  for (std::size_t pos = 1; pos <= kLastTurnBucket; ++pos) {
    const bool has_f1 = f1_by_pos.count(pos) > 0;
    const bool has_tokens = reasoning_by_pos.count(pos) > 0;
    if (!has_f1 && !has_tokens) continue;
    series.push_back({{"turn_position", pos},
                      {"label", pos == kLastTurnBucket ? std::to_string(pos) + "+" : std::to_string(pos)},
                      {"f1", has_f1 ? f1_by_pos[pos].value() : nlohmann::json()},
                      {"answer_turns", has_f1 ? f1_by_pos[pos].n : 0},
                      {"reasoning_tokens", has_tokens ? reasoning_by_pos[pos].value() : nlohmann::json()},
                      {"turns", has_tokens ? reasoning_by_pos[pos].n : 0}});
  }

  nlohmann::json report;
  report["history_mode"] = header.value("history_mode", "teacher_forced");
  report["config_hash"] = header.value("config_hash", "");
  report["corpus_hash"] = header.value("corpus_hash", "");
  report["turns"] = turns;
  report["errors"] = errors;
  report["budget_exceeded"] = budget_exceeded;
  report["aggregates"] = {{"f1", f1.value()},
                          {"em", em.value()},
                          {"ndcg3", ndcg.value()},
                          {"ndcg3_unjudged_turns", ndcg_unjudged},
                          {"info_gain", ig.value()},
                          {"action_accuracy", action.value()},
                          {"clarify_accuracy", clarify.value()},
                          {"noanswer_accuracy", noanswer.value()},
                          {"reward_total", reward_total.value()},
                          {"answer_turns", f1.n}};
  report["per_turn_position"] = std::move(series);
  report["correlation"] = {{"pearson_info_gain_f1", detail::pearson(pairs)}, {"pairs", std::move(pair_records)}};
  return report;
}

inline nlohmann::json log_header(const RunConfig& cfg, const Index& index, std::string_view kind) {
  return {{"type", "header"},
          {"kind", kind},
          {"config", config_json(cfg)},
          {"config_hash", config_hash(cfg)},
          {"corpus_hash", index.fingerprint()},
          {"seed", cfg.seed},
          {"history_mode", cfg.history_mode == HistoryMode::SelfHistory ? "self_history" : "teacher_forced"}};
}

inline nlohmann::json turn_log_record(const Conversation& c, std::size_t turn_index) {
  return {{"type", "turn"}, {"conversation_id", c.id}, {"turn_index", turn_index},
          {"query", c.turns[turn_index].query}, {"gold", detail::gold_json(c.turns[turn_index])}};
}

// Evaluates every turn. Conversations run in parallel; turns within one
// conversation run in order. Episode failures are logged, never fatal.
inline RunOutput evaluate_run(const std::vector<Conversation>& dataset, const TurnPolicyFactory& make_policy,
                              const Index& index, const RunConfig& cfg) {
  EpisodeConfig ep = cfg.episode;
  ep.temperature = cfg.temperature_eval;
  std::vector<std::vector<std::string>> per_conversation(dataset.size());

  detail::run_parallel(dataset.size(), cfg.threads, [&](std::size_t ci) {
    const Conversation& c = dataset[ci];
    std::vector<HistoryTurn> own_history;
    for (std::size_t ti = 0; ti < c.turns.size(); ++ti) {
      nlohmann::json rec = turn_log_record(c, ti);
      const std::uint64_t seed = derive_seed(cfg.seed, c.id, ti, 0);
      std::string produced;
      try {
        auto policy = make_policy({&c, ti, 0, seed, false});
        std::optional<std::vector<HistoryTurn>> history;
        if (cfg.history_mode == HistoryMode::SelfHistory) history = own_history;
        const EpisodeResult r = run_episode(c, ti, *policy, index, ep, seed, history);
        rec["episode"] = to_json(r);
        rec["metrics"] = detail::turn_metrics(c.turns[ti], r, index, cfg);
        produced = r.clarification_text.value_or(detail::final_answer_text(r));
      } catch (const Error& e) {
        rec["error"] = {{"code", e.code()}, {"message", e.what()}};
      }
      own_history.push_back({c.turns[ti].query, produced});
      per_conversation[ci].push_back(rec.dump());
    }
  });

  RunOutput out;
  out.log_lines.push_back(log_header(cfg, index, "eval").dump());
  for (auto& lines : per_conversation) {
    for (auto& l : lines) out.log_lines.push_back(std::move(l));
  }
  out.report = report_from_log(out.log_lines);
  return out;
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

struct RolloutOutput {
  std::vector<grpo::BatchRecord> records;
  nlohmann::json manifest;
};

inline std::string group_id_for(const Conversation& c, std::size_t turn_index) {
  return c.id + ":" + std::to_string(turn_index);
}

// Runs a GRPO group for every turn and collects one batch record per
// rollout. Groups whose episodes fail are skipped and listed in the manifest.
inline RolloutOutput rollout_run(const std::vector<Conversation>& dataset, const TurnPolicyFactory& make_policy,
                                 const Index& index, const RunConfig& cfg, std::size_t group_size) {
  if (group_size < 2) throw GrpoError("GROUP_TOO_SMALL", "group size must be at least 2");
  EpisodeConfig ep = cfg.episode;
  ep.temperature = cfg.temperature_rollout;

  struct GroupOut {
    std::vector<grpo::BatchRecord> records;
    nlohmann::json seeds;
    std::optional<nlohmann::json> skipped;
  };
  std::vector<std::vector<GroupOut>> per_conversation(dataset.size());

  detail::run_parallel(dataset.size(), cfg.threads, [&](std::size_t ci) {
    const Conversation& c = dataset[ci];
    for (std::size_t ti = 0; ti < c.turns.size(); ++ti) {
      GroupOut g;
      const std::string gid = group_id_for(c, ti);
      g.seeds = nlohmann::json::array();
      for (std::size_t i = 0; i < group_size; ++i) g.seeds.push_back(derive_seed(cfg.seed, c.id, ti, i));
      try {
        const auto group = run_group(
            c, ti, [&](std::size_t rollout, std::uint64_t seed) { return make_policy({&c, ti, rollout, seed, false}); },
            index, ep, group_size, cfg.seed);
        for (std::size_t i = 0; i < group.episodes.size(); ++i) {
          const auto& e = group.episodes[i];
          g.records.push_back({gid, gid + ":" + std::to_string(i), e.prompt, e.trajectory, e.reward,
                               group.advantages.advantages[i]});
        }
      } catch (const Error& e) {
        g.records.clear();
        g.skipped = nlohmann::json{{"group_id", gid}, {"code", e.code()}, {"message", e.what()}};
      }
      per_conversation[ci].push_back(std::move(g));
    }
  });

  RolloutOutput out;
  nlohmann::json seeds = nlohmann::json::object();
  nlohmann::json skipped = nlohmann::json::array();
  std::size_t groups = 0;
  for (std::size_t ci = 0; ci < dataset.size(); ++ci) {
    for (std::size_t ti = 0; ti < per_conversation[ci].size(); ++ti) {
      auto& g = per_conversation[ci][ti];
      seeds[group_id_for(dataset[ci], ti)] = g.seeds;
      if (g.skipped) {
        skipped.push_back(*g.skipped);
        continue;
      }
      ++groups;
      for (auto& r : g.records) out.records.push_back(std::move(r));
    }
  }
  out.manifest = {{"config", config_json(cfg)},
                  {"config_hash", config_hash(cfg)},
                  {"corpus_hash", index.fingerprint()},
                  {"seed", cfg.seed},
                  {"group_size", group_size},
                  {"groups", groups},
                  {"records", out.records.size()},
                  {"seeds", std::move(seeds)},
                  {"skipped", std::move(skipped)}};
  return out;
}

// Writes <out>/batch.jsonl and <out>/manifest.json.
inline void write_rollout(const RolloutOutput& r, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw GrpoError("IO_ERROR", "cannot create '" + out_dir.string() + "': " + ec.message());
  grpo::export_batch(r.records, out_dir / "batch.jsonl");
  std::ofstream m(out_dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!m) throw GrpoError("IO_ERROR", "cannot write manifest in '" + out_dir.string() + "'");
  nlohmann::json manifest = r.manifest;
  manifest["batch_file"] = "batch.jsonl";
  m << manifest.dump(2) << '\n';
}

inline void write_lines(const std::vector<std::string>& lines, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw HarnessError("IO_ERROR", "cannot write '" + path.string() + "'");
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw HarnessError("IO_ERROR", "failed writing '" + path.string() + "'");
}

}  // namespace convsearch
