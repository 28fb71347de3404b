#pragma once

#include <cstddef>
#include <fstream>
#include <istream>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "convsearch/error.hpp"
#include "convsearch/protocol.hpp"
#include "convsearch/rewards.hpp"
#include "convsearch/text.hpp"

namespace convsearch {

struct ConversationTurn {
  std::string query;
  std::string gold_answer;
  std::optional<ActionKind> gold_action;
  std::set<std::string> gold_passage_ids;
  std::optional<std::string> follow_up_answer;  // expected answer after a clarification

  TurnGold gold() const { return {gold_answer, gold_action, gold_passage_ids}; }

  // Scored target for the episode that follows the user's clarification reply.
  TurnGold follow_up_gold() const {
    return {follow_up_answer.value_or(gold_answer), std::nullopt, gold_passage_ids};
  }
};

struct Conversation {
  std::string id;
  std::vector<ConversationTurn> turns;
};

namespace detail {

[[noreturn]] inline void schema_error(std::size_t line, const std::string& what) {
  throw HarnessError("SCHEMA_ERROR", "line " + std::to_string(line) + ": " + what);
}

inline ConversationTurn parse_turn(const nlohmann::json& t, std::size_t line, std::size_t index) {
  const std::string where = "turn " + std::to_string(index);
  if (!t.is_object()) schema_error(line, where + " is not an object");
  if (!t.contains("query") || !t["query"].is_string() || text::trim(t["query"].get<std::string>()).empty()) {
    schema_error(line, where + ": missing or empty 'query'");
  }
  ConversationTurn turn;
  turn.query = t["query"].get<std::string>();
  if (t.contains("gold_answer") && !t["gold_answer"].is_null()) {
    if (!t["gold_answer"].is_string()) schema_error(line, where + ": 'gold_answer' must be a string");
    turn.gold_answer = t["gold_answer"].get<std::string>();
  }
  if (t.contains("gold_action") && !t["gold_action"].is_null()) {
    if (!t["gold_action"].is_string()) schema_error(line, where + ": 'gold_action' must be a string");
    turn.gold_action = parse_action(t["gold_action"].get<std::string>());
    if (!turn.gold_action) {
      schema_error(line, where + ": unknown gold_action '" + t["gold_action"].get<std::string>() + "'");
    }
  }
  if (t.contains("gold_passage_ids") && !t["gold_passage_ids"].is_null()) {
    if (!t["gold_passage_ids"].is_array()) schema_error(line, where + ": 'gold_passage_ids' must be an array");
    for (const auto& id : t["gold_passage_ids"]) {
      turn.gold_passage_ids.insert(id.is_string() ? id.get<std::string>() : id.dump());
    }
  }
  if (t.contains("follow_up_answer") && !t["follow_up_answer"].is_null()) {
    if (!t["follow_up_answer"].is_string()) schema_error(line, where + ": 'follow_up_answer' must be a string");
    turn.follow_up_answer = t["follow_up_answer"].get<std::string>();
  }
  if (turn.gold_action == ActionKind::Answer && text::trim(turn.gold_answer).empty()) {
    schema_error(line, where + ": answer turns need a non-empty 'gold_answer'");
  }
  return turn;
}

}  // namespace detail

// Dataset file: one conversation per line,
// {id, turns: [{query, gold_answer, gold_action?, gold_passage_ids?,
// follow_up_answer?}]}.
inline std::vector<Conversation> read_dataset(std::istream& in) {
  std::vector<Conversation> out;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      detail::schema_error(line_no, e.what());
    }
    if (!j.is_object()) detail::schema_error(line_no, "expected an object");
    if (!j.contains("id")) detail::schema_error(line_no, "missing 'id'");
    Conversation c;
    c.id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
    if (!j.contains("turns") || !j["turns"].is_array() || j["turns"].empty()) {
      detail::schema_error(line_no, "'turns' must be a non-empty array");
    }
    for (std::size_t i = 0; i < j["turns"].size(); ++i) {
      c.turns.push_back(detail::parse_turn(j["turns"][i], line_no, i));
    }
    if (!seen.insert(c.id).second) {
      throw HarnessError("DUPLICATE_CONVERSATION_ID",
                         "line " + std::to_string(line_no) + ": conversation id '" + c.id + "' repeats");
    }
    out.push_back(std::move(c));
  }
  return out;
}

inline std::vector<Conversation> load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw HarnessError("IO_ERROR", "cannot open dataset '" + path + "'");
  return read_dataset(in);
}

}  // namespace convsearch
