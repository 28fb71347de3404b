#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <utility>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "convsearch/conversation.hpp"
#include "convsearch/episode.hpp"
#include "convsearch/error.hpp"
#include "convsearch/harness.hpp"
#include "convsearch/retrieval.hpp"

namespace convsearch {

// Result of a service call: HTTP status plus JSON body.
struct ServiceReply {
  int status = 200;
  nlohmann::json body;
};

// Session state machine behind the HTTP endpoints.
//
//   POST /sessions                      {mode?: "live"|"replay", conversation_id?}
//   GET  /sessions/{id}                 transcript
//   POST /sessions/{id}/messages        live: {text}; replay: {turn_index?}
//   POST /sessions/{id}/clarification   {text}
//
// Replay sessions walk a dataset conversation with gold history and attach
// the reward breakdown; their episodes are identical to evaluate_run's for
// the same turn and seed. Each session runs one episode at a time.
class SessionService {
 public:
  SessionService(const Index& index, std::vector<Conversation> dataset, TurnPolicyFactory make_policy,
                 RunConfig cfg)
      : index_(index), make_policy_(std::move(make_policy)), cfg_(std::move(cfg)) {
    for (auto& c : dataset) {
      const std::string id = c.id;
      dataset_.emplace(id, std::move(c));
    }
    episode_cfg_ = cfg_.episode;
    episode_cfg_.temperature = cfg_.temperature_eval;
  }

  ServiceReply create_session(const nlohmann::json& body) {
    auto s = std::make_shared<Session>();
    const std::string mode = body.value("mode", body.contains("conversation_id") ? "replay" : "live");
    if (mode == "replay") {
      const std::string cid = body.value("conversation_id", "");
      const auto it = dataset_.find(cid);
      if (it == dataset_.end()) return error(404, "CONVERSATION_NOT_FOUND", "no conversation '" + cid + "'");
      s->replay = &it->second;
    } else if (mode != "live") {
      return error(400, "BAD_REQUEST", "mode must be 'live' or 'replay'");
    }
    std::unique_lock lock(sessions_mutex_);
    s->id = "s" + std::to_string(++next_id_);
    s->live.id = s->id;
    sessions_.emplace(s->id, s);
    return {201, {{"session_id", s->id}, {"mode", mode}}};
  }

  ServiceReply get_session(const std::string& id) {
    auto s = find(id);
    if (!s) return session_not_found(id);
    std::lock_guard lock(s->mutex);
    return {200, transcript_json(*s)};
  }

  ServiceReply post_message(const std::string& id, const nlohmann::json& body) {
    auto s = find(id);
    if (!s) return session_not_found(id);
    std::lock_guard lock(s->mutex);
    try {
      if (s->replay) {
        const std::size_t ti = body.value("turn_index", s->next_replay_turn);
        if (ti >= s->replay->turns.size()) {
          return error(409, "CONVERSATION_FINISHED", "replay conversation has no turn " + std::to_string(ti));
        }
        const std::uint64_t seed = derive_seed(cfg_.seed, s->replay->id, ti, 0);
        auto policy = make_policy_({s->replay, ti, 0, seed, false});
        EpisodeResult r = run_episode(*s->replay, ti, *policy, index_, episode_cfg_, seed);
        s->next_replay_turn = ti + 1;
        return {200, record_turn(*s, s->replay->turns[ti].query, ti, std::move(r), false)};
      }
      if (!body.contains("text") || !body["text"].is_string() || text::trim(body["text"].get<std::string>()).empty()) {
        return error(400, "BAD_REQUEST", "message needs a non-empty 'text'");
      }
      const std::string query = body["text"].get<std::string>();
      const std::size_t ti = s->live.turns.size();
      ConversationTurn turn;
      turn.query = query;
      s->live.turns.push_back(std::move(turn));
      try {
        const std::uint64_t seed = derive_seed(cfg_.seed, s->id, ti, 0);
        auto policy = make_policy_({nullptr, ti, 0, seed, false});
        EpisodeResult r = run_episode(s->live, ti, *policy, index_, episode_cfg_, seed, s->live_history);
        return {200, record_turn(*s, query, ti, std::move(r), false)};
      } catch (const Error&) {
        s->live.turns.pop_back();
        throw;
      }
    } catch (const Error& e) {
      return episode_error(e);
    }
  }

  ServiceReply post_clarification(const std::string& id, const nlohmann::json& body) {
    auto s = find(id);
    if (!s) return session_not_found(id);
    std::lock_guard lock(s->mutex);
    if (s->turns.empty() || !s->turns.back().result.clarification_text || s->turns.back().clarification_answered) {
      return error(409, "NO_PENDING_CLARIFICATION", "session has no pending clarification");
    }
    if (!body.contains("text") || !body["text"].is_string()) {
      return error(400, "BAD_REQUEST", "clarification reply needs 'text'");
    }
    const std::string reply = body["text"].get<std::string>();
    SessionTurn& prior = s->turns.back();
    const Conversation& conv = s->replay ? *s->replay : s->live;
    try {
      const std::uint64_t seed = derive_seed(cfg_.seed, conv.id, prior.turn_index, 1);
      auto policy = make_policy_({s->replay, prior.turn_index, 0, seed, true});
      std::optional<std::vector<HistoryTurn>> history;
      if (!s->replay) history = prior.history;
      EpisodeResult r = apply_clarification(conv, prior.turn_index, prior.result, reply, *policy, index_,
                                            episode_cfg_, seed, std::nullopt, history);
      prior.clarification_answered = true;
      return {200, record_turn(*s, reply, prior.turn_index, std::move(r), true)};
    } catch (const Error& e) {
      return episode_error(e);
    }
  }

  // Binds the routes onto an httplib server.
  void mount(httplib::Server& server) {
    auto send = [](httplib::Response& res, const ServiceReply& reply) {
      res.status = reply.status;
      res.set_content(reply.body.dump(), "application/json");
    };
    auto parse = [](const httplib::Request& req) -> std::optional<nlohmann::json> {
      if (req.body.empty()) return nlohmann::json::object();
      try {
        auto j = nlohmann::json::parse(req.body);
        if (!j.is_object()) return std::nullopt;
        return j;
      } catch (const nlohmann::json::parse_error&) {
        return std::nullopt;
      }
    };
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Headers", "Content-Type"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    server.Get("/health", [send](const httplib::Request&, httplib::Response& res) {
      send(res, {200, {{"status", "ok"}}});
    });
    server.Post("/sessions", [this, send, parse](const httplib::Request& req, httplib::Response& res) {
      const auto body = parse(req);
      send(res, body ? create_session(*body) : error(400, "BAD_REQUEST", "body must be a JSON object"));
    });
    server.Get(R"(/sessions/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, get_session(req.matches[1]));
    });
    server.Post(R"(/sessions/([^/]+)/messages)",
                [this, send, parse](const httplib::Request& req, httplib::Response& res) {
                  const auto body = parse(req);
                  send(res, body ? post_message(req.matches[1], *body)
                                 : error(400, "BAD_REQUEST", "body must be a JSON object"));
                });
    server.Post(R"(/sessions/([^/]+)/clarification)",
                [this, send, parse](const httplib::Request& req, httplib::Response& res) {
                  const auto body = parse(req);
                  send(res, body ? post_clarification(req.matches[1], *body)
                                 : error(400, "BAD_REQUEST", "body must be a JSON object"));
                });
  }

 private:
  struct SessionTurn {
    std::string user_text;
    std::size_t turn_index = 0;
    bool follow_up = false;
    bool clarification_answered = false;
    std::vector<HistoryTurn> history;  // context the episode saw (live mode)
    EpisodeResult result;
  };

  struct Session {
    std::string id;
    std::mutex mutex;
    const Conversation* replay = nullptr;
    std::size_t next_replay_turn = 0;
    Conversation live;
    std::vector<HistoryTurn> live_history;
    std::vector<SessionTurn> turns;
  };

  static ServiceReply error(int status, const std::string& code, const std::string& message) {
    return {status, {{"error", {{"code", code}, {"message", message}}}}};
  }

  static ServiceReply session_not_found(const std::string& id) {
    return error(404, "SESSION_NOT_FOUND", "no session '" + id + "'");
  }

  static ServiceReply episode_error(const Error& e) {
    const std::string& code = e.code();
    const int status = code == "FORMAT_VIOLATION" ? 422
                       : (code == "ENDPOINT_UNREACHABLE" || code == "TIMEOUT" || code == "MALFORMED_RESPONSE")
                           ? 502
                           : 500;
    return error(status, code, e.what());
  }

  std::shared_ptr<Session> find(const std::string& id) {
    std::shared_lock lock(sessions_mutex_);
    const auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
  }

  nlohmann::json turn_json(const Session& s, const SessionTurn& t) const {
    nlohmann::json j = to_json(t.result);
    j["user_text"] = t.user_text;
    j["turn_index"] = t.turn_index;
    j["follow_up"] = t.follow_up;
    j["pending_clarification"] = t.result.clarification_text.has_value() && !t.clarification_answered;
    if (!s.replay) j.erase("reward");
    return j;
  }

  nlohmann::json record_turn(Session& s, std::string user_text, std::size_t turn_index, EpisodeResult r,
                             bool follow_up) {
    SessionTurn t;
    t.user_text = std::move(user_text);
    t.turn_index = turn_index;
    t.follow_up = follow_up;
    t.history = s.live_history;
    t.result = std::move(r);
    if (!s.replay) {
      const TrajectoryStep* term = t.result.trajectory.terminal();
      const std::string produced = term ? term->text : std::string();
      if (follow_up) {
        s.live_history.back().answer = produced;
      } else {
        s.live_history.push_back({t.user_text, produced});
      }
    }
    s.turns.push_back(std::move(t));
    return turn_json(s, s.turns.back());
  }

  nlohmann::json transcript_json(const Session& s) const {
    nlohmann::json turns = nlohmann::json::array();
    for (const auto& t : s.turns) turns.push_back(turn_json(s, t));
    const bool pending = !s.turns.empty() && s.turns.back().result.clarification_text.has_value() &&
                         !s.turns.back().clarification_answered;
    return {{"session_id", s.id},
            {"mode", s.replay ? "replay" : "live"},
            {"conversation_id", s.replay ? nlohmann::json(s.replay->id) : nlohmann::json()},
            {"pending_clarification", pending},
            {"turns", std::move(turns)}};
  }

  const Index& index_;
  std::map<std::string, Conversation> dataset_;
  TurnPolicyFactory make_policy_;
  RunConfig cfg_;
  EpisodeConfig episode_cfg_;
  std::shared_mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t next_id_ = 0;
};

}  // namespace convsearch
