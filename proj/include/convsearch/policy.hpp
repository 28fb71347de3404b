#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <semaphore>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "convsearch/error.hpp"
#include "convsearch/protocol.hpp"
#include "convsearch/text.hpp"

namespace convsearch {

// ---------------------------------------------------------------------------
// Prompt construction
// ---------------------------------------------------------------------------

struct HistoryTurn {
  std::string query;
  std::string answer;
};

struct PromptContext {
  std::vector<HistoryTurn> history;  // oldest first
  std::string current_query;
  std::string transcript_so_far;  // prior steps incl. injected information blocks
};

// Refusals go inside answer tags.
inline constexpr std::string_view kCombinedLabelTemplate =
    "Conversation so far: <context> {context} </context>\n"
    "Question: {question}\n"
    "\n"
    "Reply using tagged steps only.\n"
    "<think> notes </think>  private reasoning, write one after each new result.\n"
    "<search> query </search>  look something up. Resolve pronouns and references from the "
    "conversation so the query stands alone. Results come back in <information> </information>.\n"
    "If the results do not contain the answer, say so in an answer, e.g. "
    "<answer> Sorry, I did not find any useful information. </answer>\n"
    "<clarify> question </clarify>  ask the user when the request is unclear.\n"
    "<answer> text </answer>  final reply, kept short.\n"
    "End with exactly one of the final tags.\n";

// Refusals use a dedicated <noanswer> label.
inline constexpr std::string_view kSeparateLabelTemplate =
    "Conversation so far: <context> {context} </context>\n"
    "Question: {question}\n"
    "\n"
    "Reply using tagged steps only.\n"
    "<think> notes </think>  private reasoning, write one after each new result.\n"
    "<search> query </search>  look something up. Resolve pronouns and references from the "
    "conversation so the query stands alone. Results come back in <information> </information>.\n"
    "<noanswer> </noanswer>  use when the results do not contain the answer.\n"
    "<clarify> question </clarify>  ask the user when the request is unclear.\n"
    "<answer> text </answer>  final reply, kept short.\n"
    "End with exactly one of the final tags.\n";

class TemplateRegistry {
 public:
  TemplateRegistry() {
    templates_.emplace("default", std::string(kCombinedLabelTemplate));
    templates_.emplace("sep_label", std::string(kSeparateLabelTemplate));
  }

  void add(std::string id, std::string body) { templates_[std::move(id)] = std::move(body); }

  // Registers a UTF-8 template file under its stem (e.g. "my_prompt.txt" -> "my_prompt").
  std::string load_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PolicyError("UNKNOWN_TEMPLATE", "cannot read template '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    std::string id = path.stem().string();
    add(id, ss.str());
    return id;
  }

  const std::string& get(std::string_view id) const {
    const auto it = templates_.find(std::string(id));
    if (it == templates_.end()) {
      throw PolicyError("UNKNOWN_TEMPLATE", "no template named '" + std::string(id) + "'");
    }
    return it->second;
  }

 private:
  std::map<std::string, std::string> templates_;
};

inline const TemplateRegistry& default_templates() {
  static const TemplateRegistry registry;
  return registry;
}

namespace detail {

// Single pass over the template so substituted text is never rescanned.
inline std::string fill_placeholders(std::string_view tmpl,
                                     const std::map<std::string, std::string, std::less<>>& values) {
  std::string out;
  out.reserve(tmpl.size());
  for (std::size_t i = 0; i < tmpl.size();) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i);
      if (close != std::string_view::npos) {
        const auto it = values.find(tmpl.substr(i + 1, close - i - 1));
        if (it != values.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out.push_back(tmpl[i++]);
  }
  return out;
}

}  // namespace detail

inline std::string render_history(const std::vector<HistoryTurn>& history) {
  std::string out;
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (!out.empty()) out.push_back('\n');
    out += "Turn " + std::to_string(i + 1) + " user: " + detail::escape_tags(history[i].query) +
           "\nTurn " + std::to_string(i + 1) + " assistant: " + detail::escape_tags(history[i].answer);
  }
  return out;
}

inline std::string build_prompt(const PromptContext& ctx, std::string_view template_id = "default",
                                const TemplateRegistry& registry = default_templates()) {
  if (text::trim(ctx.current_query).empty()) {
    throw PolicyError("INVALID_CONTEXT", "current query is empty");
  }
  std::string prompt = detail::fill_placeholders(
      registry.get(template_id),
      {{"context", render_history(ctx.history)}, {"question", detail::escape_tags(ctx.current_query)}});
  if (!ctx.transcript_so_far.empty()) {
    if (prompt.back() != '\n') prompt.push_back('\n');
    prompt += ctx.transcript_so_far;
  }
  return prompt;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& default_stop_sequences() {
  static const std::vector<std::string> stops = {"</search>", "</answer>", "</clarify>", "</noanswer>"};
  return stops;
}

struct GenerationRequest {
  std::string prompt;
  std::vector<std::string> stop = default_stop_sequences();
  std::size_t max_tokens = 512;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

struct GenerationResponse {
  std::string text;
  std::optional<std::vector<double>> token_logprobs;
  std::size_t token_count = 0;
};

// Cuts `text` right after the earliest occurrence of any stop sequence.
// Returns true when a cut happened before the end of the text.
inline bool truncate_at_stop(std::string& text, const std::vector<std::string>& stops) {
  std::size_t cut = std::string::npos;
  for (const auto& s : stops) {
    if (s.empty()) continue;
    const auto pos = text.find(s);
    if (pos != std::string::npos) cut = std::min(cut, pos + s.size());
  }
  if (cut == std::string::npos || cut >= text.size()) return false;
  text.resize(cut);
  return true;
}

// A text-generation policy. Implementations produce raw continuations; the
// base class enforces the stop-sequence contract.
class Policy {
 public:
  virtual ~Policy() = default;

  GenerationResponse generate(const GenerationRequest& request) {
    GenerationResponse r = produce(request);
    if (truncate_at_stop(r.text, request.stop)) {
      r.token_logprobs.reset();
      r.token_count = text::count_whitespace_tokens(r.text);
    }
    return r;
  }

 protected:
  virtual GenerationResponse produce(const GenerationRequest& request) = 0;
};

// Returns canned segments in order, ignoring the prompt.
class ScriptedPolicy : public Policy {
 public:
  explicit ScriptedPolicy(std::vector<std::string> segments) : segments_(std::move(segments)) {
    for (std::size_t i = 0; i < segments_.size(); ++i) {
      try {
        parse_step(segments_[i]);
      } catch (const ProtocolError& e) {
        throw PolicyError("UNPARSEABLE_SEGMENT",
                          "segment " + std::to_string(i) + " (" + e.code() + "): " + segments_[i]);
      }
    }
  }

  std::size_t remaining() const { return segments_.size() - next_; }

 protected:
  GenerationResponse produce(const GenerationRequest&) override {
    if (next_ >= segments_.size()) {
      throw PolicyError("SCRIPT_EXHAUSTED", "scripted policy has no segment left");
    }
    GenerationResponse r;
    r.text = segments_[next_++];
    r.token_count = text::count_whitespace_tokens(r.text);
    return r;
  }

 private:
  std::vector<std::string> segments_;
  std::size_t next_ = 0;
};

// Picks one of several scripts from the first request's seed, then replays it.
// Gives seed-dependent yet reproducible rollouts without a model.
class ScriptMixturePolicy : public Policy {
 public:
  explicit ScriptMixturePolicy(std::vector<std::vector<std::string>> scripts) {
    if (scripts.empty()) throw PolicyError("UNPARSEABLE_SEGMENT", "mixture has no scripts");
    for (auto& s : scripts) candidates_.emplace_back(std::move(s));
  }

 protected:
  GenerationResponse produce(const GenerationRequest& request) override {
    if (!chosen_) {
      std::mt19937_64 rng(request.seed);
      std::uniform_int_distribution<std::size_t> pick(0, candidates_.size() - 1);
      chosen_ = pick(rng);
    }
    return candidates_[*chosen_].generate(request);
  }

 private:
  std::vector<ScriptedPolicy> candidates_;
  std::optional<std::size_t> chosen_;
};

struct HttpPolicyConfig {
  std::string endpoint;  // e.g. http://localhost:8000/generate
  std::string auth_token;
  int retries = 3;
  std::chrono::milliseconds backoff{200};
  std::chrono::milliseconds timeout{60000};
  std::ptrdiff_t max_in_flight = 8;

  // CONVSEARCH_ENDPOINT / CONVSEARCH_API_TOKEN override empty fields.
  static HttpPolicyConfig from_env() { return from_env(HttpPolicyConfig()); }
  static HttpPolicyConfig from_env(HttpPolicyConfig base) {
    if (base.endpoint.empty()) {
      if (const char* e = std::getenv("CONVSEARCH_ENDPOINT")) base.endpoint = e;
    }
    if (base.auth_token.empty()) {
      if (const char* t = std::getenv("CONVSEARCH_API_TOKEN")) base.auth_token = t;
    }
    return base;
  }
};

// Remote policy over a JSON-over-HTTP endpoint:
//   POST {prompt, stop, max_tokens, temperature, seed}
//   -> {text, token_logprobs?, usage: {tokens}}
// Shareable across threads; at most max_in_flight requests run concurrently.
class HttpPolicy : public Policy {
 public:
  explicit HttpPolicy(HttpPolicyConfig cfg)
      : cfg_(std::move(cfg)),
        slots_(std::max<std::ptrdiff_t>(1, std::min<std::ptrdiff_t>(cfg_.max_in_flight, kMaxSlots))) {
    const auto scheme = cfg_.endpoint.find("://");
    if (scheme == std::string::npos) {
      throw PolicyError("ENDPOINT_UNREACHABLE", "endpoint '" + cfg_.endpoint + "' has no scheme");
    }
    const auto path = cfg_.endpoint.find('/', scheme + 3);
    base_ = cfg_.endpoint.substr(0, path);
    path_ = path == std::string::npos ? "/" : cfg_.endpoint.substr(path);
  }

  static nlohmann::json request_json(const GenerationRequest& req) {
    return {{"prompt", req.prompt},
            {"stop", req.stop},
            {"max_tokens", req.max_tokens},
            {"temperature", req.temperature},
            {"seed", req.seed}};
  }

  static GenerationResponse parse_response(const std::string& body) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error& e) {
      throw PolicyError("MALFORMED_RESPONSE", std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
      throw PolicyError("MALFORMED_RESPONSE", "response lacks a string 'text' field");
    }
    GenerationResponse r;
    r.text = j["text"].get<std::string>();
    try {
      if (j.contains("token_logprobs") && !j["token_logprobs"].is_null()) {
        r.token_logprobs = j["token_logprobs"].get<std::vector<double>>();
      }
      if (j.contains("usage") && j["usage"].contains("tokens")) {
        const auto tokens = j["usage"]["tokens"].get<std::int64_t>();
        if (tokens < 0) throw PolicyError("MALFORMED_RESPONSE", "negative token count");
        r.token_count = static_cast<std::size_t>(tokens);
      } else {
        r.token_count = text::count_whitespace_tokens(r.text);
      }
    } catch (const nlohmann::json::exception& e) {
      throw PolicyError("MALFORMED_RESPONSE", e.what());
    }
    return r;
  }

 protected:
  GenerationResponse produce(const GenerationRequest& request) override {
    slots_.acquire();
    struct Release {
      std::counting_semaphore<kMaxSlots>& s;
      ~Release() { s.release(); }
    } release{slots_};

    const std::string body = request_json(request).dump();
    std::string last_error = "no attempt made";
    std::string last_code = "ENDPOINT_UNREACHABLE";
    for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(cfg_.backoff * (1 << (attempt - 1)));
      httplib::Client client(base_);
      const auto secs = std::chrono::duration_cast<std::chrono::seconds>(cfg_.timeout);
      const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(cfg_.timeout - secs);
      client.set_connection_timeout(secs.count(), usecs.count());
      client.set_read_timeout(secs.count(), usecs.count());
      client.set_write_timeout(secs.count(), usecs.count());
      httplib::Headers headers;
      if (!cfg_.auth_token.empty()) headers.emplace("Authorization", "Bearer " + cfg_.auth_token);
      auto res = client.Post(path_, headers, body, "application/json");
      if (!res) {
        const auto err = res.error();
        last_code = (err == httplib::Error::Read || err == httplib::Error::Write ||
                     err == httplib::Error::ConnectionTimeout)
                        ? "TIMEOUT"
                        : "ENDPOINT_UNREACHABLE";
        last_error = httplib::to_string(err);
        continue;
      }
      if (res->status >= 500) {
        last_code = "ENDPOINT_UNREACHABLE";
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        throw PolicyError("MALFORMED_RESPONSE", "HTTP " + std::to_string(res->status));
      }
      return parse_response(res->body);
    }
    throw PolicyError(last_code, cfg_.endpoint + " after " + std::to_string(cfg_.retries) +
                                     " retries: " + last_error);
  }

 private:
  static constexpr std::ptrdiff_t kMaxSlots = 1024;

  HttpPolicyConfig cfg_;
  std::counting_semaphore<kMaxSlots> slots_;
  std::string base_;
  std::string path_;
};

}  // namespace convsearch
