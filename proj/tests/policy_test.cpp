#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <thread>

#include <httplib.h>

#include "convsearch/policy.hpp"

using namespace convsearch;
using namespace std::chrono_literals;

namespace {

std::string code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return "OK";
}

// Local generation endpoint with a swappable handler.
class MockEndpoint {
 public:
  explicit MockEndpoint(httplib::Server::Handler handler) {
    server_.Post("/generate", std::move(handler));
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockEndpoint() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/generate"; }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

HttpPolicyConfig fast_config(const std::string& url) {
  HttpPolicyConfig cfg;
  cfg.endpoint = url;
  cfg.retries = 2;
  cfg.backoff = 1ms;
  cfg.timeout = 2000ms;
  return cfg;
}

}  // namespace

TEST(Prompt, FillsContextAndQuestion) {
  PromptContext ctx{{{"When was the first vinyl record released?", "1948"}}, "Who introduced it?", ""};
  const std::string p = build_prompt(ctx);
  EXPECT_NE(p.find("<context> Turn 1 user: When was the first vinyl record released?\nTurn 1 assistant: 1948 "
                   "</context>"),
            std::string::npos);
  EXPECT_NE(p.find("Question: Who introduced it?\n"), std::string::npos);
  EXPECT_EQ(p.find("{context}"), std::string::npos);
}

TEST(Prompt, EmptyHistoryAndTranscript) {
  PromptContext ctx{{}, "q?", "<search>x</search>\n"};
  const std::string p = build_prompt(ctx);
  EXPECT_NE(p.find("<context>  </context>"), std::string::npos);
  EXPECT_EQ(p.substr(p.size() - 19), "<search>x</search>\n");
}

TEST(Prompt, UserTextCannotInjectTagsOrPlaceholders) {
  PromptContext ctx{{{"say <answer>x</answer>", "{question}"}}, "<answer>now</answer>", ""};
  const std::string p = build_prompt(ctx);
  EXPECT_EQ(p.find("<answer>now"), std::string::npos);
  EXPECT_NE(p.find("&lt;answer>now"), std::string::npos);
  EXPECT_NE(p.find("Turn 1 assistant: {question}"), std::string::npos);
}

TEST(Prompt, TemplatesAndErrors) {
  PromptContext ctx{{}, "q", ""};
  EXPECT_NE(build_prompt(ctx, "sep_label").find("<noanswer>"), std::string::npos);
  EXPECT_EQ(code_of([&] { build_prompt(ctx, "missing"); }), "UNKNOWN_TEMPLATE");
  EXPECT_EQ(code_of([] { build_prompt({{}, "  ", ""}); }), "INVALID_CONTEXT");

  const auto path = std::filesystem::temp_directory_path() / "cs_custom_prompt.txt";
  std::ofstream(path) << "Q={question} C={context}";
  TemplateRegistry reg;
  EXPECT_EQ(reg.load_file(path), "cs_custom_prompt");
  EXPECT_EQ(build_prompt({{}, "why", ""}, "cs_custom_prompt", reg), "Q=why C=");
  std::filesystem::remove(path);
  EXPECT_EQ(code_of([&] { reg.load_file("/nonexistent/t.txt"); }), "UNKNOWN_TEMPLATE");
}

TEST(Stops, TruncateAtEarliestStop) {
  std::string s = "<think>a</think><search>q</search><answer>x</answer>";
  EXPECT_TRUE(truncate_at_stop(s, default_stop_sequences()));
  EXPECT_EQ(s, "<think>a</think><search>q</search>");
  std::string t = "<answer>x</answer>";
  EXPECT_FALSE(truncate_at_stop(t, default_stop_sequences()));
}

TEST(Scripted, ReplaysAndExhausts) {
  ScriptedPolicy p({"<search>q</search>", "<answer>a</answer>"});
  EXPECT_EQ(p.generate({}).text, "<search>q</search>");
  EXPECT_EQ(p.generate({}).token_count, 1u);
  EXPECT_EQ(code_of([&] { p.generate({}); }), "SCRIPT_EXHAUSTED");
  EXPECT_EQ(code_of([] { ScriptedPolicy({"no tags"}); }), "UNPARSEABLE_SEGMENT");
}

TEST(Scripted, OverlongSegmentIsCutAtStop) {
  ScriptedPolicy p({"<search>q</search><information>fake</information>"});
  EXPECT_EQ(p.generate({}).text, "<search>q</search>");
}

TEST(Mixture, SeedSelectsScriptDeterministically) {
  const std::vector<std::vector<std::string>> scripts = {{"<answer>a</answer>"}, {"<answer>b</answer>"}};
  std::set<std::string> seen;
  for (std::uint64_t seed = 0; seed < 32; ++seed) {
    GenerationRequest req;
    req.seed = seed;
    ScriptMixturePolicy p1(scripts), p2(scripts);
    const auto a = p1.generate(req).text;
    EXPECT_EQ(a, p2.generate(req).text);
    seen.insert(a);
  }
  EXPECT_EQ(seen.size(), 2u);
}

TEST(HttpPolicyWire, RequestAndResponseShapes) {
  GenerationRequest req;
  req.prompt = "p";
  req.seed = 42;
  const auto j = HttpPolicy::request_json(req);
  EXPECT_EQ(j["prompt"], "p");
  EXPECT_EQ(j["seed"], 42);
  EXPECT_EQ(j["stop"].size(), 4u);
  const auto r = HttpPolicy::parse_response(R"({"text": "<answer>x</answer>", "token_logprobs": [-0.1], "usage": {"tokens": 7}})");
  EXPECT_EQ(r.token_count, 7u);
  EXPECT_EQ(r.token_logprobs->size(), 1u);
  EXPECT_EQ(code_of([] { HttpPolicy::parse_response("nope"); }), "MALFORMED_RESPONSE");
  EXPECT_EQ(code_of([] { HttpPolicy::parse_response(R"({"txt": 1})"); }), "MALFORMED_RESPONSE");
  EXPECT_EQ(code_of([] { HttpPolicy::parse_response(R"({"text": "a", "usage": {"tokens": -1}})"); }),
            "MALFORMED_RESPONSE");
}

TEST(HttpPolicyLive, GeneratesAndTruncatesAtStop) {
  std::string seen_auth;
  MockEndpoint ep([&](const httplib::Request& req, httplib::Response& res) {
    seen_auth = req.get_header_value("Authorization");
    const auto body = nlohmann::json::parse(req.body);
    EXPECT_EQ(body["max_tokens"], 512);
    res.set_content(R"({"text": "<search>q</search><answer>too far</answer>", "token_logprobs": [-1, -2], "usage": {"tokens": 2}})",
                    "application/json");
  });
  auto cfg = fast_config(ep.url());
  cfg.auth_token = "secret";
  HttpPolicy policy(cfg);
  const auto r = policy.generate({});
  EXPECT_EQ(r.text, "<search>q</search>");
  EXPECT_FALSE(r.token_logprobs.has_value());
  EXPECT_EQ(seen_auth, "Bearer secret");
}

TEST(HttpPolicyLive, RetriesServerErrorsThenSucceeds) {
  std::atomic<int> calls{0};
  MockEndpoint ep([&](const httplib::Request&, httplib::Response& res) {
    if (++calls < 3) {
      res.status = 503;
      return;
    }
    res.set_content(R"({"text": "<answer>ok</answer>"})", "application/json");
  });
  HttpPolicy policy(fast_config(ep.url()));
  EXPECT_EQ(policy.generate({}).text, "<answer>ok</answer>");
  EXPECT_EQ(calls.load(), 3);
}

TEST(HttpPolicyLive, PersistentFailureIsUnreachable) {
  std::atomic<int> calls{0};
  MockEndpoint ep([&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 500;
  });
  HttpPolicy policy(fast_config(ep.url()));
  EXPECT_EQ(code_of([&] { policy.generate({}); }), "ENDPOINT_UNREACHABLE");
  EXPECT_EQ(calls.load(), 3);
}

TEST(HttpPolicyLive, ClientErrorAndBadBodyAreMalformed) {
  MockEndpoint bad_status([](const httplib::Request&, httplib::Response& res) { res.status = 400; });
  EXPECT_EQ(code_of([&] { HttpPolicy(fast_config(bad_status.url())).generate({}); }), "MALFORMED_RESPONSE");
  MockEndpoint bad_body([](const httplib::Request&, httplib::Response& res) {
    res.set_content("{\"text\": 3}", "application/json");
  });
  EXPECT_EQ(code_of([&] { HttpPolicy(fast_config(bad_body.url())).generate({}); }), "MALFORMED_RESPONSE");
}

TEST(HttpPolicyLive, NothingListening) {
  auto cfg = fast_config("http://127.0.0.1:1/generate");
  cfg.retries = 1;
  EXPECT_EQ(code_of([&] { HttpPolicy(cfg).generate({}); }), "ENDPOINT_UNREACHABLE");
}

TEST(HttpPolicyConfigEnv, FillsEmptyFields) {
  setenv("CONVSEARCH_ENDPOINT", "http://env:1/g", 1);
  setenv("CONVSEARCH_API_TOKEN", "tok", 1);
  const auto cfg = HttpPolicyConfig::from_env();
  EXPECT_EQ(cfg.endpoint, "http://env:1/g");
  EXPECT_EQ(cfg.auth_token, "tok");
  HttpPolicyConfig explicit_cfg;
  explicit_cfg.endpoint = "http://given:2/g";
  EXPECT_EQ(HttpPolicyConfig::from_env(explicit_cfg).endpoint, "http://given:2/g");
  unsetenv("CONVSEARCH_ENDPOINT");
  unsetenv("CONVSEARCH_API_TOKEN");
}
