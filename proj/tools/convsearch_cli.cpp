// Command-line front end: index, eval, rollout, serve, demo.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <httplib.h>

#include "convsearch/episode.hpp"
#include "convsearch/harness.hpp"
#include "convsearch/service.hpp"

#ifndef CONVSEARCH_DEFAULT_FIXTURES
#define CONVSEARCH_DEFAULT_FIXTURES "data/fixtures"
#endif

namespace fs = std::filesystem;
using namespace convsearch;

namespace {

struct Options {
  std::string corpus;
  std::string dataset;
  std::string config;
  std::string scripts;
  std::string endpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> group_size;
  std::optional<std::size_t> threads;
  std::optional<int> port;
  std::optional<std::string> host;
};

RunConfig resolve_config(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.group_size) cfg.group_size = *o.group_size;
  if (o.threads) cfg.threads = *o.threads;
  if (o.port) cfg.port = *o.port;
  if (o.host) cfg.host = *o.host;
  if (!o.endpoint.empty()) cfg.endpoint.endpoint = o.endpoint;
  cfg.endpoint = HttpPolicyConfig::from_env(cfg.endpoint);
  return cfg;
}

// Remote endpoint when configured, otherwise the scripts file.
TurnPolicyFactory make_factory(const Options& o, const RunConfig& cfg, bool rollouts) {
  if (!cfg.endpoint.endpoint.empty()) {
    return shared_factory(std::make_shared<HttpPolicy>(cfg.endpoint));
  }
  if (o.scripts.empty()) {
    throw HarnessError("CONFIG_ERROR", "need --endpoint (or CONVSEARCH_ENDPOINT) or --scripts");
  }
  return scripted_factory(std::make_shared<ScriptBook>(ScriptBook::load(o.scripts)), rollouts);
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw HarnessError("CONFIG_ERROR", std::string(flag) + " is required");
}

int cmd_index(const Options& o) {
  require(o.corpus, "--corpus");
  const RunConfig cfg = resolve_config(o);
  const Index index = load_index(o.corpus, cfg.bm25);
  const nlohmann::json stats = {{"passages", index.size()},
                                {"vocabulary", index.vocabulary_size()},
                                {"average_length", index.average_doc_length()},
                                {"bm25_k1", index.params().k1},
                                {"bm25_b", index.params().b},
                                {"corpus_hash", index.fingerprint()}};
  if (!o.out.empty()) {
    std::ofstream(o.out) << stats.dump(2) << '\n';
  }
  std::cout << stats.dump(2) << '\n';
  return 0;
}

int cmd_eval(const Options& o) {
  require(o.corpus, "--corpus");
  require(o.dataset, "--dataset");
  const RunConfig cfg = resolve_config(o);
  if (!cfg.template_file.empty()) {
    throw HarnessError("CONFIG_ERROR", "template_file is only supported through the library API");
  }
  const Index index = load_index(o.corpus, cfg.bm25);
  const auto dataset = load_dataset(o.dataset);
  const RunOutput run = evaluate_run(dataset, make_factory(o, cfg, false), index, cfg);
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    write_lines(run.log_lines, fs::path(o.out) / "runlog.jsonl");
    std::ofstream(fs::path(o.out) / "report.json") << run.report.dump(2) << '\n';
  }
  std::cout << run.report.dump(2) << '\n';
  return 0;
}

int cmd_rollout(const Options& o) {
  require(o.corpus, "--corpus");
  require(o.dataset, "--dataset");
  require(o.out, "--out");
  const RunConfig cfg = resolve_config(o);
  const Index index = load_index(o.corpus, cfg.bm25);
  const auto dataset = load_dataset(o.dataset);
  const RolloutOutput r = rollout_run(dataset, make_factory(o, cfg, true), index, cfg, cfg.group_size);
  write_rollout(r, o.out);
  std::cout << "wrote " << r.records.size() << " records in " << r.manifest["groups"].get<std::size_t>()
            << " groups to " << (fs::path(o.out) / "batch.jsonl").string() << '\n';
  return 0;
}

int cmd_serve(const Options& o) {
  require(o.corpus, "--corpus");
  const RunConfig cfg = resolve_config(o);
  const Index index = load_index(o.corpus, cfg.bm25);
  std::vector<Conversation> dataset;
  if (!o.dataset.empty()) dataset = load_dataset(o.dataset);
  SessionService service(index, std::move(dataset), make_factory(o, cfg, false), cfg);
  httplib::Server server;
  service.mount(server);
  std::cout << "listening on http://" << cfg.host << ":" << cfg.port << std::endl;
  if (!server.listen(cfg.host, cfg.port)) {
    std::cerr << "cannot bind " << cfg.host << ":" << cfg.port << '\n';
    return 1;
  }
  return 0;
}

void print_episode(const EpisodeResult& r) {
  for (const auto& s : r.trajectory.steps) {
    std::cout << "    " << render_step(s) << '\n';
  }
  std::cout << "    reward: outcome=" << r.reward.outcome() << " info_gain=" << r.reward.info_gain()
            << " mia=" << r.reward.mia() << " total=" << r.reward.total() << '\n';
}

int cmd_demo(const Options& o) {
  const fs::path fixtures = CONVSEARCH_DEFAULT_FIXTURES;
  Options d = o;
  if (d.corpus.empty()) d.corpus = (fixtures / "corpus.jsonl").string();
  if (d.dataset.empty()) d.dataset = (fixtures / "dataset.jsonl").string();
  if (d.scripts.empty()) d.scripts = (fixtures / "scripts.jsonl").string();
  const RunConfig cfg = resolve_config(d);
  const Index index = load_index(d.corpus, cfg.bm25);
  const auto dataset = load_dataset(d.dataset);
  const auto book = std::make_shared<ScriptBook>(ScriptBook::load(d.scripts));
  const auto factory = scripted_factory(book, false);

  for (const auto& c : dataset) {
    std::cout << "conversation " << c.id << '\n';
    for (std::size_t ti = 0; ti < c.turns.size(); ++ti) {
      const std::uint64_t seed = derive_seed(cfg.seed, c.id, ti, 0);
      auto policy = factory({&c, ti, 0, seed, false});
      const EpisodeResult r = run_episode(c, ti, *policy, index, cfg.episode, seed);
      std::cout << "  turn " << ti + 1 << ": " << c.turns[ti].query << '\n';
      print_episode(r);
      const auto* entry = book->find(c.id, ti);
      if (r.terminal_action == ActionKind::Clarify && entry && !entry->follow_up.empty()) {
        const std::string reply = "commercial";
        std::cout << "  user reply: " << reply << '\n';
        auto follow = factory({&c, ti, 0, seed, true});
        const EpisodeResult f = apply_clarification(c, ti, r, reply, *follow, index, cfg.episode, seed);
        if (!f.search_calls.empty()) std::cout << "    expanded query: " << f.search_calls.front().query << '\n';
        print_episode(f);
      }
    }
  }

  const RolloutOutput rollouts = rollout_run(dataset, scripted_factory(book, true), index, cfg, cfg.group_size);
  std::cout << "rollout groups: " << rollouts.manifest["groups"] << ", records: " << rollouts.records.size()
            << '\n';
  if (!d.out.empty()) write_rollout(rollouts, d.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Agentic conversational search environment, reward engine and evaluation harness"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--corpus", o.corpus, "Corpus file (JSON lines: id, title, text)");
    sub->add_option("--config", o.config, "Config file (key = value)");
    sub->add_option("--seed", o.seed, "Run seed");
    sub->add_option("--out", o.out, "Output path");
  };
  auto add_policy = [&](CLI::App* sub) {
    sub->add_option("--dataset", o.dataset, "Dataset file (JSON lines, one conversation per line)");
    sub->add_option("--endpoint", o.endpoint, "Generation endpoint URL");
    sub->add_option("--scripts", o.scripts, "Scripted-policy file used when no endpoint is set");
    sub->add_option("--threads", o.threads, "Worker threads");
  };

  auto* index = app.add_subcommand("index", "Build the corpus index and print statistics");
  add_common(index);
  auto* eval = app.add_subcommand("eval", "Evaluate a dataset; writes report.json and runlog.jsonl to --out");
  add_common(eval);
  add_policy(eval);
  auto* rollout = app.add_subcommand("rollout", "Run GRPO groups; writes batch.jsonl and manifest.json to --out");
  add_common(rollout);
  add_policy(rollout);
  rollout->add_option("--group-size", o.group_size, "Rollouts per turn (>= 2)");
  auto* serve = app.add_subcommand("serve", "Start the HTTP session service");
  add_common(serve);
  add_policy(serve);
  serve->add_option("--port", o.port, "Listen port");
  serve->add_option("--host", o.host, "Listen address");
  auto* demo = app.add_subcommand("demo", "Scripted-policy showcase on the bundled fixtures");
  add_common(demo);
  add_policy(demo);
  demo->add_option("--group-size", o.group_size, "Rollouts per turn (>= 2)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*index) return cmd_index(o);
    if (*eval) return cmd_eval(o);
    if (*rollout) return cmd_rollout(o);
    if (*serve) return cmd_serve(o);
    if (*demo) return cmd_demo(o);
  } catch (const Error& e) {
    std::cerr << "error [" << e.code() << "]: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
