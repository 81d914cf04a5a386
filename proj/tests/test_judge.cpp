#include <atomic>
#include <deque>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "radprep/judge.hpp"
#include "support.hpp"

using namespace radprep;
using namespace radprep::judge;
using namespace std::chrono_literals;

namespace {

std::string chat_body(const std::string& content) {
  nlohmann::json j;
  j["choices"] = nlohmann::json::array({{{"message", {{"role", "assistant"}, {"content", content}}}}});
  return j.dump();
}

// Replies from a fixed script; the last reply repeats once the script runs out.
class ScriptedTransport final : public ChatTransport {
 public:
  explicit ScriptedTransport(std::vector<ChatResponse> script) : script_(script.begin(), script.end()) {}
  ChatResponse post(const std::string& body) override {
    std::lock_guard lock(mutex_);
    bodies.push_back(body);
    if (script_.size() > 1) {
      auto r = script_.front();
      script_.pop_front();
      return r;
    }
    return script_.front();
  }
  std::vector<std::string> bodies;

 private:
  std::mutex mutex_;
  std::deque<ChatResponse> script_;
};

// Scores each pair by the number found in its generated text, and records
// the peak number of simultaneous requests.
class ProbeTransport final : public ChatTransport {
 public:
  ChatResponse post(const std::string& body) override {
    const int now = ++in_flight;
    int prev = peak.load();
    while (now > prev && !peak.compare_exchange_weak(prev, now)) {
    }
    std::this_thread::sleep_for(15ms);
    ++calls;
    const auto prompt = nlohmann::json::parse(body)["messages"].back()["content"].get<std::string>();
    const auto at = prompt.find("GEN-");
    const std::string score = at == std::string::npos ? "0" : prompt.substr(at + 4, 1);
    --in_flight;
    if (score == "x") return {200, chat_body("I cannot rate this."), {}};
    return {200, chat_body(score + "\nStub verdict."), {}};
  }
  std::atomic<int> in_flight{0};
  std::atomic<int> peak{0};
  std::atomic<int> calls{0};
};

JudgeClientConfig stub_config(std::size_t max_retries = 3) {
  JudgeClientConfig c;
  c.endpoint = "http://stub/v1/chat/completions";
  c.model_name = "stub-model";
  c.max_retries = max_retries;
  c.backoff_base = 100ms;
  return c;
}

JudgeClient client_for(std::shared_ptr<ChatTransport> t, JudgeClientConfig cfg, std::vector<std::chrono::milliseconds>* sleeps = nullptr) {
  return JudgeClient(std::move(cfg), std::move(t), JudgePrompt::defaults(), [sleeps](std::chrono::milliseconds d) {
    if (sleeps) sleeps->push_back(d);
  });
}

std::size_t occurrences(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("prompt contract") {
  const auto prompt = JudgePrompt::defaults();
  const auto text = build_judge_prompt("GEN text {reference}", "REF text", prompt);
  CHECK(occurrences(text, "GEN text {reference}") == 1);
  CHECK(occurrences(text, "REF text") == 1);
  CHECK(text.find("0 to 10") != std::string::npos);
  for (const auto& c : prompt.criteria()) CHECK(text.find(c) != std::string::npos);
  CHECK_THROWS_AS(JudgePrompt("only {generated}"), ValidationError);
  CHECK_THROWS_AS(JudgePrompt("{generated} {generated} {reference}"), ValidationError);
  CHECK_THROWS_AS(build_judge_prompt("  ", "ref", prompt), EmptyInput);
}

TEST_CASE("prompt template file") {
  testsupport::TempDir dir;
  testsupport::write_file(dir / "t.txt", "Rate 0 to 10.\nG: {generated}\nR: {reference}\n");
  const auto p = JudgePrompt::load(dir / "t.txt");
  CHECK(build_judge_prompt("g", "r", p) == "Rate 0 to 10.\nG: g\nR: r\n");
  CHECK_THROWS_AS(JudgePrompt::load(dir / "none.txt"), IoError);
}

TEST_CASE("parse_verdict") {
  const auto v = parse_verdict("8\nThe generated impression captures all key findings.");
  CHECK(v.score == 8.0);
  CHECK(v.explanation == "The generated impression captures all key findings.");
  CHECK(parse_verdict("Score: 7.5 \xE2\x80\x94 minor terminology drift.").score == 7.5);
  CHECK(parse_verdict("Score: 7.5 \xE2\x80\x94 minor terminology drift.").explanation == "minor terminology drift.");
  CHECK(parse_verdict("**Score:** 6/10\nGood.").score == 6.0);
  CHECK(parse_verdict("\n\n  0\nNothing matches.").score == 0.0);
  CHECK(parse_verdict("10 out of 10. Perfect.").explanation == "Perfect.");
  CHECK_THROWS_AS(parse_verdict("The impression is good."), NoScoreFound);
  CHECK_THROWS_AS(parse_verdict(""), NoScoreFound);
  CHECK_THROWS_AS(parse_verdict("11\nToo high."), ScoreOutOfRange);
  CHECK_THROWS_AS(parse_verdict("-1\nToo low."), ScoreOutOfRange);
  CHECK_THROWS_AS(parse_verdict("10.5\nToo high."), ScoreOutOfRange);
  CHECK_THROWS_AS(parse_verdict("7"), MissingExplanation);
}

TEST_CASE("judge_pair against a scripted stub") {
  SUBCASE("happy path") {
    auto t = std::make_shared<ScriptedTransport>(std::vector<ChatResponse>{{200, chat_body("9\nExcellent match."), {}}});
    auto client = client_for(t, stub_config());
    const auto v = client.judge_pair("g", "r");
    CHECK(v.score == 9.0);
    CHECK(v.attempts == 1);
    const auto body = nlohmann::json::parse(t->bodies.at(0));
    CHECK(body["temperature"] == 0.0);
    CHECK(body["model"] == "stub-model");
  }
  SUBCASE("one 429 then success") {
    auto t = std::make_shared<ScriptedTransport>(
        std::vector<ChatResponse>{{429, "", {}}, {200, chat_body("6\nPartial match."), {}}});
    std::vector<std::chrono::milliseconds> sleeps;
    auto client = client_for(t, stub_config(), &sleeps);
    const auto v = client.judge_pair("g", "r");
    CHECK(v.score == 6.0);
    CHECK(v.attempts == 2);
    CHECK(sleeps == std::vector<std::chrono::milliseconds>{100ms});
    CHECK(t->bodies[0] == t->bodies[1]);
  }
  SUBCASE("prose forever exhausts the retries with exponential backoff") {
    auto t = std::make_shared<ScriptedTransport>(std::vector<ChatResponse>{{200, chat_body("Looks fine."), {}}});
    std::vector<std::chrono::milliseconds> sleeps;
    auto client = client_for(t, stub_config(3), &sleeps);
    try {
      client.judge_pair("g", "r");
      FAIL("expected ExhaustedRetries");
    } catch (const ExhaustedRetries& e) {
      CHECK(e.attempts() == 4);
      CHECK(e.last_error().find("no score") != std::string::npos);
    }
    CHECK(t->bodies.size() == 4);
    CHECK(sleeps == std::vector<std::chrono::milliseconds>{100ms, 200ms, 400ms});
  }
  SUBCASE("transport failures and 5xx are retried") {
    auto t = std::make_shared<ScriptedTransport>(std::vector<ChatResponse>{
        {0, "", "connection refused"}, {503, "", {}}, {200, chat_body("5\nOk."), {}}});
    auto client = client_for(t, stub_config());
    CHECK(client.judge_pair("g", "r").attempts == 3);
  }
  SUBCASE("auth failures are not retried") {
    auto t = std::make_shared<ScriptedTransport>(std::vector<ChatResponse>{{401, "", {}}});
    auto client = client_for(t, stub_config());
    CHECK_THROWS_AS(client.judge_pair("g", "r"), AuthError);
    CHECK(t->bodies.size() == 1);
  }
  SUBCASE("other 4xx responses are not retried") {
    auto t = std::make_shared<ScriptedTransport>(std::vector<ChatResponse>{{400, "bad", {}}});
    auto client = client_for(t, stub_config());
    CHECK_THROWS_AS(client.judge_pair("g", "r"), RequestRejected);
  }
}

TEST_CASE("judge_corpus aggregation, resume and failures") {
  testsupport::TempDir dir;
  const auto path = dir / "verdicts.jsonl";
  const std::vector<JudgeItem> items{{"a", "GEN-4", "ref"}, {"b", "GEN-5", "ref"}, {"c", "GEN-6", "ref"}};

  SUBCASE("three pairs judged 4, 5, 6 give mean 5") {
    auto t = std::make_shared<ProbeTransport>();
    auto client = client_for(t, stub_config());
    const auto r = judge_corpus(items, client, path);
    REQUIRE(r.mean_score.has_value());
    CHECK(*r.mean_score == doctest::Approx(5.0));
    CHECK(r.verdicts.size() == 3);
    CHECK(r.verdicts[0].record_id == "a");
    CHECK(r.failures.empty());
    CHECK(testsupport::count_lines(path) == 3);
    for (const auto& row : read_verdicts(path)) {
      CHECK(row.model_name == "stub-model");
      CHECK(row.score >= 0.0);
      CHECK(row.score <= 10.0);
      CHECK_FALSE(row.timestamp.empty());
    }
  }
  SUBCASE("a rerun after an interruption only requests the missing pair") {
    auto t = std::make_shared<ProbeTransport>();
    auto client = client_for(t, stub_config());
    judge_corpus(std::span(items).first(2), client, path);
    // Simulate a crash mid-write of the third row.
    std::ofstream(path, std::ios::app) << "{\"record_id\":\"c\",\"sco";
    t->calls = 0;
    const auto r = judge_corpus(items, client, path);
    CHECK(t->calls == 1);
    CHECK(r.requested == 1);
    CHECK(r.skipped == 2);
    CHECK(*r.mean_score == doctest::Approx(5.0));
    CHECK(read_verdicts(path).size() == 3);
  }
  SUBCASE("all pairs failing leaves the mean absent") {
    const std::vector<JudgeItem> bad{{"a", "GEN-x", "r"}, {"b", "GEN-x", "r"}, {"c", "GEN-x", "r"}};
    auto t = std::make_shared<ProbeTransport>();
    auto client = client_for(t, stub_config(1));
    const auto r = judge_corpus(bad, client, path);
    CHECK_FALSE(r.mean_score.has_value());
    CHECK(r.failures.size() == 3);
    CHECK(read_verdicts(path).empty());
  }
  SUBCASE("empty corpus") {
    auto client = client_for(std::make_shared<ProbeTransport>(), stub_config());
    CHECK_THROWS_AS(judge_corpus(std::span<const JudgeItem>{}, client, path), EmptyCorpus);
  }
}

TEST_CASE("judge_corpus never exceeds max_concurrent") {
  testsupport::TempDir dir;
  std::vector<JudgeItem> items;
  for (int i = 0; i < 40; ++i) items.push_back({"r" + std::to_string(i), "GEN-" + std::to_string(i % 10), "ref"});
  for (std::size_t limit : {1u, 3u}) {
    auto t = std::make_shared<ProbeTransport>();
    auto cfg = stub_config();
    cfg.max_concurrent = limit;
    auto client = client_for(t, cfg);
    const auto r = judge_corpus(items, client, dir / ("v" + std::to_string(limit) + ".jsonl"));
    CHECK(r.verdicts.size() == 40);
    CHECK(t->peak.load() <= static_cast<int>(limit));
    if (limit > 1) CHECK(t->peak.load() > 1);
  }
}

TEST_CASE("HTTP transport sends the bearer token only in the header") {
  httplib::Server server;
  std::string auth, body;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    auth = req.get_header_value("Authorization");
    body = req.body;
    res.set_content(chat_body("7\nClose."), "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  auto cfg = stub_config();
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  cfg.api_key_env = "RADPREP_TEST_JUDGE_KEY";
  ::unsetenv("RADPREP_TEST_JUDGE_KEY");
  CHECK_THROWS_AS(HttpChatTransport{cfg}, AuthError);
  ::setenv("RADPREP_TEST_JUDGE_KEY", "sk-judge-secret", 1);
  JudgeClient client(cfg, std::make_shared<HttpChatTransport>(cfg));
  const auto v = client.judge_pair("generated", "reference");
  CHECK(v.score == 7.0);
  CHECK(auth == "Bearer sk-judge-secret");
  CHECK(body.find("sk-judge-secret") == std::string::npos);
  ::unsetenv("RADPREP_TEST_JUDGE_KEY");

  server.stop();
  th.join();
}

TEST_CASE("rate limiter spaces requests") {
  RateLimiter limiter(1200);  // one slot every 50 ms
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < 4; ++i) limiter.acquire();
  CHECK(std::chrono::steady_clock::now() - start >= 150ms);
}
