#include <selfexplain/backend.hpp>

#include <atomic>
#include <catch2/catch_amalgamated.hpp>
#include <chrono>
#include <cstdlib>
#include <httplib.h>
#include <thread>

#include "test_util.hpp"

namespace se = selfexplain;
using json = nlohmann::json;
using Catch::Matchers::ContainsSubstring;
using testutil::TempDir;
using testutil::fixture;
using testutil::try_error;
using testutil::write_file;

namespace {

se::CompletionRequest req_for(const std::string& text) {
    se::CompletionRequest r;
    r.prompt = se::make_prompt_bundle(se::Condition::no_cot, text);
    return r;
}

se::BackendConfig mock_config(const std::filesystem::path& script) {
    se::BackendConfig c;
    c.kind = se::BackendKind::mock;
    c.script_path = script.string();
    c.retry.base_delay_ms = 1;
    return c;
}

// In-process HTTP endpoint for exercising the network path.
struct TestServer {
    httplib::Server svr;
    std::thread th;
    int port = 0;

    void start() {
        port = svr.bind_to_any_port("127.0.0.1");
        REQUIRE(port > 0);
        th = std::thread([this] { svr.listen_after_bind(); });
        svr.wait_until_ready();
    }

    std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port); }

    ~TestServer() {
        svr.stop();
        if (th.joinable()) th.join();
    }
};

} // namespace

TEST_CASE("backend construction validates its configuration") {
    auto bad = [&](auto mutate, se::ErrorKind kind = se::ErrorKind::config) {
        se::BackendConfig c = mock_config(fixture("mock_retry.jsonl"));
        mutate(c);
        auto err = try_error([&] { se::Backend b(c); });
        REQUIRE(err);
        REQUIRE(err->kind() == kind);
    };
    bad([](se::BackendConfig& c) { c.temperature_generate = -0.5; });
    bad([](se::BackendConfig& c) { c.temperature_answer = -1.0; });
    bad([](se::BackendConfig& c) { c.retry.max_attempts = 0; });
    bad([](se::BackendConfig& c) { c.max_parallel = 0; });
    bad([](se::BackendConfig& c) { c.max_tokens = 0; });
    bad([](se::BackendConfig& c) {
        c.kind = se::BackendKind::http;
        c.base_url.clear();
    });
    bad([](se::BackendConfig& c) { c.script_path.clear(); });
}

TEST_CASE("mock backend serves scripted completions") {
    se::Backend b(mock_config(fixture("mock_retry.jsonl")));
    se::Completion c = b.complete(req_for("one steady request please"));
    REQUIRE(c.text == "steady reply");
    REQUIRE(c.finish_reason == "stop");
    REQUIRE_FALSE(c.cached);
    REQUIRE(b.request_count() == 1);
}

TEST_CASE("unmatched prompts are script errors naming the prompt hash") {
    se::Backend b(mock_config(fixture("mock_retry.jsonl")));
    se::CompletionRequest r = req_for("nothing in the script says this");
    auto err = try_error([&] { b.complete(r); });
    REQUIRE(err);
    REQUIRE(err->kind() == se::ErrorKind::script);
    REQUIRE_THAT(err->what(),
                 ContainsSubstring(r.prompt.content_hash.substr(0, 12)));
}

TEST_CASE("transient scripted failures are retried with backoff") {
    SECTION("enough attempts recover") {
        se::Backend b(mock_config(fixture("mock_retry.jsonl")));
        se::Completion c = b.complete(req_for("a flaky request"));
        REQUIRE(c.text == "recovered");
        REQUIRE(b.request_count() == 1);
    }

    SECTION("too few attempts surface the transport error") {
        se::BackendConfig cfg = mock_config(fixture("mock_retry.jsonl"));
        cfg.retry.max_attempts = 2;
        se::Backend b(cfg);
        auto err = try_error([&] { b.complete(req_for("a flaky request")); });
        REQUIRE(err);
        REQUIRE(err->kind() == se::ErrorKind::transport);
        REQUIRE_THAT(err->what(), ContainsSubstring("scripted transient failure"));
    }

    SECTION("delays follow base * factor^(attempt-1)") {
        se::BackendConfig cfg = mock_config(fixture("mock_retry.jsonl"));
        cfg.retry.base_delay_ms = 40;
        cfg.retry.backoff_factor = 2.0;
        se::Backend b(cfg);
        auto t0 = std::chrono::steady_clock::now();
        b.complete(req_for("a flaky request"));
        auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
                           std::chrono::steady_clock::now() - t0)
                           .count();
        REQUIRE(elapsed >= 110); // two failures: 40ms then 80ms of backoff
    }

    SECTION("non-transport errors are not retried") {
        se::BackendConfig cfg = mock_config(fixture("mock_retry.jsonl"));
        cfg.retry.base_delay_ms = 500;
        se::Backend b(cfg);
        auto t0 = std::chrono::steady_clock::now();
        auto err = try_error([&] { b.complete(req_for("unknown prompt text")); });
        auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
                           std::chrono::steady_clock::now() - t0)
                           .count();
        REQUIRE(err);
        REQUIRE(err->kind() == se::ErrorKind::script);
        REQUIRE(elapsed < 400);
    }
}

TEST_CASE("scripted token logprobs ride along on completions") {
    TempDir tmp("backend_lp");
    auto script = write_file(
        tmp.path, "lp.jsonl",
        R"x({"match": {"prompt_substring": "lp please"}, "response": " (B) yes", "token_logprobs": [[" (B)", -0.5], [" yes", 0.25]]})x"
        "\n"
        R"x({"match": {"prompt_substring": "lp broken"}, "response": "other", "token_logprobs": [["x", -0.1]]})x"
        "\n");
    se::Backend b(mock_config(script));

    se::CompletionRequest r = req_for("lp please");
    r.want_logprobs = true;
    se::Completion c = b.complete(r);
    REQUIRE(c.token_logprobs.has_value());
    REQUIRE(c.token_logprobs->size() == 2);
    REQUIRE((*c.token_logprobs)[0].token == " (B)");
    REQUIRE((*c.token_logprobs)[0].logprob == -0.5);
    REQUIRE((*c.token_logprobs)[1].logprob == 0.0); // clamped to <= 0

    se::CompletionRequest plain = req_for("lp please");
    REQUIRE_FALSE(b.complete(plain).token_logprobs.has_value());

    se::CompletionRequest broken = req_for("lp broken");
    broken.want_logprobs = true;
    auto err = try_error([&] { b.complete(broken); });
    REQUIRE(err);
    REQUIRE(err->kind() == se::ErrorKind::script);
    REQUIRE_THAT(err->what(), ContainsSubstring("concatenate"));
}

TEST_CASE("continuation scoring sums scripted logprobs") {
    se::Backend b(mock_config(fixture("mock_retry.jsonl")));

    se::ScoreResult s = b.score_continuation("score me", " (B) Pancreas");
    REQUIRE(s.sum_logprob == -0.75);
    REQUIRE(s.mean_logprob == -0.375);
    REQUIRE(s.per_token.size() == 2);
    REQUIRE(s.per_token[0].token == " (B)");

    auto err = try_error([&] { b.score_continuation("score me", ""); });
    REQUIRE(err);
    REQUIRE(err->kind() == se::ErrorKind::validation);

    err = try_error([&] { b.score_continuation("no logprobs here", " x"); });
    REQUIRE(err);
    REQUIRE(err->kind() == se::ErrorKind::capability);
    REQUIRE_THAT(err->what(), ContainsSubstring("cannot score"));

    err = try_error([&] { b.score_continuation("never matched", " x"); });
    REQUIRE(err);
    REQUIRE(err->kind() == se::ErrorKind::script);
}

TEST_CASE("disk cache folds repeat requests into hits") {
    TempDir tmp("backend_cache");
    se::BackendConfig cfg = mock_config(fixture("mock_retry.jsonl"));
    cfg.cache_dir = (tmp.path / "cache").string();

    {
        se::Backend b(cfg);
        se::Completion first = b.complete(req_for("one steady request"));
        REQUIRE_FALSE(first.cached);
        se::Completion second = b.complete(req_for("one steady request"));
        REQUIRE(second.cached);
        REQUIRE(second.text == first.text);
        REQUIRE(b.request_count() == 1);

        se::ScoreResult s1 = b.score_continuation("score me", " (B) Pancreas");
        se::ScoreResult s2 = b.score_continuation("score me", " (B) Pancreas");
        REQUIRE(s1.sum_logprob == s2.sum_logprob);
        REQUIRE(b.request_count() == 2);
    }

    SECTION("a fresh backend reuses the cache across processes") {
        se::Backend b(cfg);
        se::Completion c = b.complete(req_for("one steady request"));
        REQUIRE(c.cached);
        REQUIRE(c.text == "steady reply");
        se::ScoreResult s = b.score_continuation("score me", " (B) Pancreas");
        REQUIRE(s.sum_logprob == -0.75);
        REQUIRE(b.request_count() == 0);
    }

    SECTION("entries are sharded json files") {
        std::size_t files = 0;
        for (const auto& e :
             std::filesystem::recursive_directory_iterator(cfg.cache_dir)) {
            if (!e.is_regular_file()) continue;
            ++files;
            REQUIRE(e.path().extension() == ".json");
            std::string digest = e.path().stem().string();
            REQUIRE(digest.size() == 64);
            REQUIRE(e.path().parent_path().filename().string() == digest.substr(0, 2));
        }
        REQUIRE(files == 2);
    }

    SECTION("logprob wishes are part of the cache key") {
        se::Backend b(cfg);
        se::CompletionRequest r = req_for("one steady request");
        r.want_logprobs = true;
        se::Completion c = b.complete(r);
        REQUIRE_FALSE(c.cached);
        REQUIRE(b.request_count() == 1);
    }

    SECTION("a corrupt entry is an io error") {
        for (const auto& e :
             std::filesystem::recursive_directory_iterator(cfg.cache_dir)) {
            if (e.is_regular_file()) write_file(e.path().parent_path(),
                                                e.path().filename().string(), "{broken");
        }
        se::Backend b(cfg);
        auto err = try_error([&] { b.complete(req_for("one steady request")); });
        REQUIRE(err);
        REQUIRE(err->kind() == se::ErrorKind::io);
        REQUIRE_THAT(err->what(), ContainsSubstring("corrupt cache entry"));
    }
}

TEST_CASE("caching is off when no cache directory is configured") {
    se::Backend b(mock_config(fixture("mock_retry.jsonl")));
    b.complete(req_for("one steady request"));
    se::Completion again = b.complete(req_for("one steady request"));
    REQUIRE_FALSE(again.cached);
    REQUIRE(b.request_count() == 2);
}

TEST_CASE("batches keep positional order and embed failures") {
    se::BackendConfig cfg = mock_config(fixture("mock_parallel.jsonl"));
    cfg.max_parallel = 3;
    se::Backend b(cfg);

    std::vector<se::CompletionRequest> reqs;
    for (int i = 0; i < 9; ++i)
        reqs.push_back(req_for("Question number " + std::to_string(i)));
    reqs[4] = req_for("no script entry matches this text");

    auto results = b.batch_complete(reqs);
    REQUIRE(results.size() == 9);
    for (std::size_t i = 0; i < results.size(); ++i) {
        if (i == 4) {
            REQUIRE_FALSE(results[i].ok);
            REQUIRE(results[i].error_kind == se::ErrorKind::script);
            REQUIRE_FALSE(results[i].error.empty());
        } else {
            REQUIRE(results[i].ok);
            REQUIRE(results[i].completion.text == "The answer is (A).");
        }
    }
    REQUIRE(b.peak_in_flight() <= 3);
    REQUIRE(b.peak_in_flight() >= 1);
    REQUIRE(b.batch_complete({}).empty());
}

TEST_CASE("base urls split into host and path prefix") {
    auto u = se::detail::parse_base_url("http://127.0.0.1:8080");
    REQUIRE(u.host_part == "http://127.0.0.1:8080");
    REQUIRE(u.path_prefix.empty());

    u = se::detail::parse_base_url("https://api.example.com/v1/");
    REQUIRE(u.host_part == "https://api.example.com");
    REQUIRE(u.path_prefix == "/v1");

    auto err = try_error([&] { se::detail::parse_base_url("ftp://x"); });
    REQUIRE(err);
    REQUIRE(err->kind() == se::ErrorKind::config);
    err = try_error([&] { se::detail::parse_base_url("no-scheme-here"); });
    REQUIRE(err);
}

TEST_CASE("http backend speaks the chat completions protocol") {
    TestServer server;
    std::string seen_auth, seen_model, seen_content;
    server.svr.Post("/api/v1/chat/completions",
                    [&](const httplib::Request& req, httplib::Response& res) {
                        seen_auth = req.get_header_value("Authorization");
                        json body = json::parse(req.body);
                        seen_model = body["model"];
                        seen_content = body["messages"][0]["content"];
                        json out{{"choices",
                                  json::array(
                                      {{{"message",
                                         {{"role", "assistant"},
                                          {"content", "The answer is (B)."}}},
                                        {"finish_reason", "stop"}}})}};
                        res.set_content(out.dump(), "application/json");
                    });
    server.start();

    ::setenv("SELFEXPLAIN_TEST_KEY", "sekret", 1);
    se::BackendConfig cfg;
    cfg.kind = se::BackendKind::http;
    cfg.base_url = server.base_url() + "/api/";
    cfg.model_id = "test-model";
    cfg.api_key_env = "SELFEXPLAIN_TEST_KEY";
    cfg.retry.base_delay_ms = 1;
    se::Backend b(cfg);

    se::Completion c = b.complete(req_for("What is the answer?"));
    REQUIRE(c.text == "The answer is (B).");
    REQUIRE(c.finish_reason == "stop");
    REQUIRE(seen_auth == "Bearer sekret");
    REQUIRE(seen_model == "test-model");
    REQUIRE(seen_content == "What is the answer?");

    SECTION("a configured but unset key variable is a config error") {
        se::BackendConfig nokey = cfg;
        nokey.api_key_env = "SELFEXPLAIN_TEST_KEY_UNSET";
        ::unsetenv("SELFEXPLAIN_TEST_KEY_UNSET");
        se::Backend nb(nokey);
        auto err = try_error([&] { nb.complete(req_for("x")); });
        REQUIRE(err);
        REQUIRE(err->kind() == se::ErrorKind::config);
    }
}

TEST_CASE("http 5xx and 429 responses are retried") {
    TestServer server;
    std::atomic<int> calls{0};
    server.svr.Post("/v1/chat/completions",
                    [&](const httplib::Request&, httplib::Response& res) {
                        int n = ++calls;
                        if (n <= 2) {
                            res.status = (n == 1) ? 500 : 429;
                            res.set_content("busy", "text/plain");
                            return;
                        }
                        json out{{"choices",
                                  json::array({{{"message", {{"content", "ok"}}}}})}};
                        res.set_content(out.dump(), "application/json");
                    });
    server.start();

    se::BackendConfig cfg;
    cfg.kind = se::BackendKind::http;
    cfg.base_url = server.base_url();
    cfg.retry.base_delay_ms = 1;
    se::Backend b(cfg);
    se::Completion c = b.complete(req_for("retry me"));
    REQUIRE(c.text == "ok");
    REQUIRE(calls.load() == 3);

    SECTION("attempts are bounded") {
        calls = -100; // stays in the failing range for all attempts
        se::BackendConfig two = cfg;
        two.retry.max_attempts = 2;
        se::Backend nb(two);
        int before = calls.load();
        auto err = try_error([&] { nb.complete(req_for("retry me again")); });
        REQUIRE(err);
        REQUIRE(err->kind() == se::ErrorKind::transport);
        REQUIRE(calls.load() - before == 2);
    }
}

TEST_CASE("http error statuses map to protocol or capability") {
    TestServer server;
    server.svr.Post("/v1/chat/completions",
                    [&](const httplib::Request&, httplib::Response& res) {
                        res.status = 404;
                        res.set_content("no such model", "text/plain");
                    });
    server.svr.Post("/v1/completions",
                    [&](const httplib::Request&, httplib::Response& res) {
                        res.status = 404;
                        res.set_content("not found", "text/plain");
                    });
    server.start();

    se::BackendConfig cfg;
    cfg.kind = se::BackendKind::http;
    cfg.base_url = server.base_url();
    cfg.retry.base_delay_ms = 1;
    se::Backend b(cfg);

    auto err = try_error([&] { b.complete(req_for("hello")); });
    REQUIRE(err);
    REQUIRE(err->kind() == se::ErrorKind::protocol);

    err = try_error([&] { b.score_continuation("hello", " world"); });
    REQUIRE(err);
    REQUIRE(err->kind() == se::ErrorKind::capability);
    REQUIRE_THAT(err->what(), ContainsSubstring("/v1/completions"));
}

TEST_CASE("http scoring selects echoed tokens past the prompt boundary") {
    const std::string prompt = "Hello world Answer:";
    const std::string continuation = " (B) X";

    TestServer server;
    std::string mode = "ok";
    std::string seen_prompt;
    bool seen_echo = false;
    int seen_max_tokens = -1;
    server.svr.Post("/v1/completions",
                    [&](const httplib::Request& req, httplib::Response& res) {
                        json body = json::parse(req.body);
                        seen_prompt = body.value("prompt", "");
                        seen_echo = body.value("echo", false);
                        seen_max_tokens = body.value("max_tokens", -1);
                        json lp;
                        if (mode == "ok") {
                            lp = {{"tokens", {"Hello", " world", " Answer:", " (B)", " X"}},
                                  {"token_logprobs", {nullptr, -1.0, -1.0, -0.5, -0.25}},
                                  {"text_offset", {0, 5, 11, 19, 23}}};
                        } else if (mode == "null_in_span") {
                            lp = {{"tokens", {"Hello", " world", " Answer:", " (B)", " X"}},
                                  {"token_logprobs", {nullptr, -1.0, -1.0, nullptr, -0.25}},
                                  {"text_offset", {0, 5, 11, 19, 23}}};
                        } else if (mode == "short") {
                            lp = {{"tokens", {"Hello"}},
                                  {"token_logprobs", {nullptr}},
                                  {"text_offset", {0}}};
                        }
                        json choice{{"text", prompt + continuation}};
                        if (mode != "no_logprobs") choice["logprobs"] = lp;
                        json out{{"choices", json::array({choice})}};
                        res.set_content(out.dump(), "application/json");
                    });
    server.start();

    se::BackendConfig cfg;
    cfg.kind = se::BackendKind::http;
    cfg.base_url = server.base_url();
    cfg.retry.base_delay_ms = 1;
    se::Backend b(cfg);

    se::ScoreResult s = b.score_continuation(prompt, continuation);
    REQUIRE(s.per_token.size() == 2);
    REQUIRE(s.per_token[0].token == " (B)");
    REQUIRE(s.per_token[1].token == " X");
    REQUIRE(s.sum_logprob == -0.75);
    REQUIRE(s.mean_logprob == -0.375);
    REQUIRE(seen_prompt == prompt + continuation);
    REQUIRE(seen_echo);
    REQUIRE(seen_max_tokens == 0);

    mode = "null_in_span";
    auto err = try_error([&] { b.score_continuation(prompt, continuation); });
    REQUIRE(err);
    REQUIRE(err->kind() == se::ErrorKind::protocol);
    REQUIRE_THAT(err->what(), ContainsSubstring("null logprob"));

    mode = "short";
    err = try_error([&] { b.score_continuation(prompt, continuation); });
    REQUIRE(err);
    REQUIRE(err->kind() == se::ErrorKind::protocol);

    mode = "no_logprobs";
    err = try_error([&] { b.score_continuation(prompt, continuation); });
    REQUIRE(err);
    REQUIRE(err->kind() == se::ErrorKind::capability);
}

TEST_CASE("unreachable hosts are transport errors") {
    se::BackendConfig cfg;
    cfg.kind = se::BackendKind::http;
    cfg.base_url = "http://127.0.0.1:1";
    cfg.retry.max_attempts = 1;
    se::Backend b(cfg);
    auto err = try_error([&] { b.complete(req_for("anyone there?")); });
    REQUIRE(err);
    REQUIRE(err->kind() == se::ErrorKind::transport);
}

TEST_CASE("malformed script entries are rejected at load time") {
    TempDir tmp("backend_script");
    auto no_match = write_file(tmp.path, "no_match.jsonl",
                               R"({"response": "hi"})"
                               "\n");
    auto err = try_error([&] { se::Backend b(mock_config(no_match)); });
    REQUIRE(err);
    REQUIRE(err->kind() == se::ErrorKind::script);
    REQUIRE_THAT(err->what(), ContainsSubstring("no_match.jsonl:1"));

    auto bad_tokens = write_file(
        tmp.path, "bad_tokens.jsonl",
        R"({"match": {"prompt_substring": "x"}, "token_logprobs": [[1.5]]})"
        "\n");
    err = try_error([&] { se::Backend b(mock_config(bad_tokens)); });
    REQUIRE(err);
    REQUIRE(err->kind() == se::ErrorKind::script);
}

TEST_CASE("first matching script entry wins") {
    TempDir tmp("backend_order");
    auto script = write_file(
        tmp.path, "order.jsonl",
        R"({"match": {"prompt_substring": "specific phrase"}, "response": "first"})"
        "\n"
        R"({"match": {"prompt_substring": "phrase"}, "response": "second"})"
        "\n");
    se::Backend b(mock_config(script));
    REQUIRE(b.complete(req_for("a specific phrase here")).text == "first");
    REQUIRE(b.complete(req_for("just a phrase")).text == "second");
}

TEST_CASE("script entries can match by prompt hash") {
    std::string text = "match me by content hash";
    std::string hash = se::sha256_hex(text);
    TempDir tmp("backend_hash");
    auto script = write_file(tmp.path, "hash.jsonl",
                             "{\"match\": {\"hash\": \"" + hash +
                                 "\"}, \"response\": \"hashed\"}\n");
    se::Backend b(mock_config(script));
    REQUIRE(b.complete(req_for(text)).text == "hashed");
    auto err = try_error([&] { b.complete(req_for(text + " plus extra")); });
    REQUIRE(err);
    REQUIRE(err->kind() == se::ErrorKind::script);
}
