#pragma once

// Uniform completion interface over an OpenAI-compatible HTTP endpoint and a
// deterministic scripted mock, with a content-addressed disk cache, retry
// with exponential backoff, and bounded parallel batching.
//
// Mock script files are JSONL; each entry matches a request either by exact
// content hash or by substring of the prompt text:
//   {"match": {"prompt_substring": "..."}, "response": "...",
//    "token_logprobs": [["tok", -0.1], ...], "fail_times": 2}
// Entries are tried in file order; the first match wins. For scoring
// requests, matching runs against prompt + continuation and token_logprobs
// lists the continuation tokens. fail_times makes the first N uses of the
// entry fail transiently, which exercises the retry policy.

#include <httplib.h>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "selfexplain/error.hpp"
#include "selfexplain/hash.hpp"
#include "selfexplain/jsonl.hpp"
#include "selfexplain/prompting.hpp"

namespace selfexplain {

enum class BackendKind { http, mock };

inline BackendKind parse_backend_kind(std::string_view s) {
    if (s == "http") return BackendKind::http;
    if (s == "mock") return BackendKind::mock;
    throw Error(ErrorKind::validation, "unknown backend kind: " + std::string(s));
}

inline const char* backend_kind_name(BackendKind k) {
    return k == BackendKind::http ? "http" : "mock";
}

struct RetryPolicy {
    int max_attempts = 3;
    int base_delay_ms = 500;
    double backoff_factor = 2.0;
};

struct BackendConfig {
    BackendKind kind = BackendKind::mock;
    std::string base_url;     // http only, e.g. "http://127.0.0.1:8080"
    std::string model_id = "mock-model";
    std::string api_key_env;  // name of the env var holding the key; empty = no auth
    std::string script_path;  // mock only
    std::string cache_dir;    // empty disables the disk cache
    double temperature_generate = 0.7;
    double temperature_answer = 0.0;
    int max_tokens = 512;
    int max_parallel = 4;
    RetryPolicy retry;

    void validate() const {
        if (!std::isfinite(temperature_generate) || temperature_generate < 0.0 ||
            !std::isfinite(temperature_answer) || temperature_answer < 0.0)
            throw Error(ErrorKind::config, "backend temperatures must be finite and >= 0");
        if (retry.max_attempts < 1)
            throw Error(ErrorKind::config, "retry.max_attempts must be >= 1");
        if (max_parallel < 1)
            throw Error(ErrorKind::config, "max_parallel must be >= 1");
        if (max_tokens < 1)
            throw Error(ErrorKind::config, "max_tokens must be >= 1");
        if (kind == BackendKind::http && base_url.empty())
            throw Error(ErrorKind::config, "http backend needs base_url");
        if (kind == BackendKind::mock && script_path.empty())
            throw Error(ErrorKind::config, "mock backend needs script_path");
    }
};

struct CompletionRequest {
    PromptBundle prompt;
    double temperature = 0.0;
    int max_tokens = 512;
    bool want_logprobs = false;
    std::vector<std::string> stop;
};

struct TokenLogprob {
    std::string token;
    double logprob = 0.0;
};

struct Completion {
    std::string text;
    std::optional<std::vector<TokenLogprob>> token_logprobs;
    std::string finish_reason;
    bool cached = false;
};

struct ScoreResult {
    double sum_logprob = 0.0;
    double mean_logprob = 0.0;
    std::vector<TokenLogprob> per_token;
};

// Per-item outcome of a batch; failures are embedded, never thrown.
struct CompletionResult {
    bool ok = false;
    Completion completion;
    std::string error;
    ErrorKind error_kind = ErrorKind::internal;
};

// ---------------------------------------------------------------------------
// Mock script
// ---------------------------------------------------------------------------

namespace detail {

struct MockEntry {
    std::optional<std::string> match_hash;
    std::optional<std::string> match_substring;
    std::string response;
    std::optional<std::vector<TokenLogprob>> token_logprobs;
    int fail_times = 0;
    int delay_ms = 0; // simulated latency, for concurrency tests
};

class MockScript {
public:
    MockScript() = default;

    void load(const std::filesystem::path& path) {
        auto lines = read_jsonl_file(path);
        for (const auto& line : lines) {
            const json& j = line.value;
            std::string where = path.filename().string() + ":" + std::to_string(line.line_no);
            if (!j.is_object() || !j.contains("match") || !j["match"].is_object())
                throw Error(ErrorKind::script, where + ": entry needs a 'match' object");
            MockEntry e;
            const json& m = j["match"];
            if (m.contains("hash")) e.match_hash = m["hash"].get<std::string>();
            if (m.contains("prompt_substring"))
                e.match_substring = m["prompt_substring"].get<std::string>();
            if (!e.match_hash && !e.match_substring)
                throw Error(ErrorKind::script,
                            where + ": match needs 'hash' or 'prompt_substring'");
            if (j.contains("response")) e.response = j["response"].get<std::string>();
            if (j.contains("token_logprobs")) {
                std::vector<TokenLogprob> tokens;
                for (const auto& t : j["token_logprobs"]) {
                    if (!t.is_array() || t.size() != 2)
                        throw Error(ErrorKind::script,
                                    where + ": token_logprobs entries are [token, logprob]");
                    tokens.push_back({t[0].get<std::string>(), t[1].get<double>()});
                }
                e.token_logprobs = std::move(tokens);
            }
            if (j.contains("fail_times")) e.fail_times = j["fail_times"].get<int>();
            if (j.contains("delay_ms")) e.delay_ms = j["delay_ms"].get<int>();
            entries_.push_back(std::move(e));
            failures_left_.push_back(entries_.back().fail_times);
        }
    }

    struct Lookup {
        const MockEntry* entry = nullptr;
        bool fail_now = false;
    };

    // First entry matching the text, in script order. Consumes one armed
    // failure if the entry still has any.
    Lookup find(const std::string& text) {
        std::scoped_lock lock(mu_);
        std::string hash;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            const MockEntry& e = entries_[i];
            bool matched = false;
            if (e.match_hash) {
                if (hash.empty()) hash = sha256_hex(text);
                matched = *e.match_hash == hash;
            }
            if (!matched && e.match_substring)
                matched = text.find(*e.match_substring) != std::string::npos;
            if (!matched) continue;
            Lookup out;
            out.entry = &e;
            if (failures_left_[i] > 0) {
                --failures_left_[i];
                out.fail_now = true;
            }
            return out;
        }
        return {};
    }

private:
    std::vector<MockEntry> entries_;
    std::vector<int> failures_left_;
    std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Disk cache: cache_dir/<first-2-hex>/<digest>.json, atomic write-then-rename.
// ---------------------------------------------------------------------------

class DiskCache {
public:
    explicit DiskCache(std::string dir) : dir_(std::move(dir)) {}

    bool enabled() const { return !dir_.empty(); }

    std::optional<json> fetch(const std::string& digest) const {
        if (!enabled()) return std::nullopt;
        std::filesystem::path p = path_for(digest);
        std::error_code ec;
        if (!std::filesystem::exists(p, ec)) return std::nullopt;
        json j = json::parse(read_text_file(p), nullptr, false);
        if (j.is_discarded())
            throw Error(ErrorKind::io, "corrupt cache entry: " + p.string());
        return j;
    }

    void store(const std::string& digest, const json& value) const {
        if (!enabled()) return;
        atomic_write_file(path_for(digest), value.dump());
    }

private:
    std::filesystem::path path_for(const std::string& digest) const {
        return std::filesystem::path(dir_) / digest.substr(0, 2) / (digest + ".json");
    }

    std::string dir_;
};

struct ParsedBaseUrl {
    std::string host_part;   // scheme://host[:port]
    std::string path_prefix; // may be empty
};

inline ParsedBaseUrl parse_base_url(const std::string& url) {
    std::size_t scheme_end = url.find("://");
    if (scheme_end == std::string::npos)
        throw Error(ErrorKind::config, "base_url needs a scheme: " + url);
    std::string scheme = url.substr(0, scheme_end);
    if (scheme != "http" && scheme != "https")
        throw Error(ErrorKind::config, "unsupported scheme '" + scheme + "' in " + url);
    std::size_t path_start = url.find('/', scheme_end + 3);
    ParsedBaseUrl out;
    if (path_start == std::string::npos) {
        out.host_part = url;
    } else {
        out.host_part = url.substr(0, path_start);
        out.path_prefix = url.substr(path_start);
        while (!out.path_prefix.empty() && out.path_prefix.back() == '/')
            out.path_prefix.pop_back();
    }
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Backend
// ---------------------------------------------------------------------------

class Backend {
public:
    explicit Backend(BackendConfig config) : cfg_(std::move(config)), cache_(cfg_.cache_dir) {
        cfg_.validate();
        if (cfg_.kind == BackendKind::mock) script_.load(cfg_.script_path);
    }

    const BackendConfig& config() const { return cfg_; }

    // Completions that went to the transport (mock or network), i.e. cache
    // misses. Cache hits leave the counter untouched.
    std::uint64_t request_count() const { return requests_.load(); }

    // High-water mark of simultaneously in-flight transport requests.
    int peak_in_flight() const { return peak_in_flight_.load(); }

    Completion complete(const CompletionRequest& request) {
        json key{{"kind", "chat"},
                 {"model", cfg_.model_id},
                 {"prompt_hash", request.prompt.content_hash},
                 {"temperature", request.temperature},
                 {"max_tokens", request.max_tokens},
                 {"stop", request.stop},
                 {"want_logprobs", request.want_logprobs}};
        std::string digest = sha256_hex(key.dump());
        if (auto hit = cache_.fetch(digest)) {
            Completion c = completion_from_json((*hit)["completion"]);
            c.cached = true;
            return c;
        }

        Completion c = with_retry([&] {
            InFlightGuard guard(*this);
            return cfg_.kind == BackendKind::mock ? mock_complete(request)
                                                  : http_complete(request);
        });
        requests_.fetch_add(1);
        if (cache_.enabled()) {
            json entry{{"key", key},
                       {"request",
                        {{"prompt", request.prompt.text},
                         {"temperature", request.temperature},
                         {"max_tokens", request.max_tokens}}},
                       {"completion", completion_to_json(c)}};
            cache_.store(digest, entry);
        }
        return c;
    }

    // log P(continuation | prompt), summed and averaged over the continuation
    // tokens only. Requires echoed logprobs (http /v1/completions) or scripted
    // per-token logprobs (mock).
    ScoreResult score_continuation(const std::string& prompt,
                                   const std::string& continuation) {
        if (continuation.empty())
            throw Error(ErrorKind::validation,
                        "score_continuation: continuation has no tokens");
        json key{{"kind", "score"},
                 {"model", cfg_.model_id},
                 {"prompt_hash", sha256_hex(prompt)},
                 {"continuation_hash", sha256_hex(continuation)}};
        std::string digest = sha256_hex(key.dump());

        std::vector<TokenLogprob> tokens;
        if (auto hit = cache_.fetch(digest)) {
            tokens = tokens_from_json((*hit)["tokens"]);
        } else {
            tokens = with_retry([&] {
                InFlightGuard guard(*this);
                return cfg_.kind == BackendKind::mock
                           ? mock_score(prompt, continuation)
                           : http_score(prompt, continuation);
            });
            requests_.fetch_add(1);
            if (cache_.enabled()) {
                json entry{{"key", key},
                           {"request", {{"prompt", prompt}, {"continuation", continuation}}},
                           {"tokens", tokens_to_json(tokens)}};
                cache_.store(digest, entry);
            }
        }
        if (tokens.empty())
            throw Error(ErrorKind::protocol,
                        "scoring returned no tokens for the continuation");
        ScoreResult out;
        for (const auto& t : tokens) out.sum_logprob += t.logprob;
        out.mean_logprob = out.sum_logprob / static_cast<double>(tokens.size());
        out.per_token = std::move(tokens);
        return out;
    }

    // Runs the whole batch with at most max_parallel requests in flight.
    // Results are positionally aligned; per-item failures are embedded.
    std::vector<CompletionResult> batch_complete(
        const std::vector<CompletionRequest>& requests) {
        std::vector<CompletionResult> results(requests.size());
        if (requests.empty()) return results;
        std::atomic<std::size_t> next{0};
        std::size_t workers = std::min<std::size_t>(
            static_cast<std::size_t>(cfg_.max_parallel), requests.size());
        auto work = [&] {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= requests.size()) return;
                try {
                    results[i].completion = complete(requests[i]);
                    results[i].ok = true;
                } catch (const Error& e) {
                    results[i].ok = false;
                    results[i].error = e.what();
                    results[i].error_kind = e.kind();
                } catch (const std::exception& e) {
                    results[i].ok = false;
                    results[i].error = e.what();
                    results[i].error_kind = ErrorKind::internal;
                }
            }
        };
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& t : pool) t.join();
        return results;
    }

private:
    struct InFlightGuard {
        explicit InFlightGuard(Backend& b) : backend(b) {
            int now = backend.in_flight_.fetch_add(1) + 1;
            int peak = backend.peak_in_flight_.load();
            while (now > peak &&
                   !backend.peak_in_flight_.compare_exchange_weak(peak, now)) {
            }
        }
        ~InFlightGuard() { backend.in_flight_.fetch_sub(1); }
        Backend& backend;
    };

    template <class Fn>
    auto with_retry(Fn&& fn) -> decltype(fn()) {
        for (int attempt = 1;; ++attempt) {
            try {
                return fn();
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::transport ||
                    attempt >= cfg_.retry.max_attempts)
                    throw;
                double delay_ms =
                    static_cast<double>(cfg_.retry.base_delay_ms) *
                    std::pow(cfg_.retry.backoff_factor, attempt - 1);
                std::this_thread::sleep_for(
                    std::chrono::duration<double, std::milli>(delay_ms));
            }
        }
    }

    // --- mock -------------------------------------------------------------

    Completion mock_complete(const CompletionRequest& request) {
        auto hit = script_.find(request.prompt.text);
        if (!hit.entry)
            throw Error(ErrorKind::script,
                        "mock script has no entry matching prompt (hash " +
                            request.prompt.content_hash.substr(0, 12) + "...)");
        if (hit.fail_now)
            throw Error(ErrorKind::transport, "scripted transient failure");
        if (hit.entry->delay_ms > 0)
            std::this_thread::sleep_for(std::chrono::milliseconds(hit.entry->delay_ms));
        Completion c;
        c.text = hit.entry->response;
        c.finish_reason = "stop";
        if (request.want_logprobs && hit.entry->token_logprobs) {
            std::string joined;
            for (const auto& t : *hit.entry->token_logprobs) joined += t.token;
            if (joined != c.text)
                throw Error(ErrorKind::script,
                            "mock entry token_logprobs do not concatenate to the response");
            c.token_logprobs = clamp_nonpositive(*hit.entry->token_logprobs);
        }
        return c;
    }

    std::vector<TokenLogprob> mock_score(const std::string& prompt,
                                         const std::string& continuation) {
        auto hit = script_.find(prompt + continuation);
        if (!hit.entry)
            throw Error(ErrorKind::script,
                        "mock script has no scoring entry matching prompt+continuation");
        if (hit.fail_now)
            throw Error(ErrorKind::transport, "scripted transient failure");
        if (hit.entry->delay_ms > 0)
            std::this_thread::sleep_for(std::chrono::milliseconds(hit.entry->delay_ms));
        if (!hit.entry->token_logprobs)
            throw Error(ErrorKind::capability,
                        "mock entry has no token_logprobs; backend cannot score");
        return clamp_nonpositive(*hit.entry->token_logprobs);
    }

    // --- http -------------------------------------------------------------

    httplib::Headers http_headers() const {
        httplib::Headers headers;
        if (!cfg_.api_key_env.empty()) {
            const char* key = std::getenv(cfg_.api_key_env.c_str());
            if (!key || !*key)
                throw Error(ErrorKind::config,
                            "api key environment variable '" + cfg_.api_key_env +
                                "' is not set");
            headers.emplace("Authorization", std::string("Bearer ") + key);
        }
        return headers;
    }

    json http_post(const std::string& endpoint, const json& body,
                   bool absent_is_capability) {
        auto url = detail::parse_base_url(cfg_.base_url);
        httplib::Client client(url.host_part);
        client.set_connection_timeout(std::chrono::seconds(10));
        client.set_read_timeout(std::chrono::seconds(300));
        client.set_write_timeout(std::chrono::seconds(30));
        auto res = client.Post(url.path_prefix + endpoint, http_headers(),
                               body.dump(), "application/json");
        if (!res)
            throw Error(ErrorKind::transport,
                        "request to " + cfg_.base_url + endpoint + " failed: " +
                            httplib::to_string(res.error()));
        if (res->status == 429 || res->status >= 500)
            throw Error(ErrorKind::transport,
                        "backend returned " + std::to_string(res->status) + ": " +
                            res->body);
        if (res->status < 200 || res->status >= 300) {
            if (absent_is_capability)
                throw Error(ErrorKind::capability,
                            "backend lacks support for " + endpoint + " (status " +
                                std::to_string(res->status) + "): " + res->body);
            throw Error(ErrorKind::protocol,
                        "backend returned " + std::to_string(res->status) + ": " +
                            res->body);
        }
        json parsed = json::parse(res->body, nullptr, false);
        if (parsed.is_discarded())
            throw Error(ErrorKind::protocol, "backend sent unparseable JSON");
        return parsed;
    }

    Completion http_complete(const CompletionRequest& request) {
        json body{{"model", cfg_.model_id},
                  {"messages",
                   json::array({{{"role", "user"}, {"content", request.prompt.text}}})},
                  {"temperature", request.temperature},
                  {"max_tokens", request.max_tokens}};
        if (!request.stop.empty()) body["stop"] = request.stop;
        if (request.want_logprobs) body["logprobs"] = true;
        json res = http_post("/v1/chat/completions", body, false);

        if (!res.contains("choices") || res["choices"].empty())
            throw Error(ErrorKind::protocol, "completion response has no choices");
        const json& choice = res["choices"][0];
        Completion c;
        if (choice.contains("message") && choice["message"].contains("content") &&
            choice["message"]["content"].is_string())
            c.text = choice["message"]["content"].get<std::string>();
        else if (choice.contains("text") && choice["text"].is_string())
            c.text = choice["text"].get<std::string>();
        else
            throw Error(ErrorKind::protocol, "completion choice has no content");
        if (choice.contains("finish_reason") && choice["finish_reason"].is_string())
            c.finish_reason = choice["finish_reason"].get<std::string>();
        if (request.want_logprobs && choice.contains("logprobs") &&
            choice["logprobs"].is_object() && choice["logprobs"].contains("content")) {
            std::vector<TokenLogprob> tokens;
            for (const auto& t : choice["logprobs"]["content"])
                tokens.push_back({t.value("token", std::string{}),
                                  t.value("logprob", 0.0)});
            c.token_logprobs = clamp_nonpositive(tokens);
        }
        return c;
    }

    std::vector<TokenLogprob> http_score(const std::string& prompt,
                                         const std::string& continuation) {
        json body{{"model", cfg_.model_id},
                  {"prompt", prompt + continuation},
                  {"max_tokens", 0},
                  {"echo", true},
                  {"logprobs", 0},
                  {"temperature", 0.0}};
        json res = http_post("/v1/completions", body, true);
        if (!res.contains("choices") || res["choices"].empty())
            throw Error(ErrorKind::protocol, "scoring response has no choices");
        const json& choice = res["choices"][0];
        if (!choice.contains("logprobs") || !choice["logprobs"].is_object())
            throw Error(ErrorKind::capability,
                        "backend did not echo logprobs; cannot score continuations");
        const json& lp = choice["logprobs"];
        if (!lp.contains("tokens") || !lp.contains("token_logprobs") ||
            !lp.contains("text_offset"))
            throw Error(ErrorKind::capability,
                        "scoring response lacks tokens/token_logprobs/text_offset");

        // Continuation tokens are the ones whose text offset lies at or past
        // the prompt/continuation boundary.
        std::vector<TokenLogprob> tokens;
        const json& toks = lp["tokens"];
        const json& probs = lp["token_logprobs"];
        const json& offsets = lp["text_offset"];
        for (std::size_t i = 0; i < toks.size() && i < probs.size() && i < offsets.size();
             ++i) {
            if (offsets[i].get<long long>() <
                static_cast<long long>(prompt.size()))
                continue;
            if (probs[i].is_null())
                throw Error(ErrorKind::protocol,
                            "null logprob inside the continuation span");
            tokens.push_back({toks[i].get<std::string>(), probs[i].get<double>()});
        }
        if (tokens.empty())
            throw Error(ErrorKind::protocol,
                        "no echoed tokens aligned with the continuation");
        return clamp_nonpositive(tokens);
    }

    // --- (de)serialization helpers -----------------------------------------

    static std::vector<TokenLogprob> clamp_nonpositive(std::vector<TokenLogprob> tokens) {
        for (auto& t : tokens) t.logprob = std::min(t.logprob, 0.0);
        return tokens;
    }

    static json tokens_to_json(const std::vector<TokenLogprob>& tokens) {
        json arr = json::array();
        for (const auto& t : tokens) arr.push_back(json::array({t.token, t.logprob}));
        return arr;
    }

    static std::vector<TokenLogprob> tokens_from_json(const json& arr) {
        std::vector<TokenLogprob> out;
        for (const auto& t : arr) out.push_back({t[0].get<std::string>(), t[1].get<double>()});
        return out;
    }

    static json completion_to_json(const Completion& c) {
        json j{{"text", c.text}, {"finish_reason", c.finish_reason}};
        if (c.token_logprobs) j["token_logprobs"] = tokens_to_json(*c.token_logprobs);
        return j;
    }

    static Completion completion_from_json(const json& j) {
        Completion c;
        c.text = j.value("text", std::string{});
        c.finish_reason = j.value("finish_reason", std::string{});
        if (j.contains("token_logprobs"))
            c.token_logprobs = tokens_from_json(j["token_logprobs"]);
        return c;
    }

    BackendConfig cfg_;
    detail::MockScript script_;
    detail::DiskCache cache_;
    std::atomic<std::uint64_t> requests_{0};
    std::atomic<int> in_flight_{0};
    std::atomic<int> peak_in_flight_{0};
};

} // namespace selfexplain
