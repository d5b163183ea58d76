// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <fstream>

#include "doctest.h"

#include "imgref/backend.hpp"
#include "test_support.hpp"

using namespace imgref;
using imgref::testing::MockChatServer;
using imgref::testing::TempDir;
using nlohmann::json;

namespace {

ChatRequest simple_request(const std::string& text, double temperature = 0.0) {
    ChatRequest r;
    r.temperature = temperature;
    r.messages.push_back({Role::user, {ContentPart::text(text)}});
    return r;
}

BackendConfig config_for(const MockChatServer& server) {
    BackendConfig c;
    c.base_url = server.base_url();
    c.model_name = "mock-model";
    c.max_retries = 3;
    c.backoff_base = std::chrono::milliseconds(1);
    c.timeout = std::chrono::milliseconds(5000);
    return c;
}

// Backend that fails the test if it is ever called.
class FailingBackend : public ModelBackend {
public:
    std::string complete(const ChatRequest&) override {
        ++calls;
        throw BackendError(BackendError::Kind::transport, "connect refused");
    }
    std::string model_name() const override { return "mock-model"; }
    int calls = 0;
};

}  // namespace

TEST_SUITE("backend") {

TEST_CASE("request validation") {
    CHECK_THROWS_AS(ChatRequest{}.validate(), BackendError);
    ChatRequest empty_parts;
    empty_parts.messages.push_back({Role::user, {}});
    CHECK_THROWS_AS(empty_parts.validate(), BackendError);
    CHECK_NOTHROW(simple_request("hi").validate());
}

TEST_CASE("fingerprint covers messages, temperature and model") {
    const auto base = fingerprint(simple_request("hi"), "m");
    CHECK(base.size() == 64);
    CHECK(base == fingerprint(simple_request("hi"), "m"));
    CHECK(base != fingerprint(simple_request("hi", 0.5), "m"));
    CHECK(base != fingerprint(simple_request("hi!"), "m"));
    CHECK(base != fingerprint(simple_request("hi"), "other"));
    ChatRequest with_image = simple_request("hi");
    with_image.messages[0].parts.push_back(ContentPart::image("a.png"));
    CHECK(base != fingerprint(with_image, "m"));
}

TEST_CASE("scripted backend keyed on fingerprints") {
    const auto req = simple_request("question");
    auto backend = ScriptedBackend::from_table({{fingerprint(req, "s"), "canned"}}, "s");
    CHECK(backend->complete(req) == "canned");
    CHECK_THROWS_AS(backend->complete(simple_request("other")), BackendError);
    CHECK(backend->call_count() == 2);
}

TEST_CASE("scripted rules match in order") {
    auto backend = ScriptedBackend::from_rules(
        json::parse(R"({"rules":[{"match":"alpha","reply":"A"},{"match":"al","reply":"B"}],"default":"D"})"));
    CHECK(backend->complete(simple_request("alpha beta")) == "A");
    CHECK(backend->complete(simple_request("also")) == "B");
    CHECK(backend->complete(simple_request("zzz")) == "D");
    auto strict = ScriptedBackend::from_rules(json::parse(R"({"rules":[]})"));
    CHECK_THROWS_AS(strict->complete(simple_request("x")), BackendError);
    CHECK_THROWS_AS(ScriptedBackend::from_rules(json::parse(R"({"rules":[{"match":1}]})")), BackendError);
}

TEST_CASE("retry delay stays within the jitter band") {
    SplitMix64 rng(1);
    for (int k = 0; k < 6; ++k) {
        for (int t = 0; t < 100; ++t) {
            const auto d = retry_delay(std::chrono::milliseconds(100), k, rng).count();
            const double nominal = 100.0 * (1 << k);
            CHECK(d >= static_cast<long long>(nominal * 0.5));
            CHECK(d <= static_cast<long long>(nominal * 1.5));
        }
    }
}

TEST_CASE("config validation") {
    BackendConfig c;
    c.base_url = "http://localhost:1/v1";
    c.model_name = "m";
    CHECK_NOTHROW(c.validate());
    c.max_concurrent = 0;
    CHECK_THROWS_AS(c.validate(), BackendError);
    c.max_concurrent = 1;
    c.timeout = std::chrono::milliseconds(0);
    CHECK_THROWS_AS(c.validate(), BackendError);
}

TEST_CASE("HTTP 429 twice then 200 succeeds on the third attempt") {
    std::atomic<int> calls{0};
    MockChatServer server([&](const json&) -> std::pair<int, std::string> {
        return ++calls <= 2 ? std::pair{429, std::string("slow down")} : std::pair{200, std::string("hello")};
    });
    std::vector<std::chrono::milliseconds> sleeps;
    HttpBackend backend(config_for(server), [&](std::chrono::milliseconds d) { sleeps.push_back(d); });
    const auto result = backend.complete_detailed(simple_request("hi"));
    CHECK(result.text == "hello");
    CHECK(result.attempts == 3);
    CHECK(server.request_count() == 3);
    REQUIRE(sleeps.size() == 2);
}

TEST_CASE("missing credential fails before any network call") {
    MockChatServer server([](const json&) { return std::pair{200, std::string("x")}; });
    BackendConfig c = config_for(server);
    c.api_key_env = "IMGREF_TEST_DEFINITELY_UNSET_KEY";
    ::unsetenv(c.api_key_env.c_str());
    HttpBackend backend(c);
    try {
        backend.complete(simple_request("hi"));
        FAIL("expected auth error");
    } catch (const BackendError& e) {
        CHECK(e.kind() == BackendError::Kind::auth);
    }
    CHECK(server.request_count() == 0);
}

TEST_CASE("credential is sent as a bearer token") {
    MockChatServer server([](const json&) { return std::pair{200, std::string("ok")}; });
    BackendConfig c = config_for(server);
    c.api_key_env = "IMGREF_TEST_KEY";
    ::setenv("IMGREF_TEST_KEY", "sekrit", 1);
    HttpBackend backend(c);
    CHECK(backend.complete(simple_request("hi")) == "ok");
    CHECK(server.auth_headers().at(0) == "Bearer sekrit");
    const auto body = server.bodies().at(0);
    CHECK(body["model"] == "mock-model");
    CHECK(body["messages"][0]["role"] == "user");
    ::unsetenv("IMGREF_TEST_KEY");
}

TEST_CASE("non-retryable and exhausted failures") {
    MockChatServer unauthorized([](const json&) { return std::pair{401, std::string("no")}; });
    try {
        HttpBackend(config_for(unauthorized), [](auto) {}).complete(simple_request("hi"));
        FAIL("expected auth error");
    } catch (const BackendError& e) {
        CHECK(e.kind() == BackendError::Kind::auth);
    }
    CHECK(unauthorized.request_count() == 1);

    MockChatServer bad_request([](const json&) { return std::pair{400, std::string("bad")}; });
    try {
        HttpBackend(config_for(bad_request), [](auto) {}).complete(simple_request("hi"));
        FAIL("expected rejection");
    } catch (const BackendError& e) {
        CHECK(e.kind() == BackendError::Kind::rejected);
    }
    CHECK(bad_request.request_count() == 1);

    MockChatServer down([](const json&) { return std::pair{503, std::string("down")}; });
    try {
        HttpBackend(config_for(down), [](auto) {}).complete(simple_request("hi"));
        FAIL("expected exhaustion");
    } catch (const BackendError& e) {
        CHECK(e.kind() == BackendError::Kind::exhausted);
    }
    CHECK(down.request_count() == 4);  // max_retries + 1
}

TEST_CASE("transport failure is retried then exhausted") {
    BackendConfig c;
    c.base_url = "http://127.0.0.1:1/v1";
    c.model_name = "m";
    c.max_retries = 1;
    c.timeout = std::chrono::milliseconds(500);
    int sleeps = 0;
    try {
        HttpBackend(c, [&](auto) { ++sleeps; }).complete(simple_request("hi"));
        FAIL("expected exhaustion");
    } catch (const BackendError& e) {
        CHECK(e.kind() == BackendError::Kind::exhausted);
    }
    CHECK(sleeps == 1);
}

TEST_CASE("malformed upstream responses") {
    CHECK_THROWS_AS(HttpBackend::parse_completion("not json"), BackendError);
    CHECK_THROWS_AS(HttpBackend::parse_completion(R"({"choices":[]})"), BackendError);
    CHECK_THROWS_AS(HttpBackend::parse_completion(R"({"choices":[{"message":{"content":null}}]})"), BackendError);
    CHECK(HttpBackend::parse_completion(R"({"choices":[{"message":{"content":"x"}}]})") == "x");
}

TEST_CASE("image parts travel as URLs or data URLs") {
    TempDir dir;
    std::ofstream(dir / "pic.png", std::ios::binary) << "PNGDATA";
    ChatRequest r = simple_request("look");
    r.messages[0].parts.push_back(ContentPart::image((dir / "pic.png").string()));
    r.messages[0].parts.push_back(ContentPart::image("https://example.org/a.jpg"));

    BackendConfig c;
    c.base_url = "http://127.0.0.1:1/v1";
    c.model_name = "m";
    const auto by_url = HttpBackend(c).build_body(r);
    CHECK(by_url["messages"][0]["content"][1]["image_url"]["url"] == (dir / "pic.png").string());

    c.inline_images = true;
    const auto inlined = HttpBackend(c).build_body(r);
    CHECK(inlined["messages"][0]["content"][1]["image_url"]["url"] ==
          "data:image/png;base64," + base64_encode("PNGDATA"));
    CHECK(inlined["messages"][0]["content"][2]["image_url"]["url"] == "https://example.org/a.jpg");
}

TEST_CASE("in-flight requests never exceed max_concurrent") {
    MockChatServer server([](const json&) { return std::pair{200, std::string("ok")}; });
    server.set_delay_ms(20);
    BackendConfig c = config_for(server);
    c.max_concurrent = 2;
    HttpBackend backend(c);
    parallel_for(12, 6, [&](std::size_t i) { backend.complete(simple_request("q" + std::to_string(i))); });
    CHECK(server.request_count() == 12);
    CHECK(server.peak_in_flight() <= 2);
    CHECK(backend.peak_in_flight() <= 2);
    CHECK(backend.peak_in_flight() >= 1);
}

TEST_CASE("record then replay serves identical completions without upstream calls") {
    TempDir dir;
    auto inner = std::make_shared<ScriptedBackend>(
        [](const ChatRequest& r) { return "reply to " + r.all_text(); }, "mock-model");
    RecordReplayBackend recorder(inner, dir.path(), CacheMode::record);
    const auto first = recorder.complete(simple_request("q1"));
    CHECK(recorder.upstream_calls() == 1);

    auto failing = std::make_shared<FailingBackend>();
    RecordReplayBackend replay(failing, dir.path(), CacheMode::replay);
    CHECK(replay.complete(simple_request("q1")) == first);
    CHECK(replay.upstream_calls() == 0);
    CHECK(failing->calls == 0);

    try {
        replay.complete(simple_request("unseen"));
        FAIL("expected miss");
    } catch (const BackendError& e) {
        CHECK(e.kind() == BackendError::Kind::replay_miss);
        CHECK(std::string(e.what()).find(fingerprint(simple_request("unseen"), "mock-model")) != std::string::npos);
    }
    CHECK_THROWS_AS(replay.complete(simple_request("q1", 0.7)), BackendError);
}

TEST_CASE("cache entries are one file per fingerprint and corruption is detected") {
    TempDir dir;
    ::setenv("IMGREF_CACHE_TEST_KEY", "very-secret-token", 1);
    auto inner = std::make_shared<ScriptedBackend>([](const ChatRequest&) { return "done"; }, "mock-model");
    RecordReplayBackend recorder(inner, dir.path(), CacheMode::record);
    const auto req = simple_request("q");
    recorder.complete(req);
    const auto fp = fingerprint(req, "mock-model");
    const auto path = recorder.entry_path(fp);
    REQUIRE(std::filesystem::exists(path));
    const auto entry = json::parse(read_file(path));
    CHECK(entry["request_digest"] == fp);
    CHECK(entry["completion"] == "done");
    CHECK(entry.contains("timestamp"));
    CHECK(read_file(path).find("very-secret-token") == std::string::npos);
    ::unsetenv("IMGREF_CACHE_TEST_KEY");

    RecordReplayBackend replay(std::make_shared<FailingBackend>(), dir.path(), CacheMode::replay);
    auto tampered = entry;
    tampered["request_digest"] = std::string(64, '0');
    write_file_atomic(path, tampered.dump());
    try {
        replay.complete(req);
        FAIL("expected corruption");
    } catch (const BackendError& e) {
        CHECK(e.kind() == BackendError::Kind::cache_corrupt);
    }
    write_file_atomic(path, "{trunc");
    CHECK_THROWS_AS(replay.complete(req), BackendError);
}

TEST_CASE("passthrough never touches the cache") {
    TempDir dir;
    auto inner = std::make_shared<ScriptedBackend>([](const ChatRequest&) { return "p"; }, "m");
    RecordReplayBackend pass(inner, dir / "cache", CacheMode::passthrough);
    CHECK(pass.complete(simple_request("q")) == "p");
    CHECK(pass.upstream_calls() == 1);
    const bool cached = std::filesystem::exists(dir / "cache") && !std::filesystem::is_empty(dir / "cache");
    CHECK_FALSE(cached);
    CHECK(parse_cache_mode("replay") == CacheMode::replay);
    CHECK_THROWS(parse_cache_mode("sometimes"));
}

}  // TEST_SUITE
