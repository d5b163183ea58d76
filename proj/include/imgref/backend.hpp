// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "json.hpp"

#include "imgref/util.hpp"

namespace imgref {

enum class Role { system, user, assistant };

struct ContentPart {
    enum class Kind { text, image };
    Kind kind = Kind::text;
    std::string value;  // text, or image uri

    static ContentPart text(std::string t) { return {Kind::text, std::move(t)}; }
    static ContentPart image(std::string uri) { return {Kind::image, std::move(uri)}; }
};

struct ChatMessage {
    Role role = Role::user;
    std::vector<ContentPart> parts;

    /// Concatenation of the text parts.
    std::string text() const;
    std::size_t image_count() const;
};

struct ChatRequest {
    std::vector<ChatMessage> messages;
    double temperature = 0.0;
    int max_output = 2048;

    /// Throws BackendError if there are no messages or a message has no parts.
    void validate() const;
    /// Every text part of every message, joined by newlines (for prompt audits).
    std::string all_text() const;
    std::size_t image_count() const;
};

std::string to_string(Role role);

class BackendError : public Error {
public:
    enum class Kind { auth, exhausted, malformed, transport, rejected, replay_miss, cache_corrupt, empty };
    BackendError(Kind kind, const std::string& message) : Error(message), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

/// Anything that turns a chat request into completion text. Implementations
/// are safe to share across threads.
class ModelBackend {
public:
    virtual ~ModelBackend() = default;
    virtual std::string complete(const ChatRequest& request) = 0;
    /// Part of the cache key; two backends with different names never share entries.
    virtual std::string model_name() const = 0;
};

/// Content hash of (model name, messages, temperature, max_output).
std::string fingerprint(const ChatRequest& request, const std::string& model_name);

/// Canonical JSON used for hashing and for the wire body.
nlohmann::json request_to_json(const ChatRequest& request);

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

/// Deterministic backend driven by a handler function. Every request is
/// logged for prompt audits.
class ScriptedBackend : public ModelBackend {
public:
    using Handler = std::function<std::string(const ChatRequest&)>;

    explicit ScriptedBackend(Handler handler, std::string name = "scripted");

    /// Replies from a fingerprint -> completion table; unknown requests throw.
    static std::shared_ptr<ScriptedBackend> from_table(std::map<std::string, std::string> table,
                                                       std::string name = "scripted");

    /// Rules matched in order against the request's text: {"match": substring, "reply": text};
    /// "default" is used when nothing matches.
    static std::shared_ptr<ScriptedBackend> from_rules(const nlohmann::json& script,
                                                       std::string name = "scripted");

    std::string complete(const ChatRequest& request) override;
    std::string model_name() const override { return name_; }

    std::vector<ChatRequest> requests() const;
    std::size_t call_count() const;

private:
    Handler handler_;
    std::string name_;
    mutable std::mutex mu_;
    std::vector<ChatRequest> log_;
};

// ---------------------------------------------------------------------------
// HTTP chat-completions backend
// ---------------------------------------------------------------------------

struct BackendConfig {
    std::string base_url;  // e.g. "https://api.example.com/v1"
    std::string model_name;
    std::string api_key_env;  // empty: no Authorization header
    std::chrono::milliseconds timeout{60000};
    int max_retries = 3;
    std::chrono::milliseconds backoff_base{500};
    int max_concurrent = 4;
    bool inline_images = false;  // send local files as base64 data URLs
    std::uint64_t seed = 0;      // jitter stream

    /// Throws BackendError(rejected) on invalid values.
    void validate() const;
};

/// Delay before retry k (0-based): backoff_base * 2^k scaled by a factor in [0.5, 1.5).
std::chrono::milliseconds retry_delay(std::chrono::milliseconds base, int attempt, SplitMix64& rng);

/// Blocks while `limit` holders are inside; RAII via Permit.
class ConcurrencyLimiter {
public:
    explicit ConcurrencyLimiter(int limit) : limit_(limit) {}

    class Permit {
    public:
        explicit Permit(ConcurrencyLimiter& l) : l_(l) { l_.acquire(); }
        ~Permit() { l_.release(); }
        Permit(const Permit&) = delete;
        Permit& operator=(const Permit&) = delete;

    private:
        ConcurrencyLimiter& l_;
    };

    int in_flight() const;
    int peak() const;

private:
    void acquire();
    void release();

    int limit_;
    int in_flight_ = 0;
    int peak_ = 0;
    mutable std::mutex mu_;
    std::condition_variable cv_;
};

struct CompletionResult {
    std::string text;
    int attempts = 0;
};

class HttpBackend : public ModelBackend {
public:
    using Sleeper = std::function<void(std::chrono::milliseconds)>;

    explicit HttpBackend(BackendConfig config, Sleeper sleeper = {});

    std::string complete(const ChatRequest& request) override;
    CompletionResult complete_detailed(const ChatRequest& request);
    std::string model_name() const override { return config_.model_name; }

    /// The JSON body that would be POSTed for `request`.
    nlohmann::json build_body(const ChatRequest& request) const;

    /// Extracts choices[0].message.content; throws BackendError(malformed).
    static std::string parse_completion(const std::string& body);

    int peak_in_flight() const { return limiter_.peak(); }

private:
    BackendConfig config_;
    Sleeper sleeper_;
    ConcurrencyLimiter limiter_;
    std::mutex rng_mu_;
    SplitMix64 rng_;
    std::string scheme_host_;
    std::string path_prefix_;
};

// ---------------------------------------------------------------------------
// Record / replay cache
// ---------------------------------------------------------------------------

enum class CacheMode { record, replay, passthrough };

CacheMode parse_cache_mode(std::string_view name);

/// Wraps another backend with an on-disk cache: one JSON file per request
/// fingerprint, {"request_digest", "completion", "timestamp"}.
class RecordReplayBackend : public ModelBackend {
public:
    RecordReplayBackend(std::shared_ptr<ModelBackend> inner, std::filesystem::path cache_dir, CacheMode mode);

    std::string complete(const ChatRequest& request) override;
    std::string model_name() const override { return inner_->model_name(); }

    std::size_t upstream_calls() const { return upstream_calls_.load(); }
    std::filesystem::path entry_path(const std::string& fingerprint) const;

private:
    std::shared_ptr<ModelBackend> inner_;
    std::filesystem::path cache_dir_;
    CacheMode mode_;
    std::atomic<std::size_t> upstream_calls_{0};
};

std::shared_ptr<ModelBackend> with_cache(std::shared_ptr<ModelBackend> inner,
                                         const std::filesystem::path& cache_dir, CacheMode mode);

}  // namespace imgref
