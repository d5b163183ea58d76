// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#include "imgref/backend.hpp"

#include <cmath>
#include <cstdlib>
#include <thread>

#include "httplib.h"

namespace imgref {

using nlohmann::json;

void BackendConfig::validate() const {
    auto bad = [](const std::string& m) { throw BackendError(BackendError::Kind::rejected, "backend config: " + m); };
    if (base_url.rfind("http://", 0) != 0 && base_url.rfind("https://", 0) != 0) {
        bad("base_url must start with http:// or https://");
    }
    if (model_name.empty()) bad("model_name is required");
    if (timeout.count() <= 0) bad("timeout must be > 0");
    if (max_retries < 0) bad("max_retries must be >= 0");
    if (backoff_base.count() < 0) bad("backoff_base must be >= 0");
    if (max_concurrent < 1) bad("max_concurrent must be >= 1");
}

std::chrono::milliseconds retry_delay(std::chrono::milliseconds base, int attempt, SplitMix64& rng) {
    const double nominal = static_cast<double>(base.count()) * std::ldexp(1.0, attempt);
    const double jitter = 0.5 + rng.uniform();  // [0.5, 1.5)
    return std::chrono::milliseconds(static_cast<long long>(nominal * jitter));
}

void ConcurrencyLimiter::acquire() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return in_flight_ < limit_; });
    ++in_flight_;
    peak_ = std::max(peak_, in_flight_);
}

void ConcurrencyLimiter::release() {
    {
        std::lock_guard lock(mu_);
        --in_flight_;
    }
    cv_.notify_one();
}

int ConcurrencyLimiter::in_flight() const {
    std::lock_guard lock(mu_);
    return in_flight_;
}

int ConcurrencyLimiter::peak() const {
    std::lock_guard lock(mu_);
    return peak_;
}

namespace {

std::string mime_for(const std::string& path) {
    auto ext = std::filesystem::path(path).extension().string();
    for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (ext == ".png") return "image/png";
    if (ext == ".gif") return "image/gif";
    if (ext == ".webp") return "image/webp";
    return "image/jpeg";
}

bool is_remote(const std::string& uri) {
    return uri.rfind("http://", 0) == 0 || uri.rfind("https://", 0) == 0 || uri.rfind("data:", 0) == 0;
}

}  // namespace

HttpBackend::HttpBackend(BackendConfig config, Sleeper sleeper)
    : config_(std::move(config)),
      sleeper_(std::move(sleeper)),
      limiter_(std::max(config_.max_concurrent, 1)),
      rng_(derive_seed(config_.seed, "http-jitter")) {
    config_.validate();
    if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
    const auto scheme_end = config_.base_url.find("://") + 3;
    const auto path_start = config_.base_url.find('/', scheme_end);
    scheme_host_ = config_.base_url.substr(0, path_start);
    path_prefix_ = path_start == std::string::npos ? "" : config_.base_url.substr(path_start);
    while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
}

json HttpBackend::build_body(const ChatRequest& request) const {
    json messages = json::array();
    for (const auto& m : request.messages) {
        json msg = {{"role", to_string(m.role)}};
        if (m.image_count() == 0 && m.parts.size() == 1) {
            msg["content"] = m.parts.front().value;
        } else {
            json content = json::array();
            for (const auto& p : m.parts) {
                if (p.kind == ContentPart::Kind::text) {
                    content.push_back({{"type", "text"}, {"text", p.value}});
                    continue;
                }
                std::string url = p.value;
                if (config_.inline_images && !is_remote(url)) {
                    url = "data:" + mime_for(url) + ";base64," + base64_encode(read_file(url));
                }
                content.push_back({{"type", "image_url"}, {"image_url", {{"url", url}}}});
            }
            msg["content"] = std::move(content);
        }
        messages.push_back(std::move(msg));
    }
    return {{"model", config_.model_name},
            {"messages", std::move(messages)},
            {"temperature", request.temperature},
            {"max_tokens", request.max_output}};
}

std::string HttpBackend::parse_completion(const std::string& body) {
    try {
        const json j = json::parse(body);
        const auto& content = j.at("choices").at(0).at("message").at("content");
        if (content.is_string()) return content.get<std::string>();
        if (content.is_array()) {
            std::string out;
            for (const auto& part : content) {
                if (part.value("type", "") == "text") out += part.at("text").get<std::string>();
            }
            return out;
        }
    } catch (const json::exception& e) {
        throw BackendError(BackendError::Kind::malformed, std::string("malformed upstream response: ") + e.what());
    }
    throw BackendError(BackendError::Kind::malformed, "malformed upstream response: content is not text");
}

std::string HttpBackend::complete(const ChatRequest& request) {
    return complete_detailed(request).text;
}

CompletionResult HttpBackend::complete_detailed(const ChatRequest& request) {
    request.validate();
    httplib::Headers headers;
    if (!config_.api_key_env.empty()) {
        const char* key = std::getenv(config_.api_key_env.c_str());
        if (key == nullptr || *key == '\0') {
            throw BackendError(BackendError::Kind::auth,
                               "credential environment variable " + config_.api_key_env + " is not set");
        }
        headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    const std::string body = build_body(request).dump();
    const std::string path = path_prefix_ + "/chat/completions";

    std::string last_error;
    for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
        {
            ConcurrencyLimiter::Permit permit(limiter_);
            httplib::Client client(scheme_host_);
            const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
            const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
            client.set_connection_timeout(secs.count(), usecs.count());
            client.set_read_timeout(secs.count(), usecs.count());
            client.set_write_timeout(secs.count(), usecs.count());
            const auto res = client.Post(path, headers, body, "application/json");
            if (!res) {
                last_error = "transport error: " + httplib::to_string(res.error());
            } else if (res->status >= 200 && res->status < 300) {
                return {parse_completion(res->body), attempt + 1};
            } else if (res->status == 401 || res->status == 403) {
                throw BackendError(BackendError::Kind::auth,
                                   "upstream rejected credentials (HTTP " + std::to_string(res->status) + ")");
            } else if (res->status == 408 || res->status == 429 || res->status >= 500) {
                last_error = "HTTP " + std::to_string(res->status);
            } else {
                throw BackendError(BackendError::Kind::rejected, "upstream returned HTTP " +
                                                                     std::to_string(res->status) + ": " +
                                                                     res->body.substr(0, 200));
            }
        }
        if (attempt == config_.max_retries) break;
        std::chrono::milliseconds delay;
        {
            std::lock_guard lock(rng_mu_);
            delay = retry_delay(config_.backoff_base, attempt, rng_);
        }
        sleeper_(delay);
    }
    throw BackendError(BackendError::Kind::exhausted, "gave up after " + std::to_string(config_.max_retries + 1) +
                                                          " attempts: " + last_error);
}

}  // namespace imgref
