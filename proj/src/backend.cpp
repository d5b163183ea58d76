// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#include "imgref/backend.hpp"

#include <ctime>

namespace imgref {

using nlohmann::json;

std::string ChatMessage::text() const {
    std::string out;
    for (const auto& p : parts) {
        if (p.kind != ContentPart::Kind::text) continue;
        if (!out.empty()) out.push_back('\n');
        out.append(p.value);
    }
    return out;
}

std::size_t ChatMessage::image_count() const {
    std::size_t n = 0;
    for (const auto& p : parts) n += p.kind == ContentPart::Kind::image ? 1 : 0;
    return n;
}

void ChatRequest::validate() const {
    if (messages.empty()) throw BackendError(BackendError::Kind::rejected, "chat request has no messages");
    for (std::size_t i = 0; i < messages.size(); ++i) {
        if (messages[i].parts.empty()) {
            throw BackendError(BackendError::Kind::rejected,
                               "chat message " + std::to_string(i) + " has no content parts");
        }
    }
    if (max_output < 1) throw BackendError(BackendError::Kind::rejected, "max_output must be >= 1");
}

std::string ChatRequest::all_text() const {
    std::string out;
    for (const auto& m : messages) {
        const auto t = m.text();
        if (t.empty()) continue;
        if (!out.empty()) out.push_back('\n');
        out.append(t);
    }
    return out;
}

std::size_t ChatRequest::image_count() const {
    std::size_t n = 0;
    for (const auto& m : messages) n += m.image_count();
    return n;
}

std::string to_string(Role role) {
    switch (role) {
        case Role::system: return "system";
        case Role::user: return "user";
        case Role::assistant: return "assistant";
    }
    return "user";
}

json request_to_json(const ChatRequest& request) {
    json messages = json::array();
    for (const auto& m : request.messages) {
        json parts = json::array();
        for (const auto& p : m.parts) {
            if (p.kind == ContentPart::Kind::text) {
                parts.push_back({{"type", "text"}, {"text", p.value}});
            } else {
                parts.push_back({{"type", "image"}, {"uri", p.value}});
            }
        }
        messages.push_back({{"role", to_string(m.role)}, {"parts", std::move(parts)}});
    }
    return {{"messages", std::move(messages)},
            {"temperature", request.temperature},
            {"max_output", request.max_output}};
}

std::string fingerprint(const ChatRequest& request, const std::string& model_name) {
    const json key = {{"model", model_name}, {"request", request_to_json(request)}};
    return sha256_hex(key.dump());
}

ScriptedBackend::ScriptedBackend(Handler handler, std::string name)
    : handler_(std::move(handler)), name_(std::move(name)) {}

std::shared_ptr<ScriptedBackend> ScriptedBackend::from_table(std::map<std::string, std::string> table,
                                                             std::string name) {
    auto model = name;
    return std::make_shared<ScriptedBackend>(
        [table = std::move(table), model](const ChatRequest& r) {
            const auto fp = fingerprint(r, model);
            auto it = table.find(fp);
            if (it == table.end()) {
                throw BackendError(BackendError::Kind::rejected, "no scripted completion for " + fp);
            }
            return it->second;
        },
        std::move(name));
}

std::shared_ptr<ScriptedBackend> ScriptedBackend::from_rules(const json& script, std::string name) {
    struct Rule {
        std::string match;
        std::string reply;
    };
    std::vector<Rule> rules;
    std::optional<std::string> fallback;
    try {
        if (script.contains("rules")) {
            for (const auto& r : script.at("rules")) {
                rules.push_back({r.at("match").get<std::string>(), r.at("reply").get<std::string>()});
            }
        }
        if (script.contains("default")) fallback = script.at("default").get<std::string>();
    } catch (const json::exception& e) {
        throw BackendError(BackendError::Kind::rejected, std::string("invalid script: ") + e.what());
    }
    return std::make_shared<ScriptedBackend>(
        [rules = std::move(rules), fallback](const ChatRequest& r) {
            const auto text = r.all_text();
            for (const auto& rule : rules) {
                if (text.find(rule.match) != std::string::npos) return rule.reply;
            }
            if (fallback) return *fallback;
            throw BackendError(BackendError::Kind::rejected, "no scripted rule matched the request");
        },
        std::move(name));
}

std::string ScriptedBackend::complete(const ChatRequest& request) {
    request.validate();
    {
        std::lock_guard lock(mu_);
        log_.push_back(request);
    }
    return handler_(request);
}

std::vector<ChatRequest> ScriptedBackend::requests() const {
    std::lock_guard lock(mu_);
    return log_;
}

std::size_t ScriptedBackend::call_count() const {
    std::lock_guard lock(mu_);
    return log_.size();
}

CacheMode parse_cache_mode(std::string_view name) {
    if (name == "record") return CacheMode::record;
    if (name == "replay") return CacheMode::replay;
    if (name == "passthrough") return CacheMode::passthrough;
    throw BackendError(BackendError::Kind::rejected,
                       "unknown cache mode '" + std::string(name) + "' (record, replay, passthrough)");
}

RecordReplayBackend::RecordReplayBackend(std::shared_ptr<ModelBackend> inner, std::filesystem::path cache_dir,
                                         CacheMode mode)
    : inner_(std::move(inner)), cache_dir_(std::move(cache_dir)), mode_(mode) {
    if (mode_ == CacheMode::record) std::filesystem::create_directories(cache_dir_);
}

std::filesystem::path RecordReplayBackend::entry_path(const std::string& fp) const {
    return cache_dir_ / (fp + ".json");
}

namespace {

std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace

std::string RecordReplayBackend::complete(const ChatRequest& request) {
    request.validate();
    if (mode_ == CacheMode::passthrough) {
        ++upstream_calls_;
        return inner_->complete(request);
    }
    const std::string fp = fingerprint(request, inner_->model_name());
    const auto path = entry_path(fp);
    if (mode_ == CacheMode::replay) {
        if (!std::filesystem::exists(path)) {
            throw BackendError(BackendError::Kind::replay_miss, "replay cache miss for fingerprint " + fp);
        }
        json entry;
        try {
            entry = json::parse(read_file(path));
        } catch (const json::exception& e) {
            throw BackendError(BackendError::Kind::cache_corrupt,
                               "cache entry " + path.string() + " is not valid JSON: " + e.what());
        }
        if (!entry.is_object() || entry.value("request_digest", "") != fp ||
            !entry.contains("completion") || !entry["completion"].is_string()) {
            throw BackendError(BackendError::Kind::cache_corrupt,
                               "cache entry " + path.string() + " does not match fingerprint " + fp);
        }
        return entry["completion"].get<std::string>();
    }
    ++upstream_calls_;
    std::string completion = inner_->complete(request);
    const json entry = {{"request_digest", fp}, {"completion", completion}, {"timestamp", utc_timestamp()}};
    write_file_atomic(path, entry.dump(2) + "\n");
    return completion;
}

std::shared_ptr<ModelBackend> with_cache(std::shared_ptr<ModelBackend> inner, const std::filesystem::path& cache_dir,
                                         CacheMode mode) {
    return std::make_shared<RecordReplayBackend>(std::move(inner), cache_dir, mode);
}

}  // namespace imgref
