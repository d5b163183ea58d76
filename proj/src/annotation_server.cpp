// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#include "imgref/annotation.hpp"

#include "httplib.h"

namespace imgref {

using nlohmann::json;

struct AnnotationServer::Impl {
    httplib::Server server;
};

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message, json extra = json::object()) {
    extra["error"] = message;
    send_json(res, status, extra);
}

std::string reviewer_of(const httplib::Request& req, const json& body) {
    if (body.is_object() && body.contains("reviewer") && body["reviewer"].is_string()) {
        return body["reviewer"].get<std::string>();
    }
    if (req.has_header("X-Reviewer")) return req.get_header_value("X-Reviewer");
    return "anonymous";
}

// Parses the body and version, then runs `mutate`, mapping errors to HTTP codes.
template <typename Fn>
void handle_mutation(const httplib::Request& req, httplib::Response& res, Fn&& mutate) {
    json body;
    try {
        body = json::parse(req.body);
    } catch (const json::parse_error& e) {
        send_error(res, 400, std::string("invalid JSON body: ") + e.what());
        return;
    }
    if (!body.is_object() || !body.contains("version") || !body["version"].is_number_integer()) {
        send_error(res, 422, "body must be an object with an integer 'version'");
        return;
    }
    try {
        const long long version = mutate(body, body["version"].get<long long>(), reviewer_of(req, body));
        send_json(res, 200, {{"version", version}});
    } catch (const NotFoundError& e) {
        send_error(res, 404, e.what());
    } catch (const ConflictError& e) {
        send_error(res, 409, e.what(), {{"current_version", e.current_version()}});
    } catch (const ValidationError& e) {
        send_error(res, 422, e.what(), {{"path", e.path()}});
    }
}

}  // namespace

AnnotationServer::AnnotationServer(AnnotationStore& store, Options options)
    : impl_(std::make_unique<Impl>()), store_(store), options_(std::move(options)) {
    auto& srv = impl_->server;
    // No SO_REUSEPORT: a second server on the same port must fail to bind.
    srv.set_socket_options([](socket_t sock) {
        int yes = 1;
        ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
    });

    srv.Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
        send_json(res, 200, {{"status", "ok"}});
    });

    srv.Get("/api/samples", [this](const httplib::Request& req, httplib::Response& res) {
        std::optional<CurationStatus> status;
        if (req.has_param("status") && !req.get_param_value("status").empty()) {
            status = parse_curation_status(req.get_param_value("status"));
            if (!status) {
                send_error(res, 400, "unknown status filter");
                return;
            }
        }
        std::optional<std::string> cursor;
        if (req.has_param("cursor")) cursor = req.get_param_value("cursor");
        std::size_t limit = options_.default_page_size;
        if (req.has_param("limit")) {
            try {
                limit = static_cast<std::size_t>(std::stoul(req.get_param_value("limit")));
            } catch (const std::exception&) {
                send_error(res, 400, "invalid limit");
                return;
            }
        }
        try {
            const SamplePage page = store_.list(status, cursor, limit);
            json items = json::array();
            for (const auto& s : page.items) items.push_back(summary_to_json(s));
            send_json(res, 200,
                      {{"items", std::move(items)},
                       {"next_cursor", page.next_cursor ? json(*page.next_cursor) : json(nullptr)}});
        } catch (const ValidationError& e) {
            send_error(res, 400, e.what());
        }
    });

    srv.Get(R"(/api/samples/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
        const auto sample = store_.get(req.matches[1]);
        if (!sample) {
            send_error(res, 404, "unknown sample '" + std::string(req.matches[1]) + "'");
            return;
        }
        send_json(res, 200, stored_sample_to_json(*sample));
    });

    srv.Post(R"(/api/samples/([^/]+)/labels)", [this](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        handle_mutation(req, res, [&](const json& body, long long version, const std::string& reviewer) {
            if (!body.contains("labels")) throw ValidationError("labels", "missing labels");
            return store_.submit_labels(id, body["labels"], reviewer, version);
        });
    });

    srv.Post(R"(/api/samples/([^/]+)/review)", [this](const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        handle_mutation(req, res, [&](const json& body, long long version, const std::string& reviewer) {
            const bool has_status = body.contains("status");
            const bool has_likert = body.contains("likert");
            if (has_status == has_likert) {
                throw ValidationError("", "review needs exactly one of 'status' or 'likert'");
            }
            if (has_status) {
                const auto status = body["status"].is_string()
                                        ? parse_curation_status(body["status"].get<std::string>())
                                        : std::nullopt;
                if (!status) throw ValidationError("status", "expected pending, accepted or rejected");
                return store_.submit_status(id, *status, reviewer, version);
            }
            const auto& l = body["likert"];
            LikertScores scores;
            try {
                scores = {l.at("text").get<int>(), l.at("image").get<int>(), l.at("overall").get<int>()};
            } catch (const json::exception&) {
                throw ValidationError("likert", "expected integer text, image and overall scores");
            }
            return store_.submit_likert(id, scores, reviewer, version);
        });
    });

    srv.Get("/api/export", [this](const httplib::Request& req, httplib::Response& res) {
        const auto kind = parse_export_kind(req.get_param_value("kind"));
        if (!kind) {
            send_error(res, 400, "kind must be training, labels or likert");
            return;
        }
        res.status = 200;
        res.set_content(store_.export_jsonl(*kind), "application/x-ndjson");
    });

    if (!options_.ui_dir.empty() && std::filesystem::is_directory(options_.ui_dir)) {
        srv.set_mount_point("/", options_.ui_dir.string());
    }
}

AnnotationServer::~AnnotationServer() { stop(); }

int AnnotationServer::bind() {
    auto& srv = impl_->server;
    if (options_.port == 0) {
        port_ = srv.bind_to_any_port(options_.host);
    } else {
        port_ = srv.bind_to_port(options_.host, options_.port) ? options_.port : -1;
    }
    if (port_ < 0) {
        throw AnnotationError("cannot bind " + options_.host + ":" + std::to_string(options_.port) +
                              " (address in use?)");
    }
    return port_;
}

void AnnotationServer::run() { impl_->server.listen_after_bind(); }

void AnnotationServer::stop() {
    if (impl_) impl_->server.stop();
}

}  // namespace imgref
