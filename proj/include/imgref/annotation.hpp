// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "json.hpp"

#include "imgref/corpus.hpp"

namespace imgref {

class AnnotationError : public Error {
public:
    using Error::Error;
};

class NotFoundError : public AnnotationError {
public:
    using AnnotationError::AnnotationError;
};

/// Optimistic-concurrency failure: the submitted version is stale.
class ConflictError : public AnnotationError {
public:
    ConflictError(const std::string& message, long long current_version)
        : AnnotationError(message), current_version_(current_version) {}
    long long current_version() const { return current_version_; }

private:
    long long current_version_;
};

/// The request is well formed but violates an invariant (HTTP 422).
class ValidationError : public AnnotationError {
public:
    ValidationError(std::string path, const std::string& reason)
        : AnnotationError(path.empty() ? reason : path + ": " + reason), path_(std::move(path)) {}
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

struct CurationRecord {
    std::string sample_id;
    CurationStatus status = CurationStatus::pending;
    std::string reviewer;
    long long version = 0;
    std::string timestamp;
};

struct SlotLabelSubmission {
    std::string sample_id;
    SlotLabelSet labels;
    std::string reviewer;
    long long version = 0;
};

struct StoredSample {
    Sample sample;  // status, labels and human_scores mirror the latest records
    long long version = 0;
    CurationRecord curation;
    std::string labels_reviewer;
};

struct SampleSummary {
    std::string id;
    CurationStatus status = CurationStatus::pending;
    long long version = 0;
    int image_count = 0;
    std::size_t placement_count = 0;
    bool has_labels = false;
    bool has_likert = false;
    bool warning = false;
};

struct SamplePage {
    std::vector<SampleSummary> items;
    std::optional<std::string> next_cursor;
};

enum class ExportKind { training, labels, likert };

std::optional<ExportKind> parse_export_kind(std::string_view name);

/// Sample store backed by an append-only JSONL journal plus periodic
/// snapshots in `data_dir`. Reads may run concurrently; writes are
/// serialized and each one is fsynced before it is acknowledged.
class AnnotationStore {
public:
    struct Options {
        std::size_t snapshot_every = 100;  // mutations between snapshots; 0 disables
        bool fsync = true;
    };

    explicit AnnotationStore(std::filesystem::path data_dir);
    AnnotationStore(std::filesystem::path data_dir, Options options);
    ~AnnotationStore();

    AnnotationStore(const AnnotationStore&) = delete;
    AnnotationStore& operator=(const AnnotationStore&) = delete;

    /// Adds samples that are not yet present; returns how many were added.
    std::size_t import_samples(const std::vector<Sample>& samples);

    /// Stable pagination ordered by sample id. Throws ValidationError on a bad cursor.
    SamplePage list(std::optional<CurationStatus> status, const std::optional<std::string>& cursor,
                    std::size_t limit) const;

    std::optional<StoredSample> get(const std::string& id) const;

    /// Each mutation requires `expected_version` == current version and
    /// returns the new version.
    long long submit_labels(const std::string& id, const nlohmann::json& labels, const std::string& reviewer,
                            long long expected_version);
    long long submit_status(const std::string& id, CurationStatus status, const std::string& reviewer,
                            long long expected_version);
    long long submit_likert(const std::string& id, const LikertScores& scores, const std::string& reviewer,
                            long long expected_version);

    std::string export_jsonl(ExportKind kind) const;

    /// Writes a snapshot now (also done on destruction).
    void flush();

    std::uint64_t last_seq() const;
    std::size_t size() const;

    /// Full state as JSON, for equality checks across restarts.
    nlohmann::json state_json() const;

    const std::filesystem::path& data_dir() const { return dir_; }
    std::filesystem::path journal_path() const { return dir_ / "journal.jsonl"; }
    std::filesystem::path snapshot_path() const { return dir_ / "snapshot.json"; }

private:
    void open();
    void apply(const nlohmann::json& entry);
    void append(nlohmann::json entry);  // caller holds the write lock
    void write_snapshot_locked() const;
    StoredSample& require(const std::string& id);
    void check_version(const StoredSample& s, long long expected) const;

    std::filesystem::path dir_;
    Options options_;
    mutable std::shared_mutex mu_;
    std::map<std::string, StoredSample> samples_;
    std::uint64_t seq_ = 0;
    std::size_t since_snapshot_ = 0;
    int journal_fd_ = -1;
};

nlohmann::json summary_to_json(const SampleSummary& s);
nlohmann::json stored_sample_to_json(const StoredSample& s);

/// HTTP front end for an AnnotationStore.
class AnnotationServer {
public:
    struct Options {
        std::string host = "127.0.0.1";
        int port = 8080;  // 0 picks a free port
        std::filesystem::path ui_dir;  // served under "/" when it exists
        std::size_t default_page_size = 50;
    };

    AnnotationServer(AnnotationStore& store, Options options);
    ~AnnotationServer();

    /// Binds the listening socket; throws AnnotationError when the port is taken.
    int bind();
    /// Serves until stop() is called.
    void run();
    void stop();
    int port() const { return port_; }

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    AnnotationStore& store_;
    Options options_;
    int port_ = 0;
};

}  // namespace imgref
