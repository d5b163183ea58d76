// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#include "imgref/annotation.hpp"

#include <ctime>
#include <mutex>

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

namespace imgref {

using nlohmann::json;

std::optional<ExportKind> parse_export_kind(std::string_view name) {
    if (name == "training") return ExportKind::training;
    if (name == "labels") return ExportKind::labels;
    if (name == "likert") return ExportKind::likert;
    return std::nullopt;
}

namespace {

std::string now_utc() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

json likert_json(const LikertScores& s) {
    return {{"text", s.text}, {"image", s.image}, {"overall", s.overall}};
}

void check_likert(const LikertScores& s) {
    const std::pair<const char*, int> fields[] = {{"text", s.text}, {"image", s.image}, {"overall", s.overall}};
    for (const auto& [name, v] : fields) {
        if (v < 1 || v > 5) {
            throw ValidationError(std::string("likert.") + name, "score " + std::to_string(v) + " outside 1..5");
        }
    }
}

bool transition_allowed(CurationStatus from, CurationStatus to) {
    if (from == CurationStatus::pending) return to != CurationStatus::pending;
    return to == CurationStatus::pending;  // re-open
}

}  // namespace

AnnotationStore::AnnotationStore(std::filesystem::path data_dir) : AnnotationStore(std::move(data_dir), Options{}) {}

AnnotationStore::AnnotationStore(std::filesystem::path data_dir, Options options)
    : dir_(std::move(data_dir)), options_(options) {
    std::filesystem::create_directories(dir_);
    open();
}

AnnotationStore::~AnnotationStore() {
    try {
        flush();
    } catch (...) {
    }
    if (journal_fd_ >= 0) ::close(journal_fd_);
}

void AnnotationStore::open() {
    std::uint64_t snapshot_seq = 0;
    if (std::filesystem::exists(snapshot_path())) {
        json snap;
        try {
            snap = json::parse(read_file(snapshot_path()));
            snapshot_seq = snap.at("seq").get<std::uint64_t>();
            for (const auto& entry : snap.at("samples")) {
                StoredSample s;
                s.sample = corpus::sample_from_json(entry.at("sample"), DatasetSchema::test);
                s.version = entry.at("version").get<long long>();
                s.curation.sample_id = s.sample.id;
                s.curation.status = parse_curation_status(entry.at("status").get<std::string>()).value();
                s.curation.reviewer = entry.at("reviewer").get<std::string>();
                s.curation.version = entry.at("curation_version").get<long long>();
                s.curation.timestamp = entry.at("timestamp").get<std::string>();
                s.labels_reviewer = entry.value("labels_reviewer", "");
                samples_.emplace(s.sample.id, std::move(s));
            }
        } catch (const std::exception& e) {
            throw AnnotationError("corrupt snapshot " + snapshot_path().string() + ": " + e.what());
        }
    }
    seq_ = snapshot_seq;

    const auto journal = journal_path();
    if (std::filesystem::exists(journal)) {
        const std::string content = read_file(journal);
        std::size_t start = 0;
        std::size_t good_end = 0;
        while (start < content.size()) {
            const auto nl = content.find('\n', start);
            if (nl == std::string::npos) break;  // torn tail: no terminator
            const std::string_view line(content.data() + start, nl - start);
            json entry;
            try {
                entry = json::parse(line);
            } catch (const json::parse_error&) {
                // A torn write never contains its terminator, so this is real corruption.
                throw AnnotationError("corrupt journal entry at byte " + std::to_string(start));
            }
            const auto seq = entry.at("seq").get<std::uint64_t>();
            if (seq > snapshot_seq) {
                apply(entry);
                seq_ = seq;
            }
            start = nl + 1;
            good_end = start;
        }
        if (good_end != content.size()) {
            // Drop the partially written final record.
            std::filesystem::resize_file(journal, good_end);
        }
    }
    journal_fd_ = ::open(journal.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    if (journal_fd_ < 0) throw IoError("cannot open journal " + journal.string());
}

void AnnotationStore::apply(const json& entry) {
    const std::string op = entry.at("op").get<std::string>();
    if (op == "import") {
        Sample s = corpus::sample_from_json(entry.at("sample"), DatasetSchema::test);
        StoredSample stored;
        stored.curation.sample_id = s.id;
        stored.curation.status = s.status.value_or(CurationStatus::pending);
        stored.curation.timestamp = entry.value("ts", "");
        s.status = stored.curation.status;
        stored.sample = std::move(s);
        samples_.insert_or_assign(stored.sample.id, std::move(stored));
        return;
    }
    StoredSample& s = require(entry.at("id").get<std::string>());
    s.version = entry.at("version").get<long long>();
    const std::string reviewer = entry.value("reviewer", "");
    if (op == "labels") {
        s.sample.labels = metrics::labels_from_json(entry.at("labels"), s.sample.image_count());
        s.labels_reviewer = reviewer;
    } else if (op == "status") {
        const auto status = parse_curation_status(entry.at("status").get<std::string>()).value();
        s.curation.status = status;
        s.curation.reviewer = reviewer;
        s.curation.version = s.version;
        s.curation.timestamp = entry.value("ts", "");
        s.sample.status = status;
    } else if (op == "likert") {
        const auto& l = entry.at("likert");
        LikertRecord rec;
        rec.scores = {l.at("text").get<int>(), l.at("image").get<int>(), l.at("overall").get<int>()};
        rec.reviewer = reviewer;
        rec.version = s.version;
        s.sample.human_scores = rec;
    } else {
        throw AnnotationError("unknown journal op '" + op + "'");
    }
}

void AnnotationStore::append(json entry) {
    entry["seq"] = seq_ + 1;
    entry["ts"] = now_utc();
    const std::string line = entry.dump() + "\n";
    std::size_t written = 0;
    while (written < line.size()) {
        const auto n = ::write(journal_fd_, line.data() + written, line.size() - written);
        if (n < 0) throw IoError("journal write failed");
        written += static_cast<std::size_t>(n);
    }
    if (options_.fsync) ::fdatasync(journal_fd_);
    apply(entry);
    seq_ = entry["seq"].get<std::uint64_t>();
    if (options_.snapshot_every > 0 && ++since_snapshot_ >= options_.snapshot_every) {
        write_snapshot_locked();
        since_snapshot_ = 0;
    }
}

StoredSample& AnnotationStore::require(const std::string& id) {
    auto it = samples_.find(id);
    if (it == samples_.end()) throw NotFoundError("unknown sample '" + id + "'");
    return it->second;
}

void AnnotationStore::check_version(const StoredSample& s, long long expected) const {
    if (expected != s.version) {
        throw ConflictError("version conflict on '" + s.sample.id + "': submitted " + std::to_string(expected) +
                                ", current " + std::to_string(s.version),
                            s.version);
    }
}

std::size_t AnnotationStore::import_samples(const std::vector<Sample>& samples) {
    std::unique_lock lock(mu_);
    std::size_t added = 0;
    for (const auto& s : samples) {
        if (samples_.count(s.id) != 0) continue;
        const auto violations = corpus::validate_sample(s);
        if (!violations.empty()) {
            throw ValidationError(violations.front().path, "sample '" + s.id + "': " + violations.front().reason);
        }
        append({{"op", "import"}, {"sample", corpus::sample_to_json(s)}});
        ++added;
    }
    return added;
}

SamplePage AnnotationStore::list(std::optional<CurationStatus> status, const std::optional<std::string>& cursor,
                                 std::size_t limit) const {
    std::optional<std::string> after;
    if (cursor && !cursor->empty()) {
        std::string decoded;
        if (!hex_decode(*cursor, decoded) || decoded.empty()) throw ValidationError("cursor", "invalid cursor");
        after = std::move(decoded);
    }
    limit = std::clamp<std::size_t>(limit, 1, 500);
    std::shared_lock lock(mu_);
    SamplePage page;
    auto it = after ? samples_.upper_bound(*after) : samples_.begin();
    for (; it != samples_.end(); ++it) {
        const StoredSample& s = it->second;
        if (status && s.curation.status != *status) continue;
        if (page.items.size() == limit) {
            page.next_cursor = hex_encode(page.items.back().id);
            break;
        }
        SampleSummary sum;
        sum.id = s.sample.id;
        sum.status = s.curation.status;
        sum.version = s.version;
        sum.image_count = s.sample.image_count();
        sum.placement_count = s.sample.response ? s.sample.response->image_ids().size() : 0;
        sum.has_labels = s.sample.labels.has_value();
        sum.has_likert = s.sample.human_scores.has_value();
        sum.warning = s.sample.insertion_warning;
        page.items.push_back(std::move(sum));
    }
    return page;
}

std::optional<StoredSample> AnnotationStore::get(const std::string& id) const {
    std::shared_lock lock(mu_);
    auto it = samples_.find(id);
    if (it == samples_.end()) return std::nullopt;
    return it->second;
}

long long AnnotationStore::submit_labels(const std::string& id, const json& labels, const std::string& reviewer,
                                         long long expected_version) {
    std::unique_lock lock(mu_);
    StoredSample& s = require(id);
    check_version(s, expected_version);
    SlotLabelSet parsed;
    try {
        parsed = metrics::labels_from_json(labels, s.sample.image_count());
    } catch (const LabelError& e) {
        throw ValidationError(e.path(), e.what());
    }
    const SlotSpec slots = s.sample.slots.value_or(SlotSpec::paragraph_boundaries(s.sample.reference_text.size()));
    for (const auto& [slot, row] : parsed.slots()) {
        const bool declared = std::any_of(slots.slots.begin(), slots.slots.end(),
                                          [&](const auto& p) { return p.first == slot; });
        if (!declared) throw ValidationError("labels." + std::to_string(slot), "slot is not declared for this sample");
    }
    append({{"op", "labels"},
            {"id", id},
            {"version", s.version + 1},
            {"reviewer", reviewer},
            {"labels", metrics::labels_to_json(parsed)}});
    return s.version;
}

long long AnnotationStore::submit_status(const std::string& id, CurationStatus status, const std::string& reviewer,
                                         long long expected_version) {
    std::unique_lock lock(mu_);
    StoredSample& s = require(id);
    check_version(s, expected_version);
    if (!transition_allowed(s.curation.status, status)) {
        throw ValidationError("status", "cannot move from " + to_string(s.curation.status) + " to " +
                                            to_string(status) + " (re-open to pending first)");
    }
    if (status == CurationStatus::accepted && !s.sample.response) {
        throw ValidationError("status", "cannot accept a sample without a response");
    }
    append({{"op", "status"}, {"id", id}, {"version", s.version + 1}, {"reviewer", reviewer}, {"status", to_string(status)}});
    return s.version;
}

long long AnnotationStore::submit_likert(const std::string& id, const LikertScores& scores, const std::string& reviewer,
                                         long long expected_version) {
    std::unique_lock lock(mu_);
    StoredSample& s = require(id);
    check_version(s, expected_version);
    check_likert(scores);
    append({{"op", "likert"}, {"id", id}, {"version", s.version + 1}, {"reviewer", reviewer}, {"likert", likert_json(scores)}});
    return s.version;
}

std::string AnnotationStore::export_jsonl(ExportKind kind) const {
    std::shared_lock lock(mu_);
    std::string out;
    for (const auto& [id, s] : samples_) {
        switch (kind) {
            case ExportKind::training:
                if (s.curation.status != CurationStatus::accepted || !s.sample.response) continue;
                out += corpus::sample_to_json(s.sample).dump();
                break;
            case ExportKind::labels: {
                if (!s.sample.labels) continue;
                json line = {{"id", id}, {"labels", metrics::labels_to_json(*s.sample.labels)},
                             {"reviewer", s.labels_reviewer}, {"version", s.version}};
                if (s.sample.slots) line["slots"] = markup::slots_to_json(*s.sample.slots);
                out += line.dump();
                break;
            }
            case ExportKind::likert: {
                if (!s.sample.human_scores) continue;
                const auto& h = *s.sample.human_scores;
                json line = likert_json(h.scores);
                line["sample_id"] = id;
                line["reviewer"] = h.reviewer;
                line["version"] = h.version;
                out += line.dump();
                break;
            }
        }
        out += '\n';
    }
    return out;
}

void AnnotationStore::write_snapshot_locked() const {
    json samples = json::array();
    for (const auto& [id, s] : samples_) {
        samples.push_back({{"sample", corpus::sample_to_json(s.sample)},
                           {"version", s.version},
                           {"status", to_string(s.curation.status)},
                           {"reviewer", s.curation.reviewer},
                           {"curation_version", s.curation.version},
                           {"timestamp", s.curation.timestamp},
                           {"labels_reviewer", s.labels_reviewer}});
    }
    write_file_atomic(snapshot_path(), json{{"seq", seq_}, {"samples", std::move(samples)}}.dump() + "\n");
}

void AnnotationStore::flush() {
    std::unique_lock lock(mu_);
    if (journal_fd_ >= 0) ::fsync(journal_fd_);
    write_snapshot_locked();
    since_snapshot_ = 0;
}

std::uint64_t AnnotationStore::last_seq() const {
    std::shared_lock lock(mu_);
    return seq_;
}

std::size_t AnnotationStore::size() const {
    std::shared_lock lock(mu_);
    return samples_.size();
}

json AnnotationStore::state_json() const {
    std::shared_lock lock(mu_);
    json out = json::object();
    for (const auto& [id, s] : samples_) out[id] = stored_sample_to_json(s);
    return out;
}

json summary_to_json(const SampleSummary& s) {
    return {{"id", s.id},
            {"status", to_string(s.status)},
            {"version", s.version},
            {"image_count", s.image_count},
            {"placement_count", s.placement_count},
            {"has_labels", s.has_labels},
            {"has_likert", s.has_likert},
            {"warning", s.warning}};
}

json stored_sample_to_json(const StoredSample& s) {
    json j = corpus::sample_to_json(s.sample);
    j["version"] = s.version;
    j["warning"] = s.sample.insertion_warning;
    j["rendered_response"] = s.sample.response ? json(markup::render(*s.sample.response)) : json(nullptr);
    j["curation"] = {{"status", to_string(s.curation.status)},
                     {"reviewer", s.curation.reviewer},
                     {"version", s.curation.version},
                     {"timestamp", s.curation.timestamp}};
    j["labels_reviewer"] = s.labels_reviewer;
    return j;
}

}  // namespace imgref
