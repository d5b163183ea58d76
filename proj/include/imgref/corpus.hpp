// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "imgref/markup.hpp"
#include "imgref/metrics.hpp"

namespace imgref {

struct ImageAsset {
    ImageId id = 0;
    std::string uri;
    std::optional<int> source_doc;
    std::optional<std::string> caption_standalone;
    std::optional<std::string> caption_contextual;
    friend bool operator==(const ImageAsset&, const ImageAsset&) = default;
};

struct Element {
    enum class Kind { text, image };
    Kind kind = Kind::text;
    std::string text;      // kind == text
    ImageId image_id = 0;  // kind == image

    static Element make_text(std::string t) { return {Kind::text, std::move(t), 0}; }
    static Element make_image(ImageId id) { return {Kind::image, {}, id}; }
    friend bool operator==(const Element&, const Element&) = default;
};

struct InterleavedDocument {
    std::vector<Element> elements;
    std::vector<ImageAsset> assets;
    friend bool operator==(const InterleavedDocument&, const InterleavedDocument&) = default;
};

enum class CurationStatus { pending, accepted, rejected };

std::string to_string(CurationStatus status);
std::optional<CurationStatus> parse_curation_status(std::string_view name);

struct LikertRecord {
    LikertScores scores;
    std::string reviewer;
    long long version = 0;
    friend bool operator==(const LikertRecord&, const LikertRecord&) = default;
};

struct Sample {
    std::string id;
    std::string query;
    std::vector<InterleavedDocument> documents;
    std::vector<std::string> reference_text;
    std::optional<ResponseDoc> response;
    std::optional<SlotSpec> slots;
    std::optional<SlotLabelSet> labels;
    std::optional<LikertRecord> human_scores;
    std::optional<CurationStatus> status;
    // Pipeline intermediates kept for curation display.
    std::optional<std::string> text_response;
    bool insertion_warning = false;

    // 1-based line in the file the sample was loaded from; 0 if not loaded.
    std::size_t source_line = 0;

    /// Total assets across documents (the n of the [1, n] id range).
    int image_count() const;
    const ImageAsset* find_asset(ImageId id) const;
    ImageAsset* find_asset(ImageId id);

    /// Equality over content; provenance (source_line) is ignored.
    bool same_content(const Sample& other) const;
};

struct DatasetStats {
    std::size_t sample_count = 0;
    std::size_t image_count = 0;
    double avg_prompt_len = 0.0;
    friend bool operator==(const DatasetStats&, const DatasetStats&) = default;
};

struct Violation {
    std::string path;
    std::string reason;
    friend bool operator==(const Violation&, const Violation&) = default;
};

class DatasetError : public Error {
public:
    DatasetError(std::size_t line, std::string field_path, const std::string& reason);
    std::size_t line() const { return line_; }
    const std::string& field_path() const { return field_path_; }

private:
    std::size_t line_;
    std::string field_path_;
};

enum class DatasetSchema {
    train,  // response required
    test,   // response, slots and labels optional
};

enum class LengthUnit { chars, whitespace_tokens };

LengthUnit parse_length_unit(std::string_view name);

namespace corpus {

/// Semantic checks on an in-memory sample; empty iff every invariant holds.
std::vector<Violation> validate_sample(const Sample& s);

/// Shape checks plus validate_sample on arbitrary JSON; never throws.
std::vector<Violation> validate_sample_json(const nlohmann::json& j, DatasetSchema schema);

nlohmann::json sample_to_json(const Sample& s);
/// Throws DatasetError (line 0) naming the first violation.
Sample sample_from_json(const nlohmann::json& j, DatasetSchema schema);

std::vector<Sample> load_dataset(const std::filesystem::path& path, DatasetSchema schema);
/// Parses JSONL text; `origin` labels error messages.
std::vector<Sample> parse_dataset(std::string_view jsonl, DatasetSchema schema,
                                  const std::string& origin = "<memory>");

/// One JSON object per line, "\n" terminated.
std::string to_jsonl(const std::vector<Sample>& samples);
void write_dataset(const std::filesystem::path& path, const std::vector<Sample>& samples);

/// Writes accepted samples only. Throws DatasetError if an accepted sample has
/// no response. Returns the number of lines written.
std::size_t export_training_jsonl(const std::vector<Sample>& samples, const std::filesystem::path& path);

/// The prompt an end-to-end model would see: query, then each document's
/// elements with images as markers.
std::string serialize_prompt(const Sample& s);

DatasetStats compute_stats(const std::vector<Sample>& samples, LengthUnit unit = LengthUnit::chars);

nlohmann::json stats_to_json(const DatasetStats& stats);
/// Reads {"sample_count", "image_count", "avg_prompt_len"} from a manifest.
DatasetStats stats_from_manifest(const nlohmann::json& manifest);

/// Renumbers assets 1..n by first appearance across the concatenated
/// documents (unreferenced assets follow in listing order) and rewrites
/// element references. Response and labels must not be present yet.
void assign_contextual_ids(Sample& s);

}  // namespace corpus
}  // namespace imgref
