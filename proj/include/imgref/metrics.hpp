// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "imgref/util.hpp"

namespace imgref {

using SlotId = int;
using ImageId = int;

inline constexpr int kMaxLabelScore = 3;

class MetricsError : public Error {
public:
    using Error::Error;
};

/// A label-set violation with the JSON path of the offending field.
class LabelError : public MetricsError {
public:
    LabelError(std::string path, const std::string& reason)
        : MetricsError(path + ": " + reason), path_(std::move(path)) {}
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

/// Per-slot relevance labels: slot -> image -> score in {0..3}. Images not
/// listed under a slot score 0. A slot may be declared with no labels.
class SlotLabelSet {
public:
    void declare_slot(SlotId slot) { slots_[slot]; }

    /// Records `image` under `score` at `slot`. Throws LabelError if the image
    /// is already labeled at that slot or the score is outside 0..3.
    void set(SlotId slot, ImageId image, int score);

    int score(SlotId slot, ImageId image) const;
    bool has_slot(SlotId slot) const { return slots_.count(slot) != 0; }
    const std::map<SlotId, std::map<ImageId, int>>& slots() const { return slots_; }

    /// Sum over slots of the number of 3-point images (the literal printed
    /// recall denominator; counts an image once per eligible slot).
    std::size_t literal_three_point_total() const;

    friend bool operator==(const SlotLabelSet&, const SlotLabelSet&) = default;

private:
    std::map<SlotId, std::map<ImageId, int>> slots_;
};

/// Injective slot -> image placement produced by a model or pipeline.
class Assignment {
public:
    /// Throws MetricsError if the slot is taken or the image is already placed.
    void place(SlotId slot, ImageId image);

    const std::map<SlotId, ImageId>& placements() const { return placements_; }
    std::size_t size() const { return placements_.size(); }
    bool empty() const { return placements_.empty(); }

    friend bool operator==(const Assignment&, const Assignment&) = default;

private:
    std::map<SlotId, ImageId> placements_;
};

struct PositionReport {
    std::optional<double> precision;
    std::optional<double> recall3;
    std::optional<double> f1;
    std::size_t inserted_count = 0;
    std::size_t nonzero_count = 0;
    std::size_t recall_numerator = 0;
    std::size_t recall_denominator = 0;
};

enum class AggregationMode { micro, macro };

struct AggregateReport {
    AggregationMode mode = AggregationMode::micro;
    PositionReport report;
    std::size_t sample_count = 0;
    // Reports whose component was undefined (macro excludes them from the mean).
    std::size_t skipped_precision = 0;
    std::size_t skipped_recall3 = 0;
    std::size_t skipped_f1 = 0;
};

struct PearsonResult {
    double r = 0.0;
    double p_two_sided = 1.0;
    std::size_t permutations = 0;
    std::uint64_t seed = 0;
};

struct LikertScores {
    int text = 0;
    int image = 0;
    int overall = 0;
    friend bool operator==(const LikertScores&, const LikertScores&) = default;
};

struct LikertAspectSummary {
    std::optional<double> mean;
    std::array<std::size_t, 5> histogram{};  // histogram[k] counts score k+1
    std::size_t count = 0;
    long long sum = 0;
};

struct LikertSummary {
    LikertAspectSummary text;
    LikertAspectSummary image;
    LikertAspectSummary overall;
};

namespace metrics {

/// Size of a maximum matching between images and slots where an edge means
/// "image is 3-point at slot" (Hopcroft-Karp).
std::size_t max_relevant_insertions(const SlotLabelSet& labels);

/// Harmonic mean; undefined if either input is undefined or both are zero.
std::optional<double> f1_score(std::optional<double> precision, std::optional<double> recall3);

/// Precision / Recall3 / F1 for one sample. Throws MetricsError if the
/// assignment uses a slot the label set does not declare.
PositionReport score_assignment(const Assignment& assignment, const SlotLabelSet& labels);

AggregateReport aggregate(std::span<const PositionReport> reports, AggregationMode mode);

AggregationMode parse_aggregation_mode(std::string_view name);
std::string to_string(AggregationMode mode);

/// Sample Pearson coefficient. Throws MetricsError on length mismatch,
/// fewer than 3 points, or a constant series.
double pearson_r(std::span<const double> xs, std::span<const double> ys);

/// Pearson r with a two-sided permutation p-value:
/// p = (1 + #{|r_perm| >= |r|}) / (permutations + 1). Permutation i shuffles
/// ys with a generator seeded from (seed, i), so any partition of the work
/// gives identical results.
PearsonResult pearson(std::span<const double> xs, std::span<const double> ys,
                      std::size_t permutations, std::uint64_t seed);

/// Throws MetricsError for any score outside 1..5.
LikertSummary likert_summary(std::span<const LikertScores> records);

// JSON forms. Labels use {"<slot>": {"<score>": [image, ...]}}.
nlohmann::json labels_to_json(const SlotLabelSet& labels);
/// Throws LabelError naming the offending path. When `image_count` is set,
/// every image id must lie in [1, image_count].
SlotLabelSet labels_from_json(const nlohmann::json& j,
                              std::optional<int> image_count = std::nullopt,
                              const std::string& path = "labels");

nlohmann::json report_to_json(const PositionReport& report);
nlohmann::json aggregate_to_json(const AggregateReport& report);
nlohmann::json likert_to_json(const LikertSummary& summary);

/// Percent with two decimals ("18.65"), or "-" when undefined.
std::string format_percent(std::optional<double> ratio);

}  // namespace metrics
}  // namespace imgref
