// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#include "imgref/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <queue>
#include <set>

namespace imgref {

void SlotLabelSet::set(SlotId slot, ImageId image, int score) {
    if (score < 0 || score > kMaxLabelScore) {
        throw LabelError("labels." + std::to_string(slot),
                         "score " + std::to_string(score) + " outside 0..3");
    }
    auto& row = slots_[slot];
    if (!row.emplace(image, score).second) {
        throw LabelError("labels." + std::to_string(slot),
                         "image " + std::to_string(image) + " listed more than once at this slot");
    }
}

int SlotLabelSet::score(SlotId slot, ImageId image) const {
    auto s = slots_.find(slot);
    if (s == slots_.end()) return 0;
    auto i = s->second.find(image);
    return i == s->second.end() ? 0 : i->second;
}

std::size_t SlotLabelSet::literal_three_point_total() const {
    std::size_t total = 0;
    for (const auto& [slot, row] : slots_) {
        for (const auto& [image, score] : row) total += score == kMaxLabelScore ? 1 : 0;
    }
    return total;
}

void Assignment::place(SlotId slot, ImageId image) {
    if (placements_.count(slot) != 0) {
        throw MetricsError("slot " + std::to_string(slot) + " already holds an image");
    }
    for (const auto& [s, placed] : placements_) {
        if (placed == image) {
            throw MetricsError("image " + std::to_string(image) + " placed twice");
        }
    }
    placements_.emplace(slot, image);
}

namespace metrics {

namespace {

// Hopcroft-Karp over a left side of `left_count` vertices; adjacency lists hold
// right-vertex indices in [0, right_count).
class HopcroftKarp {
public:
    HopcroftKarp(std::vector<std::vector<std::size_t>> adjacency, std::size_t right_count)
        : adj_(std::move(adjacency)),
          match_left_(adj_.size(), kFree),
          match_right_(right_count, kFree),
          dist_(adj_.size(), 0) {}

    std::size_t run() {
        std::size_t matched = 0;
        while (bfs()) {
            for (std::size_t u = 0; u < adj_.size(); ++u) {
                if (match_left_[u] == kFree && dfs(u)) ++matched;
            }
        }
        return matched;
    }

private:
    static constexpr std::size_t kFree = std::numeric_limits<std::size_t>::max();
    static constexpr std::size_t kInf = std::numeric_limits<std::size_t>::max();

    bool bfs() {
        std::queue<std::size_t> queue;
        bool found_free = false;
        for (std::size_t u = 0; u < adj_.size(); ++u) {
            if (match_left_[u] == kFree) {
                dist_[u] = 0;
                queue.push(u);
            } else {
                dist_[u] = kInf;
            }
        }
        while (!queue.empty()) {
            const std::size_t u = queue.front();
            queue.pop();
            for (std::size_t v : adj_[u]) {
                const std::size_t w = match_right_[v];
                if (w == kFree) {
                    found_free = true;
                } else if (dist_[w] == kInf) {
                    dist_[w] = dist_[u] + 1;
                    queue.push(w);
                }
            }
        }
        return found_free;
    }

    bool dfs(std::size_t u) {
        for (std::size_t v : adj_[u]) {
            const std::size_t w = match_right_[v];
            if (w == kFree || (dist_[w] == dist_[u] + 1 && dfs(w))) {
                match_left_[u] = v;
                match_right_[v] = u;
                return true;
            }
        }
        dist_[u] = kInf;
        return false;
    }

    std::vector<std::vector<std::size_t>> adj_;
    std::vector<std::size_t> match_left_;
    std::vector<std::size_t> match_right_;
    std::vector<std::size_t> dist_;
};

std::optional<double> ratio(std::size_t num, std::size_t den) {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

std::size_t max_relevant_insertions(const SlotLabelSet& labels) {
    std::map<ImageId, std::size_t> image_index;
    std::vector<std::vector<std::size_t>> adjacency;
    std::size_t slot_index = 0;
    for (const auto& [slot, row] : labels.slots()) {
        for (const auto& [image, score] : row) {
            if (score != kMaxLabelScore) continue;
            auto [it, inserted] = image_index.emplace(image, adjacency.size());
            if (inserted) adjacency.emplace_back();
            adjacency[it->second].push_back(slot_index);
        }
        ++slot_index;
    }
    return HopcroftKarp(std::move(adjacency), slot_index).run();
}

std::optional<double> f1_score(std::optional<double> precision, std::optional<double> recall3) {
    if (!precision || !recall3) return std::nullopt;
    const double sum = *precision + *recall3;
    if (sum <= 0.0) return std::nullopt;
    return 2.0 * *precision * *recall3 / sum;
}

PositionReport score_assignment(const Assignment& assignment, const SlotLabelSet& labels) {
    PositionReport report;
    for (const auto& [slot, image] : assignment.placements()) {
        if (!labels.has_slot(slot)) {
            throw MetricsError("assignment references unknown slot " + std::to_string(slot));
        }
        const int s = labels.score(slot, image);
        ++report.inserted_count;
        if (s > 0) ++report.nonzero_count;
        if (s == kMaxLabelScore) ++report.recall_numerator;
    }
    report.recall_denominator = max_relevant_insertions(labels);
    report.precision = ratio(report.nonzero_count, report.inserted_count);
    report.recall3 = ratio(report.recall_numerator, report.recall_denominator);
    report.f1 = f1_score(report.precision, report.recall3);
    return report;
}

AggregateReport aggregate(std::span<const PositionReport> reports, AggregationMode mode) {
    AggregateReport out;
    out.mode = mode;
    out.sample_count = reports.size();
    PositionReport& total = out.report;
    for (const auto& r : reports) {
        total.inserted_count += r.inserted_count;
        total.nonzero_count += r.nonzero_count;
        total.recall_numerator += r.recall_numerator;
        total.recall_denominator += r.recall_denominator;
        out.skipped_precision += r.precision ? 0 : 1;
        out.skipped_recall3 += r.recall3 ? 0 : 1;
        out.skipped_f1 += r.f1 ? 0 : 1;
    }
    if (mode == AggregationMode::micro) {
        total.precision = ratio(total.nonzero_count, total.inserted_count);
        total.recall3 = ratio(total.recall_numerator, total.recall_denominator);
        total.f1 = f1_score(total.precision, total.recall3);
        return out;
    }
    auto mean_of = [&](std::optional<double> PositionReport::*field) -> std::optional<double> {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& r : reports) {
            if (const auto& v = r.*field) {
                sum += *v;
                ++n;
            }
        }
        if (n == 0) return std::nullopt;
        return sum / static_cast<double>(n);
    };
    total.precision = mean_of(&PositionReport::precision);
    total.recall3 = mean_of(&PositionReport::recall3);
    total.f1 = mean_of(&PositionReport::f1);
    return out;
}

AggregationMode parse_aggregation_mode(std::string_view name) {
    if (name == "micro") return AggregationMode::micro;
    if (name == "macro") return AggregationMode::macro;
    throw MetricsError("unknown aggregation mode '" + std::string(name) + "'");
}

std::string to_string(AggregationMode mode) {
    return mode == AggregationMode::micro ? "micro" : "macro";
}

namespace {

struct Centered {
    std::vector<double> values;
    double sum_sq = 0.0;
};

Centered center(std::span<const double> xs) {
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    Centered c;
    c.values.reserve(xs.size());
    for (double x : xs) {
        c.values.push_back(x - mean);
        c.sum_sq += (x - mean) * (x - mean);
    }
    return c;
}

void check_series(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size()) {
        throw MetricsError("pearson: length mismatch (" + std::to_string(xs.size()) + " vs " +
                           std::to_string(ys.size()) + ")");
    }
    if (xs.size() < 3) throw MetricsError("pearson: need at least 3 points");
}

double correlation(const Centered& x, const Centered& y) {
    double sxy = 0.0;
    for (std::size_t i = 0; i < x.values.size(); ++i) sxy += x.values[i] * y.values[i];
    const double r = sxy / std::sqrt(x.sum_sq * y.sum_sq);
    return std::clamp(r, -1.0, 1.0);
}

}  // namespace

double pearson_r(std::span<const double> xs, std::span<const double> ys) {
    check_series(xs, ys);
    const Centered x = center(xs);
    const Centered y = center(ys);
    if (x.sum_sq == 0.0 || y.sum_sq == 0.0) {
        throw MetricsError("pearson: constant series, r undefined");
    }
    return correlation(x, y);
}

PearsonResult pearson(std::span<const double> xs, std::span<const double> ys,
                      std::size_t permutations, std::uint64_t seed) {
    PearsonResult result;
    result.r = pearson_r(xs, ys);
    result.permutations = permutations;
    result.seed = seed;

    const Centered x = center(xs);
    const Centered y = center(ys);
    // Ties (e.g. discrete Likert data) must count as "at least as extreme".
    const double threshold = std::abs(result.r) - 1e-12;

    const std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
    const std::size_t chunks = std::min<std::size_t>(workers, std::max<std::size_t>(permutations, 1));
    std::vector<std::size_t> extreme(chunks, 0);
    parallel_for(chunks, workers, [&](std::size_t chunk) {
        const std::size_t begin = permutations * chunk / chunks;
        const std::size_t end = permutations * (chunk + 1) / chunks;
        Centered shuffled = y;
        for (std::size_t i = begin; i < end; ++i) {
            shuffled.values = y.values;
            SplitMix64 rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
            for (std::size_t k = shuffled.values.size() - 1; k > 0; --k) {
                std::swap(shuffled.values[k], shuffled.values[rng.bounded(k + 1)]);
            }
            if (std::abs(correlation(x, shuffled)) >= threshold) ++extreme[chunk];
        }
    });
    std::size_t count = 0;
    for (auto c : extreme) count += c;
    result.p_two_sided =
        static_cast<double>(1 + count) / static_cast<double>(permutations + 1);
    return result;
}

LikertSummary likert_summary(std::span<const LikertScores> records) {
    LikertSummary summary;
    auto add = [](LikertAspectSummary& aspect, int score, const char* name, std::size_t index) {
        if (score < 1 || score > 5) {
            throw MetricsError("likert record " + std::to_string(index) + ": " + name + " score " +
                               std::to_string(score) + " outside 1..5");
        }
        ++aspect.histogram[static_cast<std::size_t>(score - 1)];
        ++aspect.count;
        aspect.sum += score;
    };
    for (std::size_t i = 0; i < records.size(); ++i) {
        add(summary.text, records[i].text, "text", i);
        add(summary.image, records[i].image, "image", i);
        add(summary.overall, records[i].overall, "overall", i);
    }
    for (auto* aspect : {&summary.text, &summary.image, &summary.overall}) {
        if (aspect->count > 0) {
            aspect->mean = static_cast<double>(aspect->sum) / static_cast<double>(aspect->count);
        }
    }
    return summary;
}

nlohmann::json labels_to_json(const SlotLabelSet& labels) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [slot, row] : labels.slots()) {
        nlohmann::json by_score = nlohmann::json::object();
        for (const auto& [image, score] : row) by_score[std::to_string(score)].push_back(image);
        out[std::to_string(slot)] = std::move(by_score);
    }
    return out;
}

namespace {

std::optional<int> parse_int_key(const std::string& key) {
    if (key.empty() || key.size() > 9) return std::nullopt;
    if (key.size() > 1 && key[0] == '0') return std::nullopt;
    int v = 0;
    for (char c : key) {
        if (c < '0' || c > '9') return std::nullopt;
        v = v * 10 + (c - '0');
    }
    return v;
}

}  // namespace

SlotLabelSet labels_from_json(const nlohmann::json& j, std::optional<int> image_count,
                              const std::string& path) {
    if (!j.is_object()) throw LabelError(path, "expected an object keyed by slot id");
    SlotLabelSet labels;
    for (const auto& [slot_key, by_score] : j.items()) {
        const std::string slot_path = path + "." + slot_key;
        const auto slot = parse_int_key(slot_key);
        if (!slot) throw LabelError(slot_path, "slot id must be a non-negative integer");
        if (!by_score.is_object()) throw LabelError(slot_path, "expected an object keyed by score");
        labels.declare_slot(*slot);
        for (const auto& [score_key, images] : by_score.items()) {
            const std::string score_path = slot_path + "." + score_key;
            const auto score = parse_int_key(score_key);
            if (!score || *score > kMaxLabelScore) {
                throw LabelError(score_path, "score must be one of 0, 1, 2, 3");
            }
            if (!images.is_array()) throw LabelError(score_path, "expected an array of image ids");
            for (std::size_t k = 0; k < images.size(); ++k) {
                const std::string image_path = score_path + "[" + std::to_string(k) + "]";
                const auto& v = images[k];
                if (!v.is_number_integer()) throw LabelError(image_path, "image_id must be an integer");
                const auto id = v.get<long long>();
                if (id < 1) throw LabelError(image_path, "image_id must be >= 1");
                if (image_count && id > *image_count) {
                    throw LabelError(image_path, "image_id " + std::to_string(id) +
                                                     " out of range [1, " +
                                                     std::to_string(*image_count) + "]");
                }
                if (id > std::numeric_limits<int>::max()) throw LabelError(image_path, "image_id too large");
                const int previous = labels.score(*slot, static_cast<int>(id));
                const bool listed = labels.slots().at(*slot).count(static_cast<int>(id)) != 0;
                if (listed) {
                    throw LabelError(image_path, "image " + std::to_string(id) +
                                                     " already listed at this slot under score " +
                                                     std::to_string(previous));
                }
                labels.set(*slot, static_cast<int>(id), *score);
            }
        }
    }
    return labels;
}

namespace {

nlohmann::json optional_json(std::optional<double> v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

nlohmann::json report_to_json(const PositionReport& report) {
    return {
        {"precision", optional_json(report.precision)},
        {"recall3", optional_json(report.recall3)},
        {"f1", optional_json(report.f1)},
        {"inserted_count", report.inserted_count},
        {"nonzero_count", report.nonzero_count},
        {"recall_numerator", report.recall_numerator},
        {"recall_denominator", report.recall_denominator},
    };
}

nlohmann::json aggregate_to_json(const AggregateReport& report) {
    auto j = report_to_json(report.report);
    j["mode"] = to_string(report.mode);
    j["sample_count"] = report.sample_count;
    j["skipped"] = {{"precision", report.skipped_precision},
                    {"recall3", report.skipped_recall3},
                    {"f1", report.skipped_f1}};
    j["percent"] = {{"precision", format_percent(report.report.precision)},
                    {"recall3", format_percent(report.report.recall3)},
                    {"f1", format_percent(report.report.f1)}};
    return j;
}

nlohmann::json likert_to_json(const LikertSummary& summary) {
    auto aspect = [](const LikertAspectSummary& a) {
        return nlohmann::json{{"mean", optional_json(a.mean)},
                              {"count", a.count},
                              {"histogram", a.histogram}};
    };
    return {{"text", aspect(summary.text)},
            {"image", aspect(summary.image)},
            {"overall", aspect(summary.overall)}};
}

std::string format_percent(std::optional<double> ratio) {
    if (!ratio) return "-";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", *ratio * 100.0);
    return buf;
}

}  // namespace metrics
}  // namespace imgref
