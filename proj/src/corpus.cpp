// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#include "imgref/corpus.hpp"

#include <map>
#include <set>
#include <sstream>

namespace imgref {

using nlohmann::json;

std::string to_string(CurationStatus status) {
    switch (status) {
        case CurationStatus::pending: return "pending";
        case CurationStatus::accepted: return "accepted";
        case CurationStatus::rejected: return "rejected";
    }
    return "pending";
}

std::optional<CurationStatus> parse_curation_status(std::string_view name) {
    if (name == "pending") return CurationStatus::pending;
    if (name == "accepted") return CurationStatus::accepted;
    if (name == "rejected") return CurationStatus::rejected;
    return std::nullopt;
}

LengthUnit parse_length_unit(std::string_view name) {
    if (name == "chars") return LengthUnit::chars;
    if (name == "whitespace_tokens" || name == "tokens") return LengthUnit::whitespace_tokens;
    throw Error("unknown length unit '" + std::string(name) + "' (expected chars or whitespace_tokens)");
}

DatasetError::DatasetError(std::size_t line, std::string field_path, const std::string& reason)
    : Error((line > 0 ? "line " + std::to_string(line) + ": " : std::string()) +
            (field_path.empty() ? reason : field_path + ": " + reason)),
      line_(line),
      field_path_(std::move(field_path)) {}

int Sample::image_count() const {
    std::size_t n = 0;
    for (const auto& d : documents) n += d.assets.size();
    return static_cast<int>(n);
}

const ImageAsset* Sample::find_asset(ImageId id) const {
    for (const auto& d : documents) {
        for (const auto& a : d.assets) {
            if (a.id == id) return &a;
        }
    }
    return nullptr;
}

ImageAsset* Sample::find_asset(ImageId id) {
    return const_cast<ImageAsset*>(std::as_const(*this).find_asset(id));
}

bool Sample::same_content(const Sample& o) const {
    return id == o.id && query == o.query && documents == o.documents &&
           reference_text == o.reference_text && response == o.response && slots == o.slots &&
           labels == o.labels && human_scores == o.human_scores && status == o.status &&
           text_response == o.text_response && insertion_warning == o.insertion_warning;
}

namespace corpus {

namespace {

std::string idx(const std::string& path, std::size_t i) {
    return path + "[" + std::to_string(i) + "]";
}

// Accumulates violations while decoding; decoding continues past errors so
// validation reports as much as it can.
class Decoder {
public:
    explicit Decoder(std::vector<Violation>& out) : out_(out) {}

    void fail(std::string path, std::string reason) { out_.push_back({std::move(path), std::move(reason)}); }

    const json* field(const json& obj, const char* key, const std::string& path, bool required) {
        auto it = obj.find(key);
        if (it == obj.end() || (it->is_null() && !required)) {
            if (required) fail(path + "." + key, "missing required field");
            return nullptr;
        }
        return &*it;
    }

    std::optional<std::string> string(const json& obj, const char* key, const std::string& path, bool required) {
        const json* v = field(obj, key, path, required);
        if (!v) return std::nullopt;
        if (!v->is_string()) {
            fail(path + "." + key, "expected a string");
            return std::nullopt;
        }
        return v->get<std::string>();
    }

    std::optional<long long> integer(const json& obj, const char* key, const std::string& path, bool required) {
        const json* v = field(obj, key, path, required);
        if (!v) return std::nullopt;
        if (!v->is_number_integer()) {
            fail(path + "." + key, "expected an integer");
            return std::nullopt;
        }
        return v->get<long long>();
    }

    std::optional<int> image_id(const json& obj, const char* key, const std::string& path) {
        const auto v = integer(obj, key, path, true);
        if (!v) return std::nullopt;
        if (*v < 1 || *v > std::numeric_limits<int>::max()) {
            fail(path + "." + key, "image_id must be >= 1 (contextual ids are 1-based)");
            return std::nullopt;
        }
        return static_cast<int>(*v);
    }

    const json* array(const json& obj, const char* key, const std::string& path, bool required) {
        const json* v = field(obj, key, path, required);
        if (!v) return nullptr;
        if (!v->is_array()) {
            fail(path + "." + key, "expected an array");
            return nullptr;
        }
        return v;
    }

private:
    std::vector<Violation>& out_;
};

std::optional<ImageAsset> decode_asset(Decoder& d, const json& j, const std::string& path) {
    if (!j.is_object()) {
        d.fail(path, "expected an object");
        return std::nullopt;
    }
    ImageAsset a;
    const auto id = d.image_id(j, "id", path);
    const auto uri = d.string(j, "uri", path, true);
    if (!id || !uri) return std::nullopt;
    a.id = *id;
    a.uri = *uri;
    if (const auto sd = d.integer(j, "source_doc", path, false)) a.source_doc = static_cast<int>(*sd);
    a.caption_standalone = d.string(j, "caption_standalone", path, false);
    a.caption_contextual = d.string(j, "caption_contextual", path, false);
    return a;
}

std::optional<Element> decode_element(Decoder& d, const json& j, const std::string& path) {
    if (!j.is_object()) {
        d.fail(path, "expected an object");
        return std::nullopt;
    }
    const auto kind = d.string(j, "kind", path, true);
    if (!kind) return std::nullopt;
    if (*kind == "text") {
        const auto text = d.string(j, "text", path, true);
        if (j.contains("image_id")) d.fail(path + ".image_id", "text element must not carry an image_id");
        if (!text) return std::nullopt;
        return Element::make_text(*text);
    }
    if (*kind == "image") {
        const auto id = d.image_id(j, "image_id", path);
        if (j.contains("text")) d.fail(path + ".text", "image element must not carry text");
        if (!id) return std::nullopt;
        return Element::make_image(*id);
    }
    d.fail(path + ".kind", "expected 'text' or 'image'");
    return std::nullopt;
}

std::optional<Sample> decode_sample(const json& j, DatasetSchema schema, std::vector<Violation>& out) {
    Decoder d(out);
    const std::string root = "$";
    if (!j.is_object()) {
        d.fail(root, "expected a JSON object");
        return std::nullopt;
    }
    const std::size_t before = out.size();
    Sample s;
    if (auto v = d.string(j, "id", root, true)) {
        s.id = *v;
        if (s.id.empty()) d.fail("$.id", "must be non-empty");
    }
    if (auto v = d.string(j, "query", root, true)) s.query = *v;

    if (const json* docs = d.array(j, "documents", root, true)) {
        for (std::size_t i = 0; i < docs->size(); ++i) {
            const std::string dp = idx("$.documents", i);
            const json& dj = (*docs)[i];
            if (!dj.is_object()) {
                d.fail(dp, "expected an object");
                continue;
            }
            InterleavedDocument doc;
            if (const json* els = d.array(dj, "elements", dp, true)) {
                for (std::size_t k = 0; k < els->size(); ++k) {
                    if (auto e = decode_element(d, (*els)[k], idx(dp + ".elements", k))) {
                        doc.elements.push_back(std::move(*e));
                    }
                }
            }
            if (const json* as = d.array(dj, "assets", dp, true)) {
                for (std::size_t k = 0; k < as->size(); ++k) {
                    if (auto a = decode_asset(d, (*as)[k], idx(dp + ".assets", k))) {
                        doc.assets.push_back(std::move(*a));
                    }
                }
            }
            s.documents.push_back(std::move(doc));
        }
    }

    if (const json* refs = d.array(j, "reference_text", root, true)) {
        for (std::size_t i = 0; i < refs->size(); ++i) {
            if (!(*refs)[i].is_string()) {
                d.fail(idx("$.reference_text", i), "expected a string");
                continue;
            }
            s.reference_text.push_back((*refs)[i].get<std::string>());
        }
    }

    const int n = s.image_count();
    if (auto text = d.string(j, "response", root, schema == DatasetSchema::train)) {
        try {
            s.response = markup::parse(*text, n);
        } catch (const MarkupError& e) {
            d.fail("$.response", e.what());
        }
    }
    if (const json* slots = d.field(j, "slots", root, false)) {
        try {
            s.slots = markup::slots_from_json(*slots, s.reference_text.size(), "$.slots");
        } catch (const LabelError& e) {
            d.fail(e.path(), e.what());
        }
    }
    if (const json* labels = d.field(j, "labels", root, false)) {
        try {
            s.labels = metrics::labels_from_json(*labels, n, "$.labels");
        } catch (const LabelError& e) {
            d.fail(e.path(), e.what());
        }
    }
    if (const json* hs = d.field(j, "human_scores", root, false)) {
        const std::string hp = "$.human_scores";
        if (!hs->is_object()) {
            d.fail(hp, "expected an object");
        } else {
            LikertRecord rec;
            const auto t = d.integer(*hs, "text", hp, true);
            const auto i = d.integer(*hs, "image", hp, true);
            const auto o = d.integer(*hs, "overall", hp, true);
            rec.reviewer = d.string(*hs, "reviewer", hp, false).value_or("");
            rec.version = d.integer(*hs, "version", hp, false).value_or(0);
            if (t && i && o) {
                auto clamp = [](long long v) {
                    return static_cast<int>(std::clamp<long long>(v, -1, 6));
                };
                rec.scores = {clamp(*t), clamp(*i), clamp(*o)};
                s.human_scores = rec;
            }
        }
    }
    if (auto status = d.string(j, "status", root, false)) {
        s.status = parse_curation_status(*status);
        if (!s.status) d.fail("$.status", "expected pending, accepted or rejected");
    }
    s.text_response = d.string(j, "text_response", root, false);
    if (const json* w = d.field(j, "insertion_warning", root, false)) {
        if (!w->is_boolean()) {
            d.fail("$.insertion_warning", "expected a boolean");
        } else {
            s.insertion_warning = w->get<bool>();
        }
    }

    if (out.size() != before) return std::nullopt;
    for (auto& v : validate_sample(s)) out.push_back(std::move(v));
    if (out.size() != before) return std::nullopt;
    return s;
}

}  // namespace

std::vector<Violation> validate_sample(const Sample& s) {
    std::vector<Violation> out;
    const int n = s.image_count();
    std::set<ImageId> asset_ids;
    for (std::size_t d = 0; d < s.documents.size(); ++d) {
        const auto& doc = s.documents[d];
        const std::string dp = idx("$.documents", d);
        for (std::size_t k = 0; k < doc.assets.size(); ++k) {
            const auto& a = doc.assets[k];
            const std::string ap = idx(dp + ".assets", k);
            if (a.id < 1) {
                out.push_back({ap + ".id", "image_id must be >= 1"});
            } else if (a.id > n) {
                out.push_back({ap + ".id", "reference out of range [1, " + std::to_string(n) + "]"});
            }
            if (!asset_ids.insert(a.id).second) out.push_back({ap + ".id", "duplicate asset id"});
            if (a.uri.empty()) out.push_back({ap + ".uri", "uri must be non-empty"});
        }
    }
    for (std::size_t d = 0; d < s.documents.size(); ++d) {
        const auto& doc = s.documents[d];
        for (std::size_t k = 0; k < doc.elements.size(); ++k) {
            const auto& e = doc.elements[k];
            const std::string ep = idx(idx("$.documents", d) + ".elements", k);
            if (e.kind == Element::Kind::image) {
                if (e.image_id < 1 || e.image_id > n) {
                    out.push_back({ep + ".image_id", "reference out of range"});
                } else if (asset_ids.count(e.image_id) == 0) {
                    out.push_back({ep + ".image_id", "unknown image"});
                }
            }
        }
    }
    if (s.response) {
        std::set<ImageId> seen;
        const auto ids = s.response->image_ids();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const std::string rp = "$.response[" + std::to_string(i) + "]";
            if (ids[i] < 1 || ids[i] > n) {
                out.push_back({rp, "reference out of range"});
            } else if (asset_ids.count(ids[i]) == 0) {
                out.push_back({rp, "unknown image"});
            }
            if (!seen.insert(ids[i]).second) out.push_back({rp, "duplicate reference"});
        }
        for (const auto& problem : markup::validate(*s.response, std::max(n, 0))) {
            if (problem.find("reference") == std::string::npos) out.push_back({"$.response", problem});
        }
    }
    if (s.slots) {
        for (const auto& [id, after] : s.slots->slots) {
            if (after > s.reference_text.size()) {
                out.push_back({"$.slots", "slot " + std::to_string(id) + " beyond the reference text"});
            }
        }
    }
    if (s.labels) {
        for (const auto& [slot, row] : s.labels->slots()) {
            const std::string lp = "$.labels." + std::to_string(slot);
            if (s.slots && !std::any_of(s.slots->slots.begin(), s.slots->slots.end(),
                                        [&](const auto& p) { return p.first == slot; })) {
                out.push_back({lp, "slot not declared in slots"});
            }
            for (const auto& [image, score] : row) {
                if (image < 1 || image > n) out.push_back({lp, "reference out of range"});
            }
        }
    }
    if (s.human_scores) {
        const auto& sc = s.human_scores->scores;
        const std::pair<const char*, int> fields[] = {{"text", sc.text}, {"image", sc.image}, {"overall", sc.overall}};
        for (const auto& [name, v] : fields) {
            if (v < 1 || v > 5) out.push_back({std::string("$.human_scores.") + name, "score outside 1..5"});
        }
    }
    return out;
}

std::vector<Violation> validate_sample_json(const json& j, DatasetSchema schema) {
    std::vector<Violation> out;
    try {
        decode_sample(j, schema, out);
    } catch (const std::exception& e) {
        out.push_back({"$", e.what()});
    }
    return out;
}

Sample sample_from_json(const json& j, DatasetSchema schema) {
    std::vector<Violation> out;
    auto s = decode_sample(j, schema, out);
    if (!s) {
        const auto& v = out.front();
        throw DatasetError(0, v.path, v.reason);
    }
    return std::move(*s);
}

json sample_to_json(const Sample& s) {
    json j;
    j["id"] = s.id;
    j["query"] = s.query;
    json docs = json::array();
    for (const auto& d : s.documents) {
        json els = json::array();
        for (const auto& e : d.elements) {
            if (e.kind == Element::Kind::text) {
                els.push_back({{"kind", "text"}, {"text", e.text}});
            } else {
                els.push_back({{"kind", "image"}, {"image_id", e.image_id}});
            }
        }
        json assets = json::array();
        for (const auto& a : d.assets) {
            json aj = {{"id", a.id}, {"uri", a.uri}};
            if (a.source_doc) aj["source_doc"] = *a.source_doc;
            if (a.caption_standalone) aj["caption_standalone"] = *a.caption_standalone;
            if (a.caption_contextual) aj["caption_contextual"] = *a.caption_contextual;
            assets.push_back(std::move(aj));
        }
        docs.push_back({{"elements", std::move(els)}, {"assets", std::move(assets)}});
    }
    j["documents"] = std::move(docs);
    j["reference_text"] = s.reference_text;
    if (s.response) j["response"] = markup::render(*s.response);
    if (s.slots) j["slots"] = markup::slots_to_json(*s.slots);
    if (s.labels) j["labels"] = metrics::labels_to_json(*s.labels);
    if (s.human_scores) {
        const auto& h = *s.human_scores;
        j["human_scores"] = {{"text", h.scores.text},
                             {"image", h.scores.image},
                             {"overall", h.scores.overall},
                             {"reviewer", h.reviewer},
                             {"version", h.version}};
    }
    if (s.status) j["status"] = to_string(*s.status);
    if (s.text_response) j["text_response"] = *s.text_response;
    if (s.insertion_warning) j["insertion_warning"] = true;
    return j;
}

std::vector<Sample> parse_dataset(std::string_view jsonl, DatasetSchema schema, const std::string& origin) {
    std::vector<Sample> samples;
    std::set<std::string> ids;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < jsonl.size()) {
        const auto nl = jsonl.find('\n', start);
        const auto line = jsonl.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
        start = nl == std::string_view::npos ? jsonl.size() : nl + 1;
        ++line_no;
        if (is_blank(line)) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw DatasetError(line_no, "", origin + ": malformed JSON: " + e.what());
        }
        std::vector<Violation> violations;
        auto s = decode_sample(j, schema, violations);
        if (!s) {
            throw DatasetError(line_no, violations.front().path, violations.front().reason);
        }
        if (!ids.insert(s->id).second) {
            throw DatasetError(line_no, "$.id", "duplicate sample id '" + s->id + "'");
        }
        s->source_line = line_no;
        samples.push_back(std::move(*s));
    }
    return samples;
}

std::vector<Sample> load_dataset(const std::filesystem::path& path, DatasetSchema schema) {
    if (!std::filesystem::exists(path)) throw IoError("dataset not found: " + path.string());
    return parse_dataset(read_file(path), schema, path.string());
}

std::string to_jsonl(const std::vector<Sample>& samples) {
    std::string out;
    for (const auto& s : samples) {
        out.append(sample_to_json(s).dump());
        out.push_back('\n');
    }
    return out;
}

void write_dataset(const std::filesystem::path& path, const std::vector<Sample>& samples) {
    write_file_atomic(path, to_jsonl(samples));
}

std::size_t export_training_jsonl(const std::vector<Sample>& samples, const std::filesystem::path& path) {
    std::vector<Sample> accepted;
    for (const auto& s : samples) {
        if (s.status != CurationStatus::accepted) continue;
        if (!s.response) {
            throw DatasetError(s.source_line, "$.response", "accepted sample '" + s.id + "' has no response");
        }
        accepted.push_back(s);
    }
    write_dataset(path, accepted);
    return accepted.size();
}

std::string serialize_prompt(const Sample& s) {
    std::string out = s.query;
    for (const auto& doc : s.documents) {
        for (const auto& e : doc.elements) {
            out.append("\n\n");
            out.append(e.kind == Element::Kind::text ? e.text : markup::marker(e.image_id));
        }
    }
    return out;
}

DatasetStats compute_stats(const std::vector<Sample>& samples, LengthUnit unit) {
    DatasetStats stats;
    stats.sample_count = samples.size();
    // Integer total so the mean does not depend on summation order.
    unsigned long long total_len = 0;
    for (const auto& s : samples) {
        stats.image_count += static_cast<std::size_t>(s.image_count());
        const std::string prompt = serialize_prompt(s);
        total_len += unit == LengthUnit::chars ? utf8_length(prompt) : whitespace_token_count(prompt);
    }
    if (!samples.empty()) {
        stats.avg_prompt_len = static_cast<double>(total_len) / static_cast<double>(samples.size());
    }
    return stats;
}

json stats_to_json(const DatasetStats& stats) {
    return {{"sample_count", stats.sample_count},
            {"image_count", stats.image_count},
            {"avg_prompt_len", stats.avg_prompt_len}};
}

DatasetStats stats_from_manifest(const json& manifest) {
    try {
        DatasetStats s;
        s.sample_count = manifest.at("sample_count").get<std::size_t>();
        s.image_count = manifest.at("image_count").get<std::size_t>();
        s.avg_prompt_len = manifest.at("avg_prompt_len").get<double>();
        if (s.avg_prompt_len < 0) throw DatasetError(0, "avg_prompt_len", "must be >= 0");
        return s;
    } catch (const json::exception& e) {
        throw DatasetError(0, "manifest", e.what());
    }
}

void assign_contextual_ids(Sample& s) {
    if (s.response || s.labels) {
        throw Error("assign_contextual_ids: sample '" + s.id + "' already references contextual ids");
    }
    ImageId next = 1;
    for (std::size_t d = 0; d < s.documents.size(); ++d) {
        auto& doc = s.documents[d];
        std::map<ImageId, ImageId> renumber;
        for (auto& e : doc.elements) {
            if (e.kind != Element::Kind::image) continue;
            auto [it, inserted] = renumber.emplace(e.image_id, next);
            if (inserted) ++next;
            e.image_id = it->second;
        }
        for (auto& a : doc.assets) {
            auto it = renumber.find(a.id);
            if (it == renumber.end()) {
                it = renumber.emplace(a.id, next++).first;
            }
            a.id = it->second;
            a.source_doc = static_cast<int>(d);
        }
    }
}

}  // namespace corpus
}  // namespace imgref
