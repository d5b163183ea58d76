// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#include "imgref/markup.hpp"

#include <set>

namespace imgref {

MarkupError::MarkupError(std::size_t line, std::size_t column, const std::string& reason)
    : Error("line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + reason),
      line_(line),
      column_(column) {}

std::vector<std::string> ResponseDoc::paragraphs() const {
    std::vector<std::string> out;
    for (const auto& b : blocks) {
        if (const auto* p = std::get_if<Paragraph>(&b)) out.push_back(p->text);
    }
    return out;
}

std::vector<ImageId> ResponseDoc::image_ids() const {
    std::vector<ImageId> out;
    for (const auto& b : blocks) {
        if (const auto* r = std::get_if<ImageRef>(&b)) out.push_back(r->image_id);
    }
    return out;
}

SlotSpec SlotSpec::paragraph_boundaries(std::size_t paragraph_count) {
    SlotSpec spec;
    for (std::size_t k = 0; k <= paragraph_count; ++k) {
        spec.slots.emplace_back(static_cast<SlotId>(k), k);
    }
    return spec;
}

std::optional<SlotId> SlotSpec::slot_after(std::size_t paragraph_index) const {
    for (const auto& [id, after] : slots) {
        if (after == paragraph_index) return id;
    }
    return std::nullopt;
}

namespace markup {

namespace {

struct Line {
    std::string_view text;
    std::size_t number;  // 1-based
};

std::vector<Line> split_lines(std::string_view text) {
    std::vector<Line> lines;
    std::size_t start = 0;
    std::size_t number = 1;
    for (;;) {
        const auto nl = text.find('\n', start);
        auto line = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        lines.push_back({line, number++});
        if (nl == std::string_view::npos) break;
        start = nl + 1;
    }
    return lines;
}

std::size_t leading_space(std::string_view s) {
    std::size_t i = 0;
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\f' || s[i] == '\v')) ++i;
    return i;
}

bool is_marker_attempt(std::string_view line) {
    return line.substr(leading_space(line)).substr(0, kMarkerPrefix.size()) == kMarkerPrefix;
}

// Returns the id of a marker line; throws MarkupError with the offending column.
long long parse_marker(const Line& line) {
    const std::string body = trim(line.text);
    const std::size_t base = leading_space(line.text);  // 0-based column of '<'
    const std::size_t digits_at = kMarkerPrefix.size();
    std::size_t i = digits_at;
    while (i < body.size() && body[i] >= '0' && body[i] <= '9') ++i;
    const std::size_t digit_count = i - digits_at;
    if (digit_count == 0) {
        throw MarkupError(line.number, base + digits_at + 1, "malformed image marker: expected an image id");
    }
    if (body[digits_at] == '0') {
        throw MarkupError(line.number, base + digits_at + 1,
                          "malformed image marker: id must be >= 1 without leading zeros");
    }
    if (i >= body.size() || body[i] != '>') {
        throw MarkupError(line.number, base + i + 1, "malformed image marker: expected '>'");
    }
    if (i + 1 != body.size()) {
        throw MarkupError(line.number, base + i + 2,
                          "malformed image marker: trailing text after '>'");
    }
    if (digit_count > 9) {
        throw MarkupError(line.number, base + digits_at + 1, "image id out of range");
    }
    return std::stoll(body.substr(digits_at, digit_count));
}

}  // namespace

std::string marker(ImageId id) {
    return std::string(kMarkerPrefix) + std::to_string(id) + ">";
}

ResponseDoc parse(std::string_view text, int image_count) {
    if (image_count < 0) throw MarkupError(1, 1, "negative image count");
    ResponseDoc doc;
    std::set<ImageId> seen;
    std::string paragraph;
    bool open = false;
    auto close = [&] {
        if (open) doc.blocks.emplace_back(Paragraph{std::move(paragraph)});
        paragraph.clear();
        open = false;
    };
    for (const Line& line : split_lines(text)) {
        if (is_blank(line.text)) {
            close();
            continue;
        }
        if (is_marker_attempt(line.text)) {
            const long long id = parse_marker(line);
            const std::size_t column = leading_space(line.text) + kMarkerPrefix.size() + 1;
            if (id > image_count) {
                throw MarkupError(line.number, column,
                                  "image id " + std::to_string(id) + " out of range [1, " +
                                      std::to_string(image_count) + "]");
            }
            if (!seen.insert(static_cast<ImageId>(id)).second) {
                throw MarkupError(line.number, column,
                                  "duplicate reference to image " + std::to_string(id));
            }
            close();
            doc.blocks.emplace_back(ImageRef{static_cast<ImageId>(id)});
            continue;
        }
        if (open) paragraph.push_back('\n');
        paragraph.append(line.text);
        open = true;
    }
    close();
    return doc;
}

std::string render(const ResponseDoc& doc) {
    std::string out;
    for (std::size_t i = 0; i < doc.blocks.size(); ++i) {
        if (i > 0) out.append("\n\n");
        if (const auto* p = std::get_if<Paragraph>(&doc.blocks[i])) {
            out.append(p->text);
        } else {
            out.append(marker(std::get<ImageRef>(doc.blocks[i]).image_id));
        }
    }
    return out;
}

std::vector<std::string> validate(const ResponseDoc& doc, int image_count) {
    std::vector<std::string> problems;
    std::set<ImageId> seen;
    for (std::size_t i = 0; i < doc.blocks.size(); ++i) {
        const std::string where = "blocks[" + std::to_string(i) + "]";
        if (const auto* r = std::get_if<ImageRef>(&doc.blocks[i])) {
            if (r->image_id < 1 || r->image_id > image_count) {
                problems.push_back(where + ": reference out of range");
            }
            if (!seen.insert(r->image_id).second) problems.push_back(where + ": duplicate reference");
            continue;
        }
        const auto& text = std::get<Paragraph>(doc.blocks[i]).text;
        if (text.empty()) {
            problems.push_back(where + ": empty paragraph");
            continue;
        }
        std::size_t start = 0;
        for (;;) {
            const auto nl = text.find('\n', start);
            const auto line = std::string_view(text).substr(
                start, nl == std::string::npos ? std::string::npos : nl - start);
            if (is_blank(line)) problems.push_back(where + ": paragraph contains a blank line");
            if (is_marker_attempt(line)) problems.push_back(where + ": paragraph line looks like a marker");
            if (!line.empty() && line.back() == '\r') problems.push_back(where + ": carriage return at line end");
            if (nl == std::string::npos) break;
            start = nl + 1;
        }
    }
    return problems;
}

bool contains_marker(std::string_view text) {
    for (const Line& line : split_lines(text)) {
        if (is_marker_attempt(line.text)) return true;
    }
    return false;
}

std::string text_only(const ResponseDoc& doc) {
    std::string out;
    for (const auto& p : doc.paragraphs()) {
        if (!out.empty()) out.append("\n\n");
        out.append(p);
    }
    return out;
}

std::vector<std::string> split_paragraphs(std::string_view text) {
    std::vector<std::string> out;
    std::string current;
    bool open = false;
    for (const Line& line : split_lines(text)) {
        if (is_blank(line.text)) {
            if (open) out.push_back(std::move(current));
            current.clear();
            open = false;
            continue;
        }
        if (open) current.push_back('\n');
        current.append(line.text);
        open = true;
    }
    if (open) out.push_back(std::move(current));
    return out;
}

Assignment extract_assignment(const ResponseDoc& doc, const std::vector<std::string>& reference_text,
                              const SlotSpec& slots) {
    Assignment assignment;
    std::size_t seen_paragraphs = 0;
    for (const auto& block : doc.blocks) {
        if (const auto* p = std::get_if<Paragraph>(&block)) {
            if (seen_paragraphs >= reference_text.size()) {
                throw AssignmentError("response has more paragraphs than the reference text (" +
                                      std::to_string(reference_text.size()) + ")");
            }
            if (normalize_whitespace(p->text) != normalize_whitespace(reference_text[seen_paragraphs])) {
                throw AssignmentError("paragraph " + std::to_string(seen_paragraphs + 1) +
                                      " deviates from the reference text");
            }
            ++seen_paragraphs;
            continue;
        }
        const ImageId image = std::get<ImageRef>(block).image_id;
        const auto slot = slots.slot_after(seen_paragraphs);
        if (!slot) {
            throw AssignmentError("image " + std::to_string(image) + " after paragraph " +
                                  std::to_string(seen_paragraphs) + " is not at a declared slot");
        }
        try {
            assignment.place(*slot, image);
        } catch (const MetricsError& e) {
            throw AssignmentError(std::string("invalid placement: ") + e.what());
        }
    }
    if (seen_paragraphs != reference_text.size()) {
        throw AssignmentError("response has " + std::to_string(seen_paragraphs) +
                              " paragraphs, reference text has " +
                              std::to_string(reference_text.size()));
    }
    return assignment;
}

nlohmann::json slots_to_json(const SlotSpec& spec) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& [id, after] : spec.slots) out.push_back({{"id", id}, {"after", after}});
    return out;
}

SlotSpec slots_from_json(const nlohmann::json& j, std::size_t paragraph_count, const std::string& path) {
    if (!j.is_array()) throw LabelError(path, "expected an array of {id, after}");
    SlotSpec spec;
    std::set<SlotId> ids;
    std::set<std::size_t> positions;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const std::string item = path + "[" + std::to_string(i) + "]";
        const auto& s = j[i];
        if (!s.is_object() || !s.contains("id") || !s["id"].is_number_integer()) {
            throw LabelError(item + ".id", "slot id must be an integer");
        }
        if (!s.contains("after") || !s["after"].is_number_unsigned()) {
            throw LabelError(item + ".after", "must be a non-negative integer");
        }
        const auto id = s["id"].get<long long>();
        const auto after = s["after"].get<std::size_t>();
        if (id < 0 || id > std::numeric_limits<int>::max()) throw LabelError(item + ".id", "slot id out of range");
        if (after > paragraph_count) {
            throw LabelError(item + ".after", "position " + std::to_string(after) +
                                                  " beyond paragraph count " +
                                                  std::to_string(paragraph_count));
        }
        if (!ids.insert(static_cast<SlotId>(id)).second) throw LabelError(item + ".id", "duplicate slot id");
        if (!positions.insert(after).second) throw LabelError(item + ".after", "duplicate slot position");
        spec.slots.emplace_back(static_cast<SlotId>(id), after);
    }
    return spec;
}

}  // namespace markup
}  // namespace imgref
