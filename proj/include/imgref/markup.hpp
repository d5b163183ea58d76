// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "imgref/metrics.hpp"

namespace imgref {

// Response text grammar:
//
//   response  := block ("\n\n" block)*
//   block     := paragraph | marker
//   marker    := "<image:" K ">"      (the whole trimmed line; K decimal, >= 1, no leading zeros)
//   paragraph := one or more non-blank, non-marker lines
//
// Any line whose trimmed content starts with "<image:" is a marker attempt and
// must be well formed.

struct Paragraph {
    std::string text;
    friend bool operator==(const Paragraph&, const Paragraph&) = default;
};

struct ImageRef {
    ImageId image_id = 0;
    friend bool operator==(const ImageRef&, const ImageRef&) = default;
};

using Block = std::variant<Paragraph, ImageRef>;

struct ResponseDoc {
    std::vector<Block> blocks;

    std::vector<std::string> paragraphs() const;
    std::vector<ImageId> image_ids() const;
    friend bool operator==(const ResponseDoc&, const ResponseDoc&) = default;
};

/// Insertion points: slot id -> "after paragraph k" (k = 0 is before the first).
struct SlotSpec {
    std::vector<std::pair<SlotId, std::size_t>> slots;

    /// One slot per paragraph boundary: slot k sits after paragraph k, k = 0..paragraph_count.
    static SlotSpec paragraph_boundaries(std::size_t paragraph_count);

    std::optional<SlotId> slot_after(std::size_t paragraph_index) const;
    friend bool operator==(const SlotSpec&, const SlotSpec&) = default;
};

class MarkupError : public Error {
public:
    MarkupError(std::size_t line, std::size_t column, const std::string& reason);
    std::size_t line() const { return line_; }
    std::size_t column() const { return column_; }

private:
    std::size_t line_;
    std::size_t column_;
};

/// Raised by extract_assignment when a response does not fit the fixed text.
class AssignmentError : public Error {
public:
    using Error::Error;
};

namespace markup {

inline constexpr std::string_view kMarkerPrefix = "<image:";

std::string marker(ImageId id);

/// Parses response text. Throws MarkupError (1-based line/column) on a
/// malformed marker, an id outside [1, image_count], or a repeated id.
ResponseDoc parse(std::string_view text, int image_count);

/// Canonical text: blocks joined by one blank line, markers on their own line.
std::string render(const ResponseDoc& doc);

/// Empty when `doc` is renderable and re-parses to itself with `image_count`.
std::vector<std::string> validate(const ResponseDoc& doc, int image_count);

/// True when any line of `text` is a marker attempt.
bool contains_marker(std::string_view text);

/// Paragraph text only, joined by blank lines.
std::string text_only(const ResponseDoc& doc);

/// Splits plain text into paragraphs on blank lines (no marker handling).
std::vector<std::string> split_paragraphs(std::string_view text);

/// Maps each image_ref to the slot at its paragraph boundary. The doc's
/// paragraphs must equal `reference_text` after whitespace normalization.
Assignment extract_assignment(const ResponseDoc& doc, const std::vector<std::string>& reference_text,
                              const SlotSpec& slots);

nlohmann::json slots_to_json(const SlotSpec& spec);
SlotSpec slots_from_json(const nlohmann::json& j, std::size_t paragraph_count,
                         const std::string& path = "slots");

}  // namespace markup
}  // namespace imgref
