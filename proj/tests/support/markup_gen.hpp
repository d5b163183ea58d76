// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

// Random generators for markup property tests and fuzzing.

#pragma once

#include <string>
#include <vector>

#include "imgref/markup.hpp"
#include "imgref/util.hpp"

namespace imgref::testing {

inline std::string random_word(SplitMix64& rng) {
    static const char* const kWords[] = {"the", "image", "Einstein", "portrait", "<b>", "x:1", "42", "naïve",
                                         "café", "<image", "image:3>", "a", "tab\there", "end."};
    return kWords[rng.bounded(std::size(kWords))];
}

inline std::string random_line(SplitMix64& rng) {
    std::string line;
    const auto words = 1 + rng.bounded(6);
    for (std::uint64_t w = 0; w < words; ++w) {
        if (w > 0) line += ' ';
        line += random_word(rng);
    }
    if (rng.bounded(5) == 0) line = "  " + line;  // indentation is content
    return line;
}

/// A valid document over `n` images: random paragraphs interleaved with
/// distinct image references.
inline ResponseDoc random_doc(SplitMix64& rng, int n) {
    ResponseDoc doc;
    std::vector<ImageId> pool;
    for (int i = 1; i <= n; ++i) pool.push_back(i);
    const auto blocks = rng.bounded(9);
    for (std::uint64_t b = 0; b < blocks; ++b) {
        if (!pool.empty() && rng.bounded(3) == 0) {
            const auto k = rng.bounded(pool.size());
            doc.blocks.emplace_back(ImageRef{pool[k]});
            pool.erase(pool.begin() + static_cast<long>(k));
            continue;
        }
        std::string text = random_line(rng);
        const auto extra = rng.bounded(3);
        for (std::uint64_t l = 0; l < extra; ++l) text += "\n" + random_line(rng);
        doc.blocks.emplace_back(Paragraph{text});
    }
    return doc;
}

/// Arbitrary text biased toward marker-like fragments.
inline std::string fuzz_text(SplitMix64& rng) {
    static const char* const kPieces[] = {"<image:", ">", "1", "0", "07", "99999999999999999999", "\n", "\n\n",
                                          " ", "\t", "\r\n", "-3", "abc", "<", "image", ":", "\xff", "\xc3",
                                          "<image:2>", "<image:1>\n", "\0"};
    std::string out;
    const auto pieces = rng.bounded(24);
    for (std::uint64_t i = 0; i < pieces; ++i) {
        const auto k = rng.bounded(std::size(kPieces));
        out += (k + 1 == std::size(kPieces)) ? std::string(1, '\0') : std::string(kPieces[k]);
    }
    return out;
}

}  // namespace imgref::testing
