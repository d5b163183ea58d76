// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "imgref/util.hpp"

namespace imgref {

class CostError : public Error {
public:
    using Error::Error;
};

/// Token-level sizes of one sample. All values are >= 0.
struct CostParams {
    double images = 0;           // N: images in the sample
    double image_context = 0;    // L: textual context length per image
    double total_context = 0;    // M: total context length
    double image_tokens = 0;     // P: tokens one image occupies in the VLM
    double response = 0;         // R: response length
    double caption = 0;          // C: length of one caption

    /// Throws CostError on negative values, or image_context > total_context when images >= 1.
    void validate() const;

    /// Field by its symbol ("N", "L", "M", "P", "R", "C"); throws CostError otherwise.
    double& field(std::string_view symbol);
};

struct CostRow {
    double value = 0;
    double end_to_end = 0;
    double three_stage = 0;
    std::optional<double> ratio;  // three_stage / end_to_end
};

namespace costmodel {

/// (M + N*P + R)^2
double end_to_end_cost(const CostParams& p);

/// (M + R)^2 + 9*N*(L + P + C)^2 + 9*(R + N*C)^2
double three_stage_cost(const CostParams& p);

std::vector<CostRow> sweep(const CostParams& base, std::string_view vary, const std::vector<double>& values);

/// Header `vary_value,end_to_end,three_stage,ratio`, then one row per entry.
std::string to_csv(const std::vector<CostRow>& rows);

CostParams params_from_json(const nlohmann::json& j);
nlohmann::json params_to_json(const CostParams& p);

}  // namespace costmodel
}  // namespace imgref
