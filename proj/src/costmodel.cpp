// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#include "imgref/costmodel.hpp"

#include <cmath>
#include <cstdio>

namespace imgref {

void CostParams::validate() const {
    const std::pair<const char*, double> all[] = {{"N", images},         {"L", image_context},
                                                  {"M", total_context},  {"P", image_tokens},
                                                  {"R", response},       {"C", caption}};
    for (const auto& [name, v] : all) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw CostError(std::string("cost parameter ") + name + " must be a finite value >= 0");
        }
    }
    if (images >= 1.0 && image_context > total_context) {
        throw CostError("per-image context L must not exceed total context M when N >= 1");
    }
}

double& CostParams::field(std::string_view symbol) {
    if (symbol == "N") return images;
    if (symbol == "L") return image_context;
    if (symbol == "M") return total_context;
    if (symbol == "P") return image_tokens;
    if (symbol == "R") return response;
    if (symbol == "C") return caption;
    throw CostError("unknown cost parameter '" + std::string(symbol) + "' (expected one of N, L, M, P, R, C)");
}

namespace costmodel {

double end_to_end_cost(const CostParams& p) {
    p.validate();
    const double len = p.total_context + p.images * p.image_tokens + p.response;
    return len * len;
}

double three_stage_cost(const CostParams& p) {
    p.validate();
    const double text = p.total_context + p.response;
    const double caption = p.image_context + p.image_tokens + p.caption;
    const double insertion = p.response + p.images * p.caption;
    return text * text + 9.0 * p.images * caption * caption + 9.0 * insertion * insertion;
}

std::vector<CostRow> sweep(const CostParams& base, std::string_view vary, const std::vector<double>& values) {
    CostParams probe = base;
    probe.field(vary);  // reject unknown names even for an empty sweep
    std::vector<CostRow> rows;
    rows.reserve(values.size());
    for (double v : values) {
        CostParams p = base;
        p.field(vary) = v;
        CostRow row;
        row.value = v;
        row.end_to_end = end_to_end_cost(p);
        row.three_stage = three_stage_cost(p);
        if (row.end_to_end > 0.0) row.ratio = row.three_stage / row.end_to_end;
        rows.push_back(row);
    }
    return rows;
}

namespace {

std::string number(double v) {
    char buf[64];
    if (v == std::floor(v) && std::abs(v) < 1e15) {
        std::snprintf(buf, sizeof buf, "%.0f", v);
    } else {
        std::snprintf(buf, sizeof buf, "%.6g", v);
    }
    return buf;
}

}  // namespace

std::string to_csv(const std::vector<CostRow>& rows) {
    std::string out = "vary_value,end_to_end,three_stage,ratio\n";
    for (const auto& r : rows) {
        out += number(r.value) + "," + number(r.end_to_end) + "," + number(r.three_stage) + ",";
        if (r.ratio) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.6f", *r.ratio);
            out += buf;
        }
        out += "\n";
    }
    return out;
}

CostParams params_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw CostError("cost params must be a JSON object");
    CostParams p;
    for (const auto& [key, value] : j.items()) {
        if (!value.is_number()) throw CostError("cost parameter " + key + " must be a number");
        p.field(key) = value.get<double>();
    }
    p.validate();
    return p;
}

nlohmann::json params_to_json(const CostParams& p) {
    return {{"N", p.images},       {"L", p.image_context}, {"M", p.total_context},
            {"P", p.image_tokens}, {"R", p.response},      {"C", p.caption}};
}

}  // namespace costmodel
}  // namespace imgref
