// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#include "imgref/cli.hpp"

#include <chrono>
#include <csignal>
#include <cstdlib>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include "CLI11.hpp"

#include "imgref/annotation.hpp"
#include "imgref/costmodel.hpp"
#include "imgref/judge.hpp"
#include "imgref/pipeline.hpp"

namespace imgref::cli {

using nlohmann::json;
namespace fs = std::filesystem;

std::atomic<bool>& stop_requested() {
    static std::atomic<bool> flag{false};
    return flag;
}

fs::path RunConfig::resolve(const std::string& p) const {
    fs::path path(p);
    if (path.is_absolute() || base_dir.empty()) return path;
    return base_dir / path;
}

std::string RunConfig::digest() const {
    return sha256_hex(raw.dump());
}

std::optional<json> RunConfig::backend(const std::string& role) const {
    if (!raw.contains("backends") || !raw["backends"].contains(role)) return std::nullopt;
    return interpolate_env(raw["backends"][role]);
}

std::optional<fs::path> RunConfig::path_at(const std::string& section, const std::string& key) const {
    if (!raw.contains(section) || !raw[section].is_object() || !raw[section].contains(key)) return std::nullopt;
    const auto& v = raw[section][key];
    if (!v.is_string()) throw ConfigError(section + "." + key + " must be a string path");
    return resolve(v.get<std::string>());
}

json interpolate_env(const json& j) {
    if (j.is_object()) {
        json out = json::object();
        for (const auto& [k, v] : j.items()) out[k] = interpolate_env(v);
        return out;
    }
    if (j.is_array()) {
        json out = json::array();
        for (const auto& v : j) out.push_back(interpolate_env(v));
        return out;
    }
    if (!j.is_string()) return j;
    const std::string s = j.get<std::string>();
    std::string out;
    std::size_t i = 0;
    while (i < s.size()) {
        const auto open = s.find("${", i);
        if (open == std::string::npos) {
            out.append(s, i, std::string::npos);
            break;
        }
        const auto close = s.find('}', open);
        if (close == std::string::npos) throw ConfigError("unterminated ${ in config value");
        out.append(s, i, open - i);
        const std::string name = s.substr(open + 2, close - open - 2);
        const char* value = std::getenv(name.c_str());
        if (value == nullptr) throw ConfigError("environment variable " + name + " is not set");
        out.append(value);
        i = close + 1;
    }
    return out;
}

RunConfig load_config(const fs::path& path) {
    RunConfig cfg;
    if (path.empty()) return cfg;
    try {
        cfg.raw = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    if (!cfg.raw.is_object()) throw ConfigError(path.string() + ": config must be a JSON object");
    cfg.base_dir = fs::absolute(path).parent_path();
    try {
        if (cfg.raw.contains("seed")) cfg.seed = cfg.raw["seed"].get<std::uint64_t>();
        if (cfg.raw.contains("aggregation")) {
            cfg.aggregation = metrics::parse_aggregation_mode(cfg.raw["aggregation"].get<std::string>());
        }
        if (cfg.raw.contains("length_unit")) cfg.length_unit = parse_length_unit(cfg.raw["length_unit"].get<std::string>());
        if (cfg.raw.contains("output_dir")) cfg.output_dir = cfg.resolve(cfg.raw["output_dir"].get<std::string>());
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    } catch (const Error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return cfg;
}

std::shared_ptr<ModelBackend> make_backend(const json& spec, const RunConfig& cfg, const std::string& role) {
    std::shared_ptr<ModelBackend> backend;
    try {
        const std::string kind = spec.value("kind", "http");
        if (kind == "http") {
            BackendConfig bc;
            bc.base_url = spec.at("base_url").get<std::string>();
            bc.model_name = spec.at("model").get<std::string>();
            bc.api_key_env = spec.value("api_key_env", "");
            bc.timeout = std::chrono::milliseconds(spec.value("timeout_ms", 60000));
            bc.max_retries = spec.value("max_retries", 3);
            bc.backoff_base = std::chrono::milliseconds(spec.value("backoff_base_ms", 500));
            bc.max_concurrent = spec.value("max_concurrent", 4);
            bc.inline_images = spec.value("inline_images", false);
            bc.seed = derive_seed(cfg.seed, "backend." + role);
            backend = std::make_shared<HttpBackend>(bc);
        } else if (kind == "scripted") {
            json script;
            if (spec.contains("script") && spec["script"].is_string()) {
                script = json::parse(read_file(cfg.resolve(spec["script"].get<std::string>())));
            } else {
                script = spec.value("script", json::object());
            }
            backend = ScriptedBackend::from_rules(script, spec.value("model", "scripted-" + role));
        } else {
            throw ConfigError("backends." + role + ": unknown kind '" + kind + "'");
        }
        if (spec.contains("cache")) {
            const auto& c = spec["cache"];
            backend = with_cache(backend, cfg.resolve(c.at("dir").get<std::string>()),
                                 parse_cache_mode(c.value("mode", "replay")));
        }
    } catch (const json::exception& e) {
        throw ConfigError("backends." + role + ": " + e.what());
    } catch (const BackendError& e) {
        throw ConfigError("backends." + role + ": " + e.what());
    }
    return backend;
}

namespace {

struct Context {
    std::ostream& out;
    std::ostream& err;
    RunConfig cfg;
    std::string command;
};

fs::path require_output_dir(const Context& ctx) {
    if (!ctx.cfg.output_dir) throw ConfigError("--output-dir is required for '" + ctx.command + "'");
    fs::create_directories(*ctx.cfg.output_dir);
    return *ctx.cfg.output_dir;
}

fs::path input_path(const Context& ctx, const std::string& flag_value, const std::string& key) {
    if (!flag_value.empty()) return fs::path(flag_value);
    if (auto p = ctx.cfg.path_at("datasets", key)) return *p;
    throw ConfigError("no dataset given: pass --input or set datasets." + key + " in the config");
}

std::shared_ptr<ModelBackend> require_backend(const Context& ctx, const std::string& role) {
    auto spec = ctx.cfg.backend(role);
    if (!spec) throw ConfigError("backends." + role + " is required for '" + ctx.command + "'");
    return make_backend(*spec, ctx.cfg, role);
}

json base_manifest(const Context& ctx) {
    return {{"command", ctx.command}, {"seed", ctx.cfg.seed}, {"config_digest", ctx.cfg.digest()}};
}

void write_json(const fs::path& path, const json& j) {
    write_file_atomic(path, j.dump(2) + "\n");
}

std::string file_digest(const fs::path& p) {
    return sha256_hex(read_file(p));
}

// ---------------------------------------------------------------------------

int cmd_generate(Context& ctx, const std::string& input_flag, const std::string& stages_flag) {
    // Validate everything before doing any work.
    auto llm = require_backend(ctx, "llm");
    auto vlm = require_backend(ctx, "vlm");
    const fs::path input = input_path(ctx, input_flag, "input");
    StageConfig stages = StageConfig::defaults();
    if (!stages_flag.empty()) {
        stages = StageConfig::load(stages_flag);
    } else if (ctx.cfg.raw.contains("stage_config_dir")) {
        stages = StageConfig::load(ctx.cfg.resolve(ctx.cfg.raw["stage_config_dir"].get<std::string>()));
    }
    const fs::path out_dir = require_output_dir(ctx);
    const auto samples = corpus::load_dataset(input, DatasetSchema::test);

    std::vector<std::optional<Sample>> results(samples.size());
    std::vector<std::optional<std::pair<std::string, std::string>>> failures(samples.size());
    const auto workers = static_cast<std::size_t>(ctx.cfg.raw.value("max_concurrent_samples", 1));
    parallel_for(samples.size(), workers, [&](std::size_t i) {
        try {
            results[i] = pipeline::run_three_stage(*llm, *vlm, samples[i], stages);
        } catch (const StageError& e) {
            failures[i] = {e.stage(), e.what()};
        }
    });

    std::vector<Sample> produced;
    json stage_failures = {{pipeline::kStageText, 0},
                           {pipeline::kStageCaptionStandalone, 0},
                           {pipeline::kStageCaptionContextual, 0},
                           {pipeline::kStageInsertion, 0}};
    json failure_list = json::array();
    json warning_ids = json::array();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (failures[i]) {
            stage_failures[failures[i]->first] = stage_failures[failures[i]->first].get<int>() + 1;
            failure_list.push_back({{"id", samples[i].id}, {"stage", failures[i]->first}, {"error", failures[i]->second}});
            continue;
        }
        if (results[i]->insertion_warning) warning_ids.push_back(samples[i].id);
        produced.push_back(std::move(*results[i]));
    }
    corpus::write_dataset(out_dir / "samples.jsonl", produced);

    json manifest = base_manifest(ctx);
    manifest["input"] = {{"path", input.string()}, {"sha256", file_digest(input)}};
    manifest["samples_in"] = samples.size();
    manifest["samples_out"] = produced.size();
    manifest["stage_failures"] = stage_failures;
    manifest["failures"] = failure_list;
    manifest["warnings"] = warning_ids.size();
    manifest["warning_ids"] = warning_ids;
    write_json(out_dir / "manifest.json", manifest);

    ctx.out << "generated " << produced.size() << " of " << samples.size() << " samples ("
            << warning_ids.size() << " with insertion warnings, " << failure_list.size() << " failed)\n";
    return 0;
}

std::string position_text(const AggregateReport& agg, std::size_t no_labels, std::size_t no_response,
                          std::size_t invalid) {
    char line[160];
    std::string out = "Image position evaluation (" + metrics::to_string(agg.mode) + ", " +
                      std::to_string(agg.sample_count) + " samples)\n";
    std::snprintf(line, sizeof line, "%10s %10s %10s\n", "Precision", "Recall3", "F1");
    out += line;
    std::snprintf(line, sizeof line, "%10s %10s %10s\n", metrics::format_percent(agg.report.precision).c_str(),
                  metrics::format_percent(agg.report.recall3).c_str(), metrics::format_percent(agg.report.f1).c_str());
    out += line;
    std::snprintf(line, sizeof line, "inserted=%zu nonzero=%zu recall=%zu/%zu\n", agg.report.inserted_count,
                  agg.report.nonzero_count, agg.report.recall_numerator, agg.report.recall_denominator);
    out += line;
    std::snprintf(line, sizeof line, "skipped: no labels %zu, no response %zu, invalid %zu\n", no_labels,
                  no_response, invalid);
    out += line;
    return out;
}

int cmd_eval_position(Context& ctx, const std::string& input_flag, const std::string& aggregation_flag) {
    const fs::path input = input_path(ctx, input_flag, "test");
    if (!aggregation_flag.empty()) ctx.cfg.aggregation = metrics::parse_aggregation_mode(aggregation_flag);
    const fs::path out_dir = require_output_dir(ctx);
    const auto samples = corpus::load_dataset(input, DatasetSchema::test);

    std::vector<PositionReport> reports;
    json per_sample = json::array();
    json invalid = json::array();
    std::size_t no_labels = 0;
    std::size_t no_response = 0;
    for (const auto& s : samples) {
        if (!s.labels) {
            ++no_labels;
            continue;
        }
        if (!s.response) {
            ++no_response;
            continue;
        }
        const SlotSpec slots = s.slots.value_or(SlotSpec::paragraph_boundaries(s.reference_text.size()));
        SlotLabelSet labels = *s.labels;
        for (const auto& [id, after] : slots.slots) labels.declare_slot(id);
        try {
            const Assignment a = markup::extract_assignment(*s.response, s.reference_text, slots);
            const PositionReport r = metrics::score_assignment(a, labels);
            reports.push_back(r);
            per_sample.push_back({{"id", s.id}, {"report", metrics::report_to_json(r)}});
        } catch (const Error& e) {
            invalid.push_back({{"id", s.id}, {"error", e.what()}});
        }
    }
    const AggregateReport agg = metrics::aggregate(reports, ctx.cfg.aggregation);
    const std::string text = position_text(agg, no_labels, no_response, invalid.size());

    json report = {{"aggregate", metrics::aggregate_to_json(agg)},
                   {"per_sample", per_sample},
                   {"skipped", {{"no_labels", no_labels}, {"no_response", no_response}, {"invalid", invalid}}}};
    write_json(out_dir / "position_report.json", report);
    write_file_atomic(out_dir / "position_report.txt", text);
    json manifest = base_manifest(ctx);
    manifest["input"] = {{"path", input.string()}, {"sha256", file_digest(input)}};
    manifest["aggregation"] = metrics::to_string(ctx.cfg.aggregation);
    write_json(out_dir / "manifest.json", manifest);
    ctx.out << text;
    return 0;
}

int cmd_eval_text(Context& ctx, const std::string& input_flag) {
    auto backend = require_backend(ctx, "judge");
    const fs::path input = input_path(ctx, input_flag, "test");
    const fs::path out_dir = require_output_dir(ctx);
    const auto samples = corpus::load_dataset(input, DatasetSchema::test);

    JudgeConfig jc;
    if (ctx.cfg.raw.contains("judge")) {
        const auto& j = ctx.cfg.raw["judge"];
        jc.max_retries = j.value("max_retries", jc.max_retries);
        jc.temperature = j.value("temperature", jc.temperature);
        jc.max_output = j.value("max_output", jc.max_output);
        jc.max_concurrent = j.value("max_concurrent", jc.max_concurrent);
    }
    const JudgeSummary summary = judge::judge_dataset(*backend, samples, jc);
    judge::write_report(summary, out_dir);
    json manifest = base_manifest(ctx);
    manifest["input"] = {{"path", input.string()}, {"sha256", file_digest(input)}};
    write_json(out_dir / "manifest.json", manifest);

    char buf[64];
    if (summary.mean) {
        std::snprintf(buf, sizeof buf, "%.2f", *summary.mean);
    } else {
        std::snprintf(buf, sizeof buf, "-");
    }
    ctx.out << "Text evaluation score: " << buf << " (judged " << summary.verdicts.size() << ", excluded "
            << summary.excluded << ", skipped " << summary.skipped << ")\n";
    return 0;
}

std::pair<int, int> parse_ratio(const std::string& s) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw ConfigError("ratio must look like A:B");
    try {
        return {std::stoi(s.substr(0, colon)), std::stoi(s.substr(colon + 1))};
    } catch (const std::exception&) {
        throw ConfigError("ratio must look like A:B with integers");
    }
}

int cmd_mix(Context& ctx, const std::string& a_flag, const std::string& b_flag, const std::string& ratio_flag,
            std::optional<std::size_t> count_flag) {
    MixSpec spec;
    std::optional<std::size_t> count = count_flag;
    if (ctx.cfg.raw.contains("mix")) {
        const auto& m = ctx.cfg.raw["mix"];
        spec.ratio_a = m.value("ratio_a", spec.ratio_a);
        spec.ratio_b = m.value("ratio_b", spec.ratio_b);
        if (!count && m.contains("count")) count = m["count"].get<std::size_t>();
    }
    if (!ratio_flag.empty()) std::tie(spec.ratio_a, spec.ratio_b) = parse_ratio(ratio_flag);
    spec.seed = derive_seed(ctx.cfg.seed, "mix");
    try {
        spec.validate();
    } catch (const PipelineError& e) {
        throw ConfigError(e.what());
    }
    if (!count) throw ConfigError("mix needs --count (or mix.count in the config)");
    const fs::path a_path = a_flag.empty() ? input_path(ctx, "", "a") : fs::path(a_flag);
    const fs::path b_path = b_flag.empty() ? input_path(ctx, "", "b") : fs::path(b_flag);
    const fs::path out_dir = require_output_dir(ctx);

    JsonlStream a(a_path, DatasetSchema::test);
    JsonlStream b(b_path, DatasetSchema::test);
    const MixResult mixed = pipeline::mix_datasets(a, b, spec, *count, ctx.cfg.length_unit);
    corpus::write_dataset(out_dir / "mixed.jsonl", mixed.samples);

    json sources = json::array();
    for (auto s : mixed.sources) sources.push_back(s == MixSource::a ? "a" : "b");
    json manifest = base_manifest(ctx);
    manifest["ratio"] = {spec.ratio_a, spec.ratio_b};
    manifest["count"] = *count;
    manifest["sources"] = {{"a", {{"path", a_path.string()}, {"stats", corpus::stats_to_json(mixed.stats_a)}}},
                           {"b", {{"path", b_path.string()}, {"stats", corpus::stats_to_json(mixed.stats_b)}}}};
    manifest["emission_sources"] = sources;
    write_json(out_dir / "manifest.json", manifest);
    ctx.out << "mixed " << *count << " samples: " << mixed.stats_a.sample_count << " from a, "
            << mixed.stats_b.sample_count << " from b\n";
    return 0;
}

int cmd_stats(Context& ctx, const std::string& input_flag, const std::string& unit_flag, const std::string& schema_flag) {
    const fs::path input = input_path(ctx, input_flag, "input");
    if (!unit_flag.empty()) ctx.cfg.length_unit = parse_length_unit(unit_flag);
    DatasetSchema schema = DatasetSchema::test;
    if (schema_flag == "train") {
        schema = DatasetSchema::train;
    } else if (!schema_flag.empty() && schema_flag != "test") {
        throw ConfigError("--schema must be train or test");
    }
    const fs::path out_dir = require_output_dir(ctx);
    const auto samples = corpus::load_dataset(input, schema);
    const DatasetStats stats = corpus::compute_stats(samples, ctx.cfg.length_unit);

    json report = corpus::stats_to_json(stats);
    report["length_unit"] = ctx.cfg.length_unit == LengthUnit::chars ? "chars" : "whitespace_tokens";
    std::vector<LikertScores> likert;
    for (const auto& s : samples) {
        if (s.human_scores) likert.push_back(s.human_scores->scores);
    }
    if (!likert.empty()) report["human_scores"] = metrics::likert_to_json(metrics::likert_summary(likert));
    write_json(out_dir / "stats.json", report);
    json manifest = base_manifest(ctx);
    manifest["input"] = {{"path", input.string()}, {"sha256", file_digest(input)}};
    write_json(out_dir / "manifest.json", manifest);

    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", stats.avg_prompt_len);
    ctx.out << "# Sample  # Image  Avg. prompt len.\n"
            << stats.sample_count << "  " << stats.image_count << "  " << buf << "\n";
    return 0;
}

std::vector<double> parse_values(const std::string& s) {
    std::vector<double> out;
    if (s.empty()) return out;
    const auto dots = s.find("..");
    try {
        if (dots != std::string::npos) {
            const double lo = std::stod(s.substr(0, dots));
            const double hi = std::stod(s.substr(dots + 2));
            for (double v = lo; v <= hi; v += 1.0) out.push_back(v);
            return out;
        }
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
    } catch (const std::exception&) {
        throw ConfigError("--values must be a comma list or a range like 1..10");
    }
    return out;
}

int cmd_cost_timing(Context& ctx, const std::string& input_flag, const fs::path& out_dir) {
    auto llm = require_backend(ctx, "llm");
    auto vlm = require_backend(ctx, "vlm");
    const fs::path input = input_path(ctx, input_flag, "input");
    const auto samples = corpus::load_dataset(input, DatasetSchema::test);
    const StageConfig stages = StageConfig::defaults();
    using clock = std::chrono::steady_clock;
    double e2e_ms = 0;
    double staged_ms = 0;
    for (const auto& s : samples) {
        ChatRequest req;
        ChatMessage m{Role::user, {ContentPart::text(s.query)}};
        for (const auto& d : s.documents) {
            for (const auto& e : d.elements) {
                if (e.kind == Element::Kind::text) {
                    m.parts.push_back(ContentPart::text(e.text));
                } else if (const auto* a = s.find_asset(e.image_id)) {
                    m.parts.push_back(ContentPart::text(markup::marker(e.image_id)));
                    m.parts.push_back(ContentPart::image(a->uri));
                }
            }
        }
        req.messages.push_back(std::move(m));
        auto t0 = clock::now();
        vlm->complete(req);
        auto t1 = clock::now();
        pipeline::run_three_stage(*llm, *vlm, s, stages);
        auto t2 = clock::now();
        e2e_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
        staged_ms += std::chrono::duration<double, std::milli>(t2 - t1).count();
    }
    const double n = std::max<double>(1.0, static_cast<double>(samples.size()));
    json timing = {{"samples", samples.size()},
                   {"end_to_end_ms_mean", e2e_ms / n},
                   {"three_stage_ms_mean", staged_ms / n}};
    write_json(out_dir / "timing.json", timing);
    ctx.out << "wall-clock per sample: end-to-end " << e2e_ms / n << " ms, three-stage " << staged_ms / n << " ms\n";
    return 0;
}

int cmd_cost(Context& ctx, const std::string& params_flag, const std::map<std::string, std::optional<double>>& overrides,
             const std::string& vary, const std::string& values_flag, bool timing, const std::string& input_flag) {
    CostParams base;
    try {
        if (!params_flag.empty()) {
            base = costmodel::params_from_json(json::parse(read_file(params_flag)));
        } else if (ctx.cfg.raw.contains("cost") && ctx.cfg.raw["cost"].contains("params")) {
            base = costmodel::params_from_json(ctx.cfg.raw["cost"]["params"]);
        }
        for (const auto& [symbol, value] : overrides) {
            if (value) base.field(symbol) = *value;
        }
        base.validate();
    } catch (const CostError& e) {
        throw ConfigError(e.what());
    } catch (const json::exception& e) {
        throw ConfigError("invalid cost parameters: " + std::string(e.what()));
    }
    const fs::path out_dir = require_output_dir(ctx);
    if (timing) return cmd_cost_timing(ctx, input_flag, out_dir);

    std::string vary_name = vary;
    std::string values_text = values_flag;
    if (ctx.cfg.raw.contains("cost")) {
        const auto& c = ctx.cfg.raw["cost"];
        if (vary_name.empty()) vary_name = c.value("vary", "");
        if (values_text.empty() && c.contains("values")) {
            std::string joined;
            for (const auto& v : c["values"]) joined += (joined.empty() ? "" : ",") + v.dump();
            values_text = joined;
        }
    }
    if (vary_name.empty()) vary_name = "N";
    std::vector<double> values = parse_values(values_text);
    if (values_text.empty()) values.push_back(base.field(vary_name));

    const auto rows = costmodel::sweep(base, vary_name, values);
    const std::string csv = costmodel::to_csv(rows);
    write_file_atomic(out_dir / "cost.csv", csv);
    json manifest = base_manifest(ctx);
    manifest["params"] = costmodel::params_to_json(base);
    manifest["vary"] = vary_name;
    manifest["values"] = values;
    write_json(out_dir / "manifest.json", manifest);
    ctx.out << csv;
    return 0;
}

std::pair<std::vector<double>, std::vector<double>> read_columns(const fs::path& path, const std::string& x,
                                                                 const std::string& y) {
    const std::string content = read_file(path);
    std::vector<double> xs;
    std::vector<double> ys;
    std::stringstream ss(content);
    std::string line;
    auto number = [&](const std::string& cell, std::size_t row) {
        try {
            std::size_t used = 0;
            const double v = std::stod(cell, &used);
            if (trim(cell.substr(used)).empty()) return v;
        } catch (const std::exception&) {
        }
        throw ConfigError(path.string() + ": row " + std::to_string(row) + ": '" + cell + "' is not a number");
    };
    if (path.extension() == ".jsonl") {
        std::size_t row = 0;
        while (std::getline(ss, line)) {
            ++row;
            if (is_blank(line)) continue;
            const json j = json::parse(line);
            if (!j.contains(x) || !j.contains(y) || !j[x].is_number() || !j[y].is_number()) {
                throw ConfigError(path.string() + ": row " + std::to_string(row) + " lacks numeric " + x + "/" + y);
            }
            xs.push_back(j[x].get<double>());
            ys.push_back(j[y].get<double>());
        }
        return {xs, ys};
    }
    auto split = [](const std::string& l) {
        std::vector<std::string> cells;
        std::stringstream ls(l);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(trim(cell));
        return cells;
    };
    if (!std::getline(ss, line)) throw ConfigError(path.string() + ": empty file");
    const auto header = split(line);
    const auto xi = std::find(header.begin(), header.end(), x) - header.begin();
    const auto yi = std::find(header.begin(), header.end(), y) - header.begin();
    if (xi == static_cast<long>(header.size()) || yi == static_cast<long>(header.size())) {
        throw ConfigError(path.string() + ": header lacks column " + x + " or " + y);
    }
    std::size_t row = 1;
    while (std::getline(ss, line)) {
        ++row;
        if (is_blank(line)) continue;
        const auto cells = split(line);
        if (cells.size() != header.size()) throw ConfigError(path.string() + ": row " + std::to_string(row) + " has wrong width");
        xs.push_back(number(cells[static_cast<std::size_t>(xi)], row));
        ys.push_back(number(cells[static_cast<std::size_t>(yi)], row));
    }
    return {xs, ys};
}

int cmd_correlate(Context& ctx, const std::string& input_flag, std::string x, std::string y,
                  std::optional<std::size_t> permutations) {
    const auto section = ctx.cfg.raw.value("correlate", json::object());
    const fs::path input = input_flag.empty() ? input_path(ctx, "", "correlate") : fs::path(input_flag);
    if (x.empty()) x = section.value("x", "");
    if (y.empty()) y = section.value("y", "");
    if (x.empty() || y.empty()) throw ConfigError("correlate needs --x and --y column names");
    const std::size_t perms = permutations.value_or(section.value("permutations", std::size_t{10000}));
    const fs::path out_dir = require_output_dir(ctx);
    const auto [xs, ys] = read_columns(input, x, y);
    const std::uint64_t seed = derive_seed(ctx.cfg.seed, "correlate");
    const PearsonResult r = metrics::pearson(xs, ys, perms, seed);

    json report = {{"x", x}, {"y", y}, {"n", xs.size()}, {"r", r.r}, {"p_two_sided", r.p_two_sided},
                   {"permutations", perms}, {"seed", seed}};
    write_json(out_dir / "correlation.json", report);
    json manifest = base_manifest(ctx);
    manifest["input"] = {{"path", input.string()}, {"sha256", file_digest(input)}};
    write_json(out_dir / "manifest.json", manifest);
    char buf[128];
    std::snprintf(buf, sizeof buf, "r = %.6f  p = %.6f  (n = %zu, %zu permutations)\n", r.r, r.p_two_sided,
                  xs.size(), perms);
    ctx.out << buf;
    return 0;
}

void on_signal(int) { stop_requested().store(true); }

int cmd_serve(Context& ctx, std::string data_dir, std::string host, std::optional<int> port, std::string ui_dir,
              const std::string& import_path) {
    const auto section = ctx.cfg.raw.value("serve", json::object());
    if (data_dir.empty() && section.contains("data_dir")) data_dir = ctx.cfg.resolve(section["data_dir"]).string();
    if (data_dir.empty()) throw ConfigError("serve needs --data-dir (or serve.data_dir)");
    if (host.empty()) host = section.value("host", "127.0.0.1");
    if (!port) port = section.value("port", 8080);
    if (ui_dir.empty() && section.contains("ui_dir")) ui_dir = ctx.cfg.resolve(section["ui_dir"]).string();

    AnnotationStore store(data_dir);
    if (!import_path.empty()) {
        const auto added = store.import_samples(corpus::load_dataset(import_path, DatasetSchema::test));
        ctx.out << "imported " << added << " samples\n";
    }
    AnnotationServer server(store, {host, *port, ui_dir, 50});
    const int bound = server.bind();
    ctx.out << "serving on http://" << host << ":" << bound << "\n" << std::flush;

    stop_requested().store(false);
    auto previous_term = std::signal(SIGTERM, on_signal);
    auto previous_int = std::signal(SIGINT, on_signal);
    std::jthread watcher([&](std::stop_token st) {
        while (!st.stop_requested() && !stop_requested().load()) {
            std::this_thread::sleep_for(std::chrono::milliseconds(50));
        }
        server.stop();
    });
    server.run();
    watcher.request_stop();
    watcher.join();
    std::signal(SIGTERM, previous_term);
    std::signal(SIGINT, previous_int);
    store.flush();
    ctx.out << "stopped; journal flushed at seq " << store.last_seq() << "\n";
    return 0;
}

json error_report(const std::string& kind, const std::string& message) {
    return {{"error", kind}, {"message", message}};
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Contextual image reference toolkit: data construction, evaluation and curation"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string config_path;
    std::string output_dir;
    std::optional<std::uint64_t> seed;
    app.add_option("--config", config_path, "JSON run configuration");
    app.add_option("--output-dir", output_dir, "Directory for outputs and the run manifest");
    app.add_option("--seed", seed, "Override the configured seed");

    std::string input;
    std::string stages;
    auto* generate = app.add_subcommand("generate", "Run the three-stage construction pipeline");
    generate->add_option("--input", input, "Input samples (JSONL)");
    generate->add_option("--stages", stages, "Stage template directory");

    std::string aggregation;
    auto* eval_position = app.add_subcommand("eval-position", "Precision / Recall3 / F1 of image placements");
    eval_position->add_option("--input", input, "Labeled test samples (JSONL)");
    eval_position->add_option("--aggregation", aggregation, "micro (default) or macro");

    auto* eval_text = app.add_subcommand("eval-text", "LLM-as-judge text score against reference answers");
    eval_text->add_option("--input", input, "Test samples with responses (JSONL)");

    std::string mix_a;
    std::string mix_b;
    std::string ratio;
    std::optional<std::size_t> count;
    auto* mix = app.add_subcommand("mix", "Seeded interleaving of two datasets");
    mix->add_option("--a", mix_a, "First source (JSONL)");
    mix->add_option("--b", mix_b, "Second source (JSONL)");
    mix->add_option("--ratio", ratio, "A:B, e.g. 1:4");
    mix->add_option("--count", count, "Number of samples to emit");

    std::string unit;
    std::string schema;
    auto* stats = app.add_subcommand("stats", "Sample / image counts and average prompt length");
    stats->add_option("--input", input, "Dataset (JSONL)");
    stats->add_option("--length-unit", unit, "chars (default) or whitespace_tokens");
    stats->add_option("--schema", schema, "train or test (default)");

    std::string params;
    std::string vary;
    std::string values;
    bool timing = false;
    std::map<std::string, std::optional<double>> overrides{{"N", {}}, {"L", {}}, {"M", {}},
                                                           {"P", {}}, {"R", {}}, {"C", {}}};
    auto* cost = app.add_subcommand("cost", "End-to-end vs three-stage inference cost");
    cost->add_option("--params", params, "JSON file with N, L, M, P, R, C");
    for (auto& [symbol, value] : overrides) cost->add_option("--" + symbol, value, "Override " + symbol);
    cost->add_option("--vary", vary, "Parameter to sweep (N, L, M, P, R, C)");
    cost->add_option("--values", values, "Comma list or range a..b");
    cost->add_flag("--timing", timing, "Measure wall-clock of configured backends instead");
    cost->add_option("--input", input, "Dataset for --timing");

    std::string x;
    std::string y;
    std::optional<std::size_t> permutations;
    auto* correlate = app.add_subcommand("correlate", "Pearson r with a permutation p-value");
    correlate->add_option("--input", input, "CSV with a header row, or JSONL");
    correlate->add_option("--x", x, "First column");
    correlate->add_option("--y", y, "Second column");
    correlate->add_option("--permutations", permutations, "Number of permutations (default 10000)");

    std::string data_dir;
    std::string host;
    std::optional<int> port;
    std::string ui_dir;
    std::string import_path;
    auto* serve = app.add_subcommand("serve", "Annotation REST service");
    serve->add_option("--data-dir", data_dir, "Journal and snapshot directory");
    serve->add_option("--host", host, "Bind address (default 127.0.0.1)");
    serve->add_option("--port", port, "Port (default 8080, 0 = any)");
    serve->add_option("--ui-dir", ui_dir, "Built UI bundle to serve under /");
    serve->add_option("--import", import_path, "Samples to import on start (JSONL)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    Context ctx{out, err, {}, app.get_subcommands().front()->get_name()};
    try {
        ctx.cfg = load_config(config_path);
        if (seed) {
            ctx.cfg.seed = *seed;
            ctx.cfg.raw["seed"] = *seed;
        }
        if (!output_dir.empty()) ctx.cfg.output_dir = fs::path(output_dir);

        if (*generate) return cmd_generate(ctx, input, stages);
        if (*eval_position) return cmd_eval_position(ctx, input, aggregation);
        if (*eval_text) return cmd_eval_text(ctx, input);
        if (*mix) return cmd_mix(ctx, mix_a, mix_b, ratio, count);
        if (*stats) return cmd_stats(ctx, input, unit, schema);
        if (*cost) return cmd_cost(ctx, params, overrides, vary, values, timing, input);
        if (*correlate) return cmd_correlate(ctx, input, x, y, permutations);
        if (*serve) return cmd_serve(ctx, data_dir, host, port, ui_dir, import_path);
    } catch (const ConfigError& e) {
        err << error_report("config", e.what()).dump() << "\n";
        return 2;
    } catch (const std::exception& e) {
        const json report = error_report("fatal", e.what());
        err << report.dump() << "\n";
        if (ctx.cfg.output_dir) {
            try {
                fs::create_directories(*ctx.cfg.output_dir);
                write_json(*ctx.cfg.output_dir / "error.json", report);
            } catch (...) {
            }
        }
        return 1;
    }
    return 2;
}

}  // namespace imgref::cli
