// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "imgref/backend.hpp"
#include "imgref/corpus.hpp"

namespace imgref {

inline constexpr double kJudgeScaleMax = 10.0;

class JudgeError : public Error {
public:
    using Error::Error;
};

struct JudgeVerdict {
    std::string sample_id;
    std::optional<double> score;  // empty when every attempt was unparseable
    std::string raw_completion;
    int attempts = 0;
};

struct JudgeConfig {
    int max_retries = 2;  // re-asks after an unparseable completion
    double temperature = 0.0;
    int max_output = 1024;
    int max_concurrent = 1;
};

struct JudgeSummary {
    std::optional<double> mean;
    std::vector<JudgeVerdict> verdicts;  // input order
    std::size_t excluded = 0;            // unparseable after retries
    std::size_t skipped = 0;             // no response or no reference answer
    std::vector<std::string> skipped_ids;
};

namespace judge {

/// Deterministic judging prompt. Throws JudgeError if `candidate_text` still
/// contains image markers.
std::string build_judge_prompt(const std::string& query, const std::string& reference_answer,
                               const std::string& candidate_text);

/// Value of the last "Score: X" in the completion. Throws JudgeError when no
/// score is present or the last one lies outside [0, 10].
double parse_judge_score(const std::string& completion);

JudgeSummary judge_dataset(ModelBackend& backend, const std::vector<Sample>& samples,
                           const JudgeConfig& config = {});

nlohmann::json verdict_to_json(const JudgeVerdict& v);
nlohmann::json summary_to_json(const JudgeSummary& s);

/// verdicts.jsonl plus text_report.json under `dir`.
void write_report(const JudgeSummary& summary, const std::filesystem::path& dir);

}  // namespace judge
}  // namespace imgref
