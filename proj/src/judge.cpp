// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#include "imgref/judge.hpp"

#include <regex>

namespace imgref::judge {

using nlohmann::json;

namespace {

constexpr const char* kInstruction =
    "You are grading the text of an answer produced by an assistant. Compare the candidate "
    "answer with the reference answer for the user's question. Judge correctness, completeness, "
    "relevance and clarity. Minor wording differences from the reference are acceptable.\n"
    "Briefly explain your judgement, then finish with a final line of the form\n"
    "Score: <0-10>\n"
    "where 0 is unusable and 10 is as good as or better than the reference.";

constexpr const char* kReminder =
    "Your previous reply did not end with a valid score line. Reply again and finish with "
    "exactly one line of the form\nScore: <0-10>";

}  // namespace

std::string build_judge_prompt(const std::string& query, const std::string& reference_answer,
                               const std::string& candidate_text) {
    if (markup::contains_marker(candidate_text)) {
        throw JudgeError("candidate text must have image markers stripped before judging");
    }
    std::string prompt = kInstruction;
    prompt += "\n\n[Question]\n";
    prompt += query;
    prompt += "\n\n[Reference answer]\n";
    prompt += reference_answer;
    prompt += "\n\n[Candidate answer]\n";
    prompt += candidate_text;
    prompt += "\n[End of candidate answer]";
    return prompt;
}

double parse_judge_score(const std::string& completion) {
    static const std::regex kScore(R"([Ss]core\s*:\s*\**\s*(-?[0-9]+(?:\.[0-9]+)?))");
    std::optional<std::string> last;
    for (auto it = std::sregex_iterator(completion.begin(), completion.end(), kScore);
         it != std::sregex_iterator(); ++it) {
        last = (*it)[1].str();
    }
    if (!last) throw JudgeError("no parsable 'Score: X' in judge completion");
    const double value = std::stod(*last);
    if (value < 0.0 || value > kJudgeScaleMax) {
        throw JudgeError("judge score " + *last + " outside [0, 10]");
    }
    return value;
}

JudgeSummary judge_dataset(ModelBackend& backend, const std::vector<Sample>& samples, const JudgeConfig& config) {
    JudgeSummary summary;
    std::vector<std::optional<JudgeVerdict>> slots(samples.size());

    parallel_for(samples.size(), static_cast<std::size_t>(std::max(config.max_concurrent, 1)), [&](std::size_t i) {
        const Sample& s = samples[i];
        if (!s.response || s.reference_text.empty()) return;
        const std::string reference = [&] {
            std::string r;
            for (const auto& p : s.reference_text) {
                if (!r.empty()) r += "\n\n";
                r += p;
            }
            return r;
        }();
        ChatRequest request;
        request.temperature = config.temperature;
        request.max_output = config.max_output;
        request.messages.push_back(
            {Role::user, {ContentPart::text(build_judge_prompt(s.query, reference, markup::text_only(*s.response)))}});

        JudgeVerdict verdict;
        verdict.sample_id = s.id;
        for (int attempt = 0; attempt <= config.max_retries; ++attempt) {
            verdict.raw_completion = backend.complete(request);
            verdict.attempts = attempt + 1;
            try {
                verdict.score = parse_judge_score(verdict.raw_completion);
                break;
            } catch (const JudgeError&) {
                request.messages.push_back({Role::assistant, {ContentPart::text(verdict.raw_completion)}});
                request.messages.push_back({Role::user, {ContentPart::text(kReminder)}});
            }
        }
        slots[i] = std::move(verdict);
    });

    double sum = 0.0;
    std::size_t scored = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!slots[i]) {
            ++summary.skipped;
            summary.skipped_ids.push_back(samples[i].id);
            continue;
        }
        if (slots[i]->score) {
            sum += *slots[i]->score;
            ++scored;
        } else {
            ++summary.excluded;
        }
        summary.verdicts.push_back(std::move(*slots[i]));
    }
    if (scored > 0) summary.mean = sum / static_cast<double>(scored);
    return summary;
}

json verdict_to_json(const JudgeVerdict& v) {
    return {{"sample_id", v.sample_id},
            {"score", v.score ? json(*v.score) : json(nullptr)},
            {"raw_completion", v.raw_completion},
            {"attempts", v.attempts}};
}

json summary_to_json(const JudgeSummary& s) {
    return {{"mean", s.mean ? json(*s.mean) : json(nullptr)},
            {"scale", {0, kJudgeScaleMax}},
            {"judged", s.verdicts.size()},
            {"excluded", s.excluded},
            {"skipped", s.skipped},
            {"skipped_ids", s.skipped_ids}};
}

void write_report(const JudgeSummary& summary, const std::filesystem::path& dir) {
    std::string lines;
    for (const auto& v : summary.verdicts) {
        lines += verdict_to_json(v).dump();
        lines += '\n';
    }
    write_file_atomic(dir / "verdicts.jsonl", lines);
    write_file_atomic(dir / "text_report.json", summary_to_json(summary).dump(2) + "\n");
}

}  // namespace imgref::judge
