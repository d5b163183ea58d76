// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include "imgref/judge.hpp"
#include "test_support.hpp"

using namespace imgref;
using imgref::testing::make_sample;

namespace {

Sample answered(const std::string& id, const std::string& answer) {
    Sample s = make_sample(id, {"The reference answer."}, 1, "Question " + id);
    s.response = ResponseDoc{{Paragraph{answer}, ImageRef{1}}};
    return s;
}

}  // namespace

TEST_SUITE("judge") {

TEST_CASE("prompt is deterministic and contains every section") {
    const auto a = judge::build_judge_prompt("Q?", "Ref.", "Cand.");
    CHECK(a == judge::build_judge_prompt("Q?", "Ref.", "Cand."));
    CHECK(a.find("[Question]\nQ?") != std::string::npos);
    CHECK(a.find("[Reference answer]\nRef.") != std::string::npos);
    CHECK(a.find("[Candidate answer]\nCand.\n[End of candidate answer]") != std::string::npos);
    CHECK(a.find("Score: <0-10>") != std::string::npos);

    const auto empty = judge::build_judge_prompt("Q?", "Ref.", "");
    CHECK(empty.find("[Candidate answer]\n\n[End of candidate answer]") != std::string::npos);
    CHECK_THROWS_AS(judge::build_judge_prompt("Q?", "Ref.", "Text\n<image:1>\nMore"), JudgeError);
}

TEST_CASE("score parsing") {
    CHECK(judge::parse_judge_score("Looks right.\nScore: 8") == 8.0);
    CHECK(judge::parse_judge_score("Score: 7.5 because ... Score: 6") == 6.0);
    CHECK(judge::parse_judge_score("score:**9**") == 9.0);
    CHECK_THROWS_AS(judge::parse_judge_score("great answer"), JudgeError);
    CHECK_THROWS_AS(judge::parse_judge_score("Score: 11"), JudgeError);
    CHECK_THROWS_AS(judge::parse_judge_score("Score: -1"), JudgeError);
    CHECK_THROWS_AS(judge::parse_judge_score("Score: 10.5"), JudgeError);
}

TEST_CASE("parsed scores always lie on the scale") {
    SplitMix64 rng(8);
    for (int i = 0; i < 500; ++i) {
        const double v = rng.uniform() * 30 - 10;
        char buf[64];
        std::snprintf(buf, sizeof buf, "Score: %.2f", v);
        try {
            const double s = judge::parse_judge_score(buf);
            CHECK(s >= 0.0);
            CHECK(s <= 10.0);
        } catch (const JudgeError&) {
            CHECK((v < 0.0 || v > 10.0));
        }
    }
}

TEST_CASE("mean over a scripted judge") {
    ScriptedBackend tens([](const ChatRequest&) { return "Fine.\nScore: 10"; });
    const auto all = judge::judge_dataset(tens, {answered("a", "x"), answered("b", "y")});
    CHECK(*all.mean == 10.0);

    ScriptedBackend by_question([](const ChatRequest& r) {
        return r.all_text().find("Question a") != std::string::npos ? "Score: 6" : "Score: 8";
    });
    const auto mixed = judge::judge_dataset(by_question, {answered("a", "x"), answered("b", "y")});
    CHECK(*mixed.mean == doctest::Approx(7.0));
    REQUIRE(mixed.verdicts.size() == 2);
    CHECK(mixed.verdicts[0].sample_id == "a");
    CHECK(mixed.verdicts[0].score == 6.0);
    CHECK(mixed.verdicts[0].attempts == 1);
}

TEST_CASE("candidate text reaches the judge without markers") {
    ScriptedBackend judge_backend([](const ChatRequest&) { return "Score: 5"; });
    judge::judge_dataset(judge_backend, {answered("a", "Candidate words")});
    const auto text = judge_backend.requests().at(0).all_text();
    CHECK(text.find("Candidate words") != std::string::npos);
    CHECK(text.find("<image:") == std::string::npos);
    CHECK(judge_backend.requests().at(0).image_count() == 0);
}

TEST_CASE("unparseable completions are retried then excluded") {
    int calls = 0;
    ScriptedBackend flaky([&](const ChatRequest&) { return ++calls == 1 ? "no idea" : "Score: 4"; });
    const auto recovered = judge::judge_dataset(flaky, {answered("a", "x")});
    CHECK(recovered.verdicts[0].attempts == 2);
    CHECK(*recovered.mean == 4.0);
    CHECK(flaky.requests().at(1).messages.size() == 3);

    ScriptedBackend hopeless([](const ChatRequest&) { return "no idea"; });
    JudgeConfig cfg;
    cfg.max_retries = 2;
    const auto out = judge::judge_dataset(hopeless, {answered("a", "x"), answered("b", "y")}, cfg);
    CHECK(hopeless.call_count() == 6);
    CHECK(out.excluded == 2);
    CHECK_FALSE(out.mean.has_value());
    CHECK(out.verdicts[0].attempts == 3);
}

TEST_CASE("samples without a response or reference are skipped") {
    ScriptedBackend b([](const ChatRequest&) { return "Score: 9"; });
    Sample no_ref = answered("nr", "x");
    no_ref.reference_text.clear();
    Sample no_resp = make_sample("nresp", {"Ref."}, 0);
    const auto out = judge::judge_dataset(b, {answered("a", "x"), no_ref, no_resp});
    CHECK(out.skipped == 2);
    CHECK(out.skipped_ids == std::vector<std::string>{"nr", "nresp"});
    CHECK(*out.mean == 9.0);
}

TEST_CASE("backend failure propagates") {
    ScriptedBackend broken([](const ChatRequest&) -> std::string {
        throw BackendError(BackendError::Kind::exhausted, "down");
    });
    CHECK_THROWS_AS(judge::judge_dataset(broken, {answered("a", "x")}), BackendError);
}

TEST_CASE("judging is reproducible and order independent") {
    ScriptedBackend b([](const ChatRequest& r) {
        const auto t = r.all_text();
        return "Score: " + std::to_string(t.size() % 11);
    });
    std::vector<Sample> samples;
    for (int i = 0; i < 20; ++i) samples.push_back(answered("s" + std::to_string(i), std::string(i, 'w')));
    JudgeConfig cfg;
    cfg.max_concurrent = 4;
    const auto a = judge::judge_dataset(b, samples, cfg);
    const auto again = judge::judge_dataset(b, samples, cfg);
    CHECK(judge::summary_to_json(a).dump() == judge::summary_to_json(again).dump());
    std::reverse(samples.begin(), samples.end());
    const auto reversed = judge::judge_dataset(b, samples, cfg);
    CHECK(*reversed.mean == doctest::Approx(*a.mean).epsilon(1e-12));
    CHECK(reversed.verdicts.front().sample_id == "s19");
}

TEST_CASE("report files") {
    testing::TempDir dir;
    ScriptedBackend b([](const ChatRequest&) { return "Score: 3"; });
    const auto out = judge::judge_dataset(b, {answered("a", "x")});
    judge::write_report(out, dir.path());
    const auto report = nlohmann::json::parse(read_file(dir / "text_report.json"));
    CHECK(report["mean"] == 3.0);
    const auto verdict = nlohmann::json::parse(read_file(dir / "verdicts.jsonl"));
    CHECK(verdict["sample_id"] == "a");
}

}  // TEST_SUITE
