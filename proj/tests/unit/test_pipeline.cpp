// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include "imgref/pipeline.hpp"
#include "test_support.hpp"

using namespace imgref;
using imgref::testing::make_sample;

namespace {

std::string last_user(const ChatRequest& r) { return r.messages.back().text(); }

bool is_stage(const ChatRequest& r, const std::string& prefix) { return last_user(r).rfind(prefix, 0) == 0; }

// Scripted LLM/VLM pair for the three stages, keyed on the request shape.
std::string scripted_model(const ChatRequest& r) {
    const std::string text = last_user(r);
    if (is_stage(r, "Images:\n")) {
        const auto answer = text.substr(text.find("\nAnswer:\n") + 9);
        const auto paragraphs = markup::split_paragraphs(answer);
        return paragraphs.at(0) + "\n\n<image:2>\n\n" + paragraphs.at(1);
    }
    if (is_stage(r, "Description:\n")) return "a portrait of Einstein in his later years";
    if (text == "Describe the image.") return "a portrait of an elderly man";
    return "First paragraph.\n\nSecond paragraph.";
}

Sample einstein_sample() {
    Sample s = make_sample("e", {"Albert Einstein in 1947.", "He lived in Princeton."}, 2, "Who is this?");
    return s;
}

std::vector<Sample> numbered(const std::string& prefix, int n) {
    std::vector<Sample> out;
    for (int i = 0; i < n; ++i) out.push_back(make_sample(prefix + std::to_string(i), {"text"}, 0));
    return out;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("stage 1 returns the scripted answer and never sees images") {
    ScriptedBackend llm([](const ChatRequest&) { return "A canned answer."; });
    const Sample s = make_sample("five", {"p1", "p2", "p3", "p4", "p5"}, 5);
    const auto cfg = StageConfig::defaults();
    CHECK(pipeline::generate_text_response(llm, s, cfg) == "A canned answer.");
    const auto req = llm.requests().at(0);
    CHECK(req.image_count() == 0);
    CHECK(req.all_text().find("<image:") == std::string::npos);
    CHECK(req.all_text().find("p5") != std::string::npos);
    CHECK(req.all_text().find(s.query) != std::string::npos);
}

TEST_CASE("stage 1 with no documents") {
    ScriptedBackend llm([](const ChatRequest&) { return "ok"; });
    Sample s;
    s.id = "q";
    s.query = "Only the question";
    const auto req = pipeline::text_response_request(s, StageConfig::defaults());
    CHECK(last_user(req) == "Question:\nOnly the question");
    CHECK(pipeline::generate_text_response(llm, s, StageConfig::defaults()) == "ok");
}

TEST_CASE("stage 1 strips stray markers and rejects empty output") {
    ScriptedBackend markers([](const ChatRequest&) { return "Text.\n\n<image:1>\n\nMore."; });
    const Sample s = make_sample("m", {"p"}, 1);
    CHECK(pipeline::generate_text_response(markers, s, StageConfig::defaults()) == "Text.\n\nMore.");
    ScriptedBackend blank([](const ChatRequest&) { return "  \n"; });
    CHECK_THROWS_AS(pipeline::generate_text_response(blank, s, StageConfig::defaults()), BackendError);
}

TEST_CASE("standalone captions see only the image") {
    ScriptedBackend vlm([](const ChatRequest&) { return "a portrait of an elderly man"; });
    const Sample s = einstein_sample();
    const ImageAsset& img = *s.find_asset(1);
    const auto cfg = StageConfig::defaults();
    CHECK(pipeline::caption_standalone(vlm, img, cfg) == "a portrait of an elderly man");
    const auto req = vlm.requests().at(0);
    CHECK(req.image_count() == 1);
    CHECK(req.messages.front().text() == cfg.caption_standalone.instruction);
    CHECK(req.all_text().find("Einstein") == std::string::npos);

    ScriptedBackend empty([](const ChatRequest&) { return ""; });
    CHECK_THROWS_AS(pipeline::caption_standalone(empty, img, cfg), BackendError);
}

TEST_CASE("contextual captions combine description, context and exemplars") {
    ScriptedBackend vlm([](const ChatRequest& r) {
        const auto t = r.messages.back().text();
        if (t.find("portrait") != std::string::npos && t.find("Einstein") != std::string::npos) {
            return std::string("a portrait of Einstein in his later years");
        }
        return std::string("a portrait of an elderly man");
    });
    Sample s = einstein_sample();
    ImageAsset img = *s.find_asset(1);
    img.caption_standalone = "a portrait of an elderly man";
    StageConfig cfg = StageConfig::defaults();
    cfg.caption_contextual.exemplars = {{"Description:\nA bridge\n\nContext:\nGolden Gate", "The Golden Gate Bridge", {}},
                                        {"Description:\nA tower\n\nContext:\nParis", "The Eiffel Tower", {}}};
    const auto context = pipeline::image_context(s, 1);
    CHECK(context.find("Einstein") != std::string::npos);
    CHECK(pipeline::caption_contextual(vlm, img, context, cfg) == "a portrait of Einstein in his later years");

    const auto req = vlm.requests().at(0);
    REQUIRE(req.messages.size() == 6);
    CHECK(req.messages[1].text().find("Golden Gate") != std::string::npos);
    CHECK(req.messages[2].text() == "The Golden Gate Bridge");
    CHECK(req.messages[3].text().find("Paris") != std::string::npos);
    CHECK(req.messages[4].text() == "The Eiffel Tower");
    CHECK(req.messages[5].text().find("a portrait of an elderly man") != std::string::npos);
    CHECK(req.messages[5].image_count() == 1);

    CHECK(pipeline::caption_contextual(vlm, img, "A quiet lake at dawn.", cfg) == "a portrait of an elderly man");

    ScriptedBackend silent([](const ChatRequest&) { return " "; });
    CHECK(pipeline::caption_contextual(silent, img, "ctx", cfg) == "a portrait of an elderly man");
    ImageAsset uncaptioned = *s.find_asset(2);
    CHECK_THROWS_AS(pipeline::caption_contextual(vlm, uncaptioned, "ctx", cfg), PipelineError);
}

TEST_CASE("insertion outcomes") {
    const std::string text = "P1\n\nP2";
    const std::vector<std::pair<ImageId, std::string>> captions = {{1, "one"}, {2, "two"}, {3, "three"}};
    const auto cfg = StageConfig::defaults();

    ScriptedBackend unchanged([&](const ChatRequest&) { return text; });
    const auto none = pipeline::insert_images(unchanged, text, captions, cfg);
    CHECK(none.doc.image_ids().empty());
    CHECK_FALSE(none.warning);

    ScriptedBackend placed([](const ChatRequest&) { return "P1\n\n<image:2>\n\nP2"; });
    const auto one = pipeline::insert_images(placed, text, captions, cfg);
    CHECK(one.doc == ResponseDoc{{Paragraph{"P1"}, ImageRef{2}, Paragraph{"P2"}}});
    CHECK(one.attempts == 1);
    const auto req_text = placed.requests().at(0).all_text();
    CHECK(req_text.find("[2] two") != std::string::npos);
    CHECK(placed.requests().at(0).image_count() == 0);

    ScriptedBackend wrong([](const ChatRequest&) { return "P1\n\n<image:9>\n\nP2"; });
    const auto fallback = pipeline::insert_images(wrong, text, captions, cfg);
    CHECK(fallback.warning);
    CHECK(fallback.attempts == cfg.max_retries + 1);
    CHECK(wrong.call_count() == static_cast<std::size_t>(cfg.max_retries + 1));
    CHECK(fallback.doc == ResponseDoc{{Paragraph{"P1"}, Paragraph{"P2"}}});
    CHECK(wrong.requests().back().all_text().find("rejected") != std::string::npos);
}

TEST_CASE("insertion retries then accepts a corrected answer") {
    int calls = 0;
    ScriptedBackend llm([&](const ChatRequest&) {
        return ++calls == 1 ? std::string("P1 changed\n\n<image:1>\n\nP2") : std::string("<image:1>\n\nP1\n\nP2");
    });
    const auto out = pipeline::insert_images(llm, "P1\n\nP2", {{1, "one"}}, StageConfig::defaults());
    CHECK_FALSE(out.warning);
    CHECK(out.attempts == 2);
    CHECK(out.doc == ResponseDoc{{ImageRef{1}, Paragraph{"P1"}, Paragraph{"P2"}}});
}

TEST_CASE("insertion output always parses with the sample's image count") {
    SplitMix64 rng(4);
    for (int t = 0; t < 100; ++t) {
        const int n = 1 + static_cast<int>(rng.bounded(4));
        std::vector<std::pair<ImageId, std::string>> captions;
        for (int i = 1; i <= n; ++i) captions.emplace_back(i, "c");
        ScriptedBackend chaotic([&](const ChatRequest&) {
            std::string out = "A\n\nB";
            const auto id = 1 + rng.bounded(6);
            const auto where = rng.bounded(3);
            const std::string m = "<image:" + std::to_string(id) + ">";
            if (where == 0) return m + "\n\n" + out;
            if (where == 1) return std::string("A\n\n") + m + "\n\nB";
            return out + "\n\n" + m;
        });
        const auto res = pipeline::insert_images(chaotic, "A\n\nB", captions, StageConfig::defaults());
        CHECK(markup::parse(markup::render(res.doc), n) == res.doc);
        CHECK(res.doc.paragraphs() == std::vector<std::string>{"A", "B"});
    }
}

TEST_CASE("three stages compose deterministically") {
    ScriptedBackend llm(scripted_model, "llm");
    ScriptedBackend vlm(scripted_model, "vlm");
    const Sample s = einstein_sample();
    const auto cfg = StageConfig::defaults();
    const Sample a = pipeline::run_three_stage(llm, vlm, s, cfg);
    const Sample b = pipeline::run_three_stage(llm, vlm, s, cfg);
    CHECK(corpus::to_jsonl({a}) == corpus::to_jsonl({b}));
    CHECK(a.text_response == "First paragraph.\n\nSecond paragraph.");
    CHECK(a.response == ResponseDoc{{Paragraph{"First paragraph."}, ImageRef{2}, Paragraph{"Second paragraph."}}});
    CHECK(a.find_asset(1)->caption_standalone == "a portrait of an elderly man");
    CHECK(a.find_asset(1)->caption_contextual == "a portrait of Einstein in his later years");
    CHECK(corpus::validate_sample(a).empty());

    for (const auto& req : vlm.requests()) {
        CHECK(req.all_text().find("First paragraph.") == std::string::npos);
    }
    for (const auto& req : llm.requests()) CHECK(req.image_count() == 0);
}

TEST_CASE("zero-image samples skip captioning and insertion") {
    ScriptedBackend llm(scripted_model, "llm");
    ScriptedBackend vlm([](const ChatRequest&) -> std::string { throw std::logic_error("vlm must not be called"); });
    const Sample s = make_sample("plain", {"x"}, 0);
    const Sample out = pipeline::run_three_stage(llm, vlm, s, StageConfig::defaults());
    CHECK(markup::render(*out.response) == *out.text_response);
    CHECK(llm.call_count() == 1);
    CHECK(vlm.call_count() == 0);
}

TEST_CASE("stage failures name the stage") {
    const Sample s = einstein_sample();
    const auto cfg = StageConfig::defaults();
    auto failing_on = [](const std::string& prefix) {
        return [prefix](const ChatRequest& r) {
            if (r.messages.back().text().rfind(prefix, 0) == 0) {
                throw BackendError(BackendError::Kind::exhausted, "down");
            }
            return scripted_model(r);
        };
    };
    const std::pair<const char*, const char*> cases[] = {{"Question:", pipeline::kStageText},
                                                         {"Describe the image.", pipeline::kStageCaptionStandalone},
                                                         {"Description:", pipeline::kStageCaptionContextual},
                                                         {"Images:", pipeline::kStageInsertion}};
    for (const auto& [prefix, stage] : cases) {
        ScriptedBackend llm(failing_on(prefix), "llm");
        ScriptedBackend vlm(failing_on(prefix), "vlm");
        try {
            pipeline::run_three_stage(llm, vlm, s, cfg);
            FAIL("expected StageError");
        } catch (const StageError& e) {
            CHECK(e.stage() == stage);
        }
    }
}

TEST_CASE("parallel captioning matches serial") {
    ScriptedBackend llm(scripted_model, "llm");
    ScriptedBackend vlm([](const ChatRequest& r) { return "caption for " + r.messages.back().parts.back().value; },
                        "vlm");
    std::vector<std::string> paragraphs;
    for (int i = 0; i < 8; ++i) paragraphs.push_back("para " + std::to_string(i));
    const Sample s = make_sample("par", paragraphs, 8);
    StageConfig serial = StageConfig::defaults();
    StageConfig parallel = serial;
    parallel.max_concurrent = 4;
    CHECK(corpus::to_jsonl({pipeline::run_three_stage(llm, vlm, s, serial)}) ==
          corpus::to_jsonl({pipeline::run_three_stage(llm, vlm, s, parallel)}));
}

TEST_CASE("stage config loads from a directory") {
    testing::TempDir dir;
    write_file_atomic(dir / "pipeline.json", R"({"max_retries": 4, "temperature": 0.2})");
    write_file_atomic(dir / "insertion.json",
                      R"({"instruction": "Insert.", "exemplars": [{"input": "i", "output": "o"}]})");
    const auto cfg = StageConfig::load(dir.path());
    CHECK(cfg.max_retries == 4);
    CHECK(cfg.temperature == 0.2);
    CHECK(cfg.insertion.instruction == "Insert.");
    CHECK(cfg.insertion.exemplars.size() == 1);
    CHECK(cfg.text_response.instruction == StageConfig::defaults().text_response.instruction);

    write_file_atomic(dir / "pipeline.json", R"({"max_retries": -1})");
    CHECK_THROWS(StageConfig::load(dir.path()));
    const auto shipped = StageConfig::load(std::string(IMGREF_FIXTURES) + "/../../config/stages");
    CHECK_NOTHROW(shipped.validate());
}

TEST_CASE("mixing proportions and order") {
    for (const auto& [ra, rb] : {std::pair{1, 1}, std::pair{1, 4}}) {
        VectorStream a(numbered("a", 10000));
        VectorStream b(numbered("b", 10000));
        const MixSpec spec{ra, rb, 1234};
        const auto mixed = pipeline::mix_datasets(a, b, spec, 10000);
        const double share_a = static_cast<double>(mixed.stats_a.sample_count) / 10000.0;
        CHECK(std::abs(share_a - static_cast<double>(ra) / (ra + rb)) <= 0.02);
        CHECK(mixed.stats_a.sample_count + mixed.stats_b.sample_count == 10000);

        int next_a = 0, next_b = 0;
        for (std::size_t i = 0; i < mixed.samples.size(); ++i) {
            const bool from_a = mixed.sources[i] == MixSource::a;
            const std::string expected = (from_a ? "a" : "b") + std::to_string(from_a ? next_a++ : next_b++);
            REQUIRE(mixed.samples[i].id == expected);
        }

        VectorStream a2(numbered("a", 10000));
        VectorStream b2(numbered("b", 10000));
        CHECK(pipeline::mix_datasets(a2, b2, spec, 10000).sources == mixed.sources);
    }
}

TEST_CASE("mixing validation and exhaustion") {
    CHECK_THROWS_AS((MixSpec{1, 0, 0}.validate()), PipelineError);
    CHECK_THROWS_AS((MixSpec{0, 1, 0}.validate()), PipelineError);
    VectorStream a(numbered("a", 3));
    VectorStream b(numbered("b", 100));
    CHECK_THROWS_AS(pipeline::mix_datasets(a, b, MixSpec{1, 1, 5}, 50), PipelineError);
}

TEST_CASE("different seeds give different schedules") {
    VectorStream a1(numbered("a", 200)), b1(numbered("b", 200)), a2(numbered("a", 200)), b2(numbered("b", 200));
    CHECK(pipeline::mix_datasets(a1, b1, MixSpec{1, 1, 1}, 200).sources !=
          pipeline::mix_datasets(a2, b2, MixSpec{1, 1, 2}, 200).sources);
}

}  // TEST_SUITE
