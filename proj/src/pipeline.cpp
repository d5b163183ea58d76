// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#include "imgref/pipeline.hpp"

#include <algorithm>
#include <set>

namespace imgref {

using nlohmann::json;

namespace {

constexpr const char* kTextInstruction =
    "Answer the user's question using the reference documents. Write plain prose in "
    "paragraphs separated by blank lines. Do not mention or reference images.";

constexpr const char* kStandaloneInstruction =
    "Describe this image in one or two sentences. State only what is visible.";

constexpr const char* kContextualInstruction =
    "You are given an image, a description written from the image alone, and the text that "
    "surrounds the image in its source document. Rewrite the description so it also states "
    "who or what is shown when the context makes that clear (names, places, events). If the "
    "context adds nothing, return the description unchanged. Reply with the description only.";

constexpr const char* kInsertionInstruction =
    "Insert relevant images into the answer below. Each image is identified by its number K and "
    "referenced with the marker <image:K> on a line of its own between paragraphs. Do not change, "
    "add or remove any answer text. Use each image at most once, place at most one image between "
    "two paragraphs, and leave out images that do not fit. Reply with the full answer including "
    "the markers.";

StageTemplate read_template(const std::filesystem::path& file, StageTemplate fallback) {
    if (!std::filesystem::exists(file)) return fallback;
    json j;
    try {
        j = json::parse(read_file(file));
    } catch (const json::exception& e) {
        throw PipelineError(file.string() + ": " + e.what());
    }
    StageTemplate t = fallback;
    try {
        if (j.contains("instruction")) t.instruction = j.at("instruction").get<std::string>();
        if (j.contains("exemplars")) {
            t.exemplars.clear();
            for (const auto& e : j.at("exemplars")) {
                Exemplar ex{e.at("input").get<std::string>(), e.at("output").get<std::string>(), std::nullopt};
                if (e.contains("image")) ex.image = e.at("image").get<std::string>();
                t.exemplars.push_back(std::move(ex));
            }
        }
    } catch (const json::exception& e) {
        throw PipelineError(file.string() + ": " + e.what());
    }
    return t;
}

ChatMessage system_message(const std::string& text) {
    return {Role::system, {ContentPart::text(text)}};
}

ChatMessage user_text(const std::string& text) {
    return {Role::user, {ContentPart::text(text)}};
}

ChatMessage assistant_text(const std::string& text) {
    return {Role::assistant, {ContentPart::text(text)}};
}

ChatRequest base_request(const StageConfig& cfg, const StageTemplate& stage) {
    ChatRequest r;
    r.temperature = cfg.temperature;
    r.max_output = cfg.max_output;
    r.messages.push_back(system_message(stage.instruction));
    return r;
}

// Drops marker lines and re-joins paragraphs canonically.
std::string clean_text_response(const std::string& raw) {
    std::string kept;
    std::size_t start = 0;
    for (;;) {
        const auto nl = raw.find('\n', start);
        const auto line = raw.substr(start, nl == std::string::npos ? std::string::npos : nl - start);
        if (!markup::contains_marker(line)) {
            kept += line;
            kept += '\n';
        }
        if (nl == std::string::npos) break;
        start = nl + 1;
    }
    std::string out;
    for (const auto& p : markup::split_paragraphs(kept)) {
        if (!out.empty()) out += "\n\n";
        out += p;
    }
    return out;
}

std::string captions_block(const std::vector<std::pair<ImageId, std::string>>& captions) {
    std::string out;
    for (const auto& [id, caption] : captions) {
        out += "[" + std::to_string(id) + "] " + normalize_whitespace(caption) + "\n";
    }
    return out;
}

ResponseDoc paragraphs_doc(const std::vector<std::string>& paragraphs) {
    ResponseDoc doc;
    for (const auto& p : paragraphs) doc.blocks.emplace_back(Paragraph{p});
    return doc;
}

}  // namespace

StageConfig StageConfig::defaults() {
    StageConfig cfg;
    cfg.text_response.instruction = kTextInstruction;
    cfg.caption_standalone.instruction = kStandaloneInstruction;
    cfg.caption_contextual.instruction = kContextualInstruction;
    cfg.insertion.instruction = kInsertionInstruction;
    return cfg;
}

StageConfig StageConfig::load(const std::filesystem::path& dir) {
    StageConfig cfg = defaults();
    if (!std::filesystem::is_directory(dir)) throw PipelineError("stage config directory not found: " + dir.string());
    const auto general = dir / "pipeline.json";
    if (std::filesystem::exists(general)) {
        try {
            const json j = json::parse(read_file(general));
            cfg.max_retries = j.value("max_retries", cfg.max_retries);
            cfg.temperature = j.value("temperature", cfg.temperature);
            cfg.max_output = j.value("max_output", cfg.max_output);
            cfg.max_concurrent = j.value("max_concurrent", cfg.max_concurrent);
        } catch (const json::exception& e) {
            throw PipelineError(general.string() + ": " + e.what());
        }
    }
    cfg.text_response = read_template(dir / "text_response.json", cfg.text_response);
    cfg.caption_standalone = read_template(dir / "caption_standalone.json", cfg.caption_standalone);
    cfg.caption_contextual = read_template(dir / "caption_contextual.json", cfg.caption_contextual);
    cfg.insertion = read_template(dir / "insertion.json", cfg.insertion);
    cfg.validate();
    return cfg;
}

void StageConfig::validate() const {
    if (max_retries < 0) throw PipelineError("max_retries must be >= 0");
    if (max_output < 1) throw PipelineError("max_output must be >= 1");
    if (max_concurrent < 1) throw PipelineError("max_concurrent must be >= 1");
    for (const auto* t : {&text_response, &caption_standalone, &caption_contextual, &insertion}) {
        if (t->instruction.empty()) throw PipelineError("stage instruction must be non-empty");
    }
}

void MixSpec::validate() const {
    if (ratio_a < 1 || ratio_b < 1) {
        throw PipelineError("mix ratios must both be >= 1 (got " + std::to_string(ratio_a) + ":" +
                            std::to_string(ratio_b) + ")");
    }
}

std::optional<Sample> VectorStream::next() {
    if (pos_ >= samples_.size()) return std::nullopt;
    return samples_[pos_++];
}

JsonlStream::JsonlStream(const std::filesystem::path& path, DatasetSchema schema)
    : in_(path), origin_(path.string()), schema_(schema) {
    if (!in_) throw IoError("cannot open " + origin_);
}

std::optional<Sample> JsonlStream::next() {
    std::string line;
    while (std::getline(in_, line)) {
        ++line_;
        if (is_blank(line)) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw DatasetError(line_, "", origin_ + ": malformed JSON: " + e.what());
        }
        try {
            Sample s = corpus::sample_from_json(j, schema_);
            s.source_line = line_;
            return s;
        } catch (const DatasetError& e) {
            throw DatasetError(line_, e.field_path(), origin_ + ": " + e.what());
        }
    }
    return std::nullopt;
}

namespace pipeline {

std::string documents_text(const Sample& sample) {
    std::string out;
    for (std::size_t d = 0; d < sample.documents.size(); ++d) {
        std::string body;
        for (const auto& e : sample.documents[d].elements) {
            if (e.kind != Element::Kind::text) continue;
            if (!body.empty()) body += "\n\n";
            body += e.text;
        }
        if (!out.empty()) out += "\n\n";
        out += "[Document " + std::to_string(d + 1) + "]\n" + body;
    }
    return out;
}

std::string image_context(const Sample& sample, ImageId image) {
    for (const auto& doc : sample.documents) {
        const auto& els = doc.elements;
        for (std::size_t i = 0; i < els.size(); ++i) {
            if (els[i].kind != Element::Kind::image || els[i].image_id != image) continue;
            std::string before;
            std::string after;
            for (std::size_t k = i; k-- > 0;) {
                if (els[k].kind == Element::Kind::text) {
                    before = els[k].text;
                    break;
                }
            }
            for (std::size_t k = i + 1; k < els.size(); ++k) {
                if (els[k].kind == Element::Kind::text) {
                    after = els[k].text;
                    break;
                }
            }
            if (before.empty()) return after;
            if (after.empty()) return before;
            return before + "\n\n" + after;
        }
    }
    return {};
}

ChatRequest text_response_request(const Sample& sample, const StageConfig& cfg) {
    ChatRequest r = base_request(cfg, cfg.text_response);
    for (const auto& ex : cfg.text_response.exemplars) {
        r.messages.push_back(user_text(ex.input));
        r.messages.push_back(assistant_text(ex.output));
    }
    std::string prompt = "Question:\n" + sample.query;
    const std::string docs = documents_text(sample);
    if (!docs.empty()) prompt += "\n\nReference documents:\n\n" + docs;
    r.messages.push_back(user_text(prompt));
    return r;
}

ChatRequest standalone_caption_request(const ImageAsset& image, const StageConfig& cfg) {
    ChatRequest r = base_request(cfg, cfg.caption_standalone);
    for (const auto& ex : cfg.caption_standalone.exemplars) {
        ChatMessage m{Role::user, {ContentPart::text(ex.input)}};
        if (ex.image) m.parts.push_back(ContentPart::image(*ex.image));
        r.messages.push_back(std::move(m));
        r.messages.push_back(assistant_text(ex.output));
    }
    r.messages.push_back({Role::user, {ContentPart::text("Describe the image."), ContentPart::image(image.uri)}});
    return r;
}

ChatRequest contextual_caption_request(const ImageAsset& image, const std::string& context, const StageConfig& cfg) {
    if (!image.caption_standalone) {
        throw PipelineError("image " + std::to_string(image.id) + " has no stage-1 caption");
    }
    ChatRequest r = base_request(cfg, cfg.caption_contextual);
    for (const auto& ex : cfg.caption_contextual.exemplars) {
        ChatMessage m{Role::user, {ContentPart::text(ex.input)}};
        if (ex.image) m.parts.push_back(ContentPart::image(*ex.image));
        r.messages.push_back(std::move(m));
        r.messages.push_back(assistant_text(ex.output));
    }
    r.messages.push_back({Role::user,
                          {ContentPart::text("Description:\n" + *image.caption_standalone + "\n\nContext:\n" + context),
                           ContentPart::image(image.uri)}});
    return r;
}

ChatRequest insertion_request(const std::string& text_response,
                              const std::vector<std::pair<ImageId, std::string>>& captions, const StageConfig& cfg) {
    ChatRequest r = base_request(cfg, cfg.insertion);
    for (const auto& ex : cfg.insertion.exemplars) {
        r.messages.push_back(user_text(ex.input));
        r.messages.push_back(assistant_text(ex.output));
    }
    r.messages.push_back(user_text("Images:\n" + captions_block(captions) + "\nAnswer:\n" + text_response));
    return r;
}

std::string generate_text_response(ModelBackend& backend, const Sample& sample, const StageConfig& cfg) {
    const std::string text = clean_text_response(backend.complete(text_response_request(sample, cfg)));
    if (text.empty()) throw BackendError(BackendError::Kind::empty, "empty text response");
    return text;
}

std::string caption_standalone(ModelBackend& backend, const ImageAsset& image, const StageConfig& cfg) {
    std::string caption = trim(backend.complete(standalone_caption_request(image, cfg)));
    if (caption.empty()) {
        throw BackendError(BackendError::Kind::empty, "empty caption for image " + std::to_string(image.id));
    }
    return caption;
}

std::string caption_contextual(ModelBackend& backend, const ImageAsset& image, const std::string& context,
                               const StageConfig& cfg) {
    std::string caption = trim(backend.complete(contextual_caption_request(image, context, cfg)));
    return caption.empty() ? *image.caption_standalone : caption;
}

InsertionResult insert_images(ModelBackend& backend, const std::string& text_response,
                              const std::vector<std::pair<ImageId, std::string>>& captions, const StageConfig& cfg) {
    const auto paragraphs = markup::split_paragraphs(text_response);
    if (paragraphs.empty()) throw PipelineError("insert_images: text response is empty");
    InsertionResult result;
    result.doc = paragraphs_doc(paragraphs);
    if (captions.empty()) return result;

    std::set<ImageId> allowed;
    ImageId max_id = 0;
    for (const auto& [id, caption] : captions) {
        allowed.insert(id);
        max_id = std::max(max_id, id);
    }
    const SlotSpec boundaries = SlotSpec::paragraph_boundaries(paragraphs.size());

    ChatRequest request = insertion_request(text_response, captions, cfg);
    for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
        result.attempts = attempt + 1;
        const std::string completion = backend.complete(request);
        try {
            const ResponseDoc candidate = markup::parse(completion, max_id);
            for (ImageId id : candidate.image_ids()) {
                if (allowed.count(id) == 0) {
                    throw PipelineError("image " + std::to_string(id) + " was not offered");
                }
            }
            const Assignment placed = markup::extract_assignment(candidate, paragraphs, boundaries);
            // Rebuild from the original paragraphs so the text is exactly the input.
            ResponseDoc doc;
            for (std::size_t k = 0; k <= paragraphs.size(); ++k) {
                if (auto it = placed.placements().find(static_cast<SlotId>(k)); it != placed.placements().end()) {
                    doc.blocks.emplace_back(ImageRef{it->second});
                }
                if (k < paragraphs.size()) doc.blocks.emplace_back(Paragraph{paragraphs[k]});
            }
            result.doc = std::move(doc);
            result.warning = false;
            result.last_error.clear();
            return result;
        } catch (const Error& e) {
            result.last_error = e.what();
            request.messages.push_back(assistant_text(completion));
            request.messages.push_back(user_text(
                "That answer was rejected: " + result.last_error +
                ". Reply again with the unchanged answer text and only valid <image:K> markers."));
        }
    }
    result.doc = paragraphs_doc(paragraphs);
    result.warning = true;
    return result;
}

Sample run_three_stage(ModelBackend& llm, ModelBackend& vlm, const Sample& sample, const StageConfig& cfg) {
    Sample out = sample;
    auto staged = [](const char* stage, auto&& fn) {
        try {
            return fn();
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(stage, e.what());
        }
    };

    const std::string text = staged(kStageText, [&] { return generate_text_response(llm, out, cfg); });
    out.text_response = text;

    std::vector<ImageAsset*> assets;
    for (auto& doc : out.documents) {
        for (auto& a : doc.assets) assets.push_back(&a);
    }
    if (assets.empty()) {
        out.response = paragraphs_doc(markup::split_paragraphs(text));
        out.insertion_warning = false;
        return out;
    }

    parallel_for(assets.size(), static_cast<std::size_t>(cfg.max_concurrent), [&](std::size_t i) {
        ImageAsset& asset = *assets[i];
        asset.caption_standalone = staged(kStageCaptionStandalone, [&] { return caption_standalone(vlm, asset, cfg); });
        const std::string context = image_context(sample, asset.id);
        asset.caption_contextual =
            staged(kStageCaptionContextual, [&] { return caption_contextual(vlm, asset, context, cfg); });
    });

    std::vector<std::pair<ImageId, std::string>> captions;
    for (const auto* a : assets) captions.emplace_back(a->id, *a->caption_contextual);
    std::sort(captions.begin(), captions.end());

    const InsertionResult inserted = staged(kStageInsertion, [&] { return insert_images(llm, text, captions, cfg); });
    out.response = inserted.doc;
    out.insertion_warning = inserted.warning;
    return out;
}

MixResult mix_datasets(SampleStream& a, SampleStream& b, const MixSpec& spec, std::size_t count, LengthUnit unit) {
    spec.validate();
    MixResult result;
    result.samples.reserve(count);
    result.sources.reserve(count);
    SplitMix64 rng(derive_seed(spec.seed, "mix"));
    const auto total = static_cast<std::uint64_t>(spec.ratio_a) + static_cast<std::uint64_t>(spec.ratio_b);
    std::vector<Sample> from_a;
    std::vector<Sample> from_b;
    for (std::size_t i = 0; i < count; ++i) {
        const MixSource source = rng.bounded(total) < static_cast<std::uint64_t>(spec.ratio_a) ? MixSource::a
                                                                                               : MixSource::b;
        auto next = source == MixSource::a ? a.next() : b.next();
        if (!next) {
            throw PipelineError(std::string("mix: source ") + (source == MixSource::a ? "a" : "b") +
                                " exhausted after " + std::to_string(i) + " of " + std::to_string(count) +
                                " emissions");
        }
        (source == MixSource::a ? from_a : from_b).push_back(*next);
        result.samples.push_back(std::move(*next));
        result.sources.push_back(source);
    }
    result.stats_a = corpus::compute_stats(from_a, unit);
    result.stats_b = corpus::compute_stats(from_b, unit);
    return result;
}

}  // namespace pipeline
}  // namespace imgref
