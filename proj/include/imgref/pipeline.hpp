// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "imgref/backend.hpp"
#include "imgref/corpus.hpp"

namespace imgref {

class PipelineError : public Error {
public:
    using Error::Error;
};

/// A failure inside run_three_stage, labeled with the stage that raised it.
class StageError : public PipelineError {
public:
    StageError(std::string stage, const std::string& reason)
        : PipelineError("stage " + stage + ": " + reason), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

struct Exemplar {
    std::string input;
    std::string output;
    std::optional<std::string> image;  // image uri for vision exemplars
};

struct StageTemplate {
    std::string instruction;
    std::vector<Exemplar> exemplars;
};

struct StageConfig {
    StageTemplate text_response;
    StageTemplate caption_standalone;
    StageTemplate caption_contextual;
    StageTemplate insertion;
    int max_retries = 2;
    double temperature = 0.0;
    int max_output = 2048;
    int max_concurrent = 1;  // images captioned in parallel within one sample

    /// Built-in instructions with no exemplars.
    static StageConfig defaults();

    /// Reads <dir>/pipeline.json and one <dir>/<stage>.json per stage
    /// ({"instruction": ..., "exemplars": [{"input", "output", "image"?}]}).
    /// Missing files keep the defaults.
    static StageConfig load(const std::filesystem::path& dir);

    void validate() const;
};

struct InsertionResult {
    ResponseDoc doc;
    bool warning = false;  // fell back to zero insertions
    int attempts = 0;
    std::string last_error;
};

struct MixSpec {
    int ratio_a = 1;
    int ratio_b = 1;
    std::uint64_t seed = 0;

    void validate() const;
};

enum class MixSource { a, b };

/// Pull-based sample source.
class SampleStream {
public:
    virtual ~SampleStream() = default;
    virtual std::optional<Sample> next() = 0;
};

class VectorStream : public SampleStream {
public:
    explicit VectorStream(std::vector<Sample> samples) : samples_(std::move(samples)) {}
    std::optional<Sample> next() override;

private:
    std::vector<Sample> samples_;
    std::size_t pos_ = 0;
};

/// Reads a JSONL dataset line by line.
class JsonlStream : public SampleStream {
public:
    JsonlStream(const std::filesystem::path& path, DatasetSchema schema);
    std::optional<Sample> next() override;

private:
    std::ifstream in_;
    std::string origin_;
    DatasetSchema schema_;
    std::size_t line_ = 0;
};

struct MixResult {
    std::vector<Sample> samples;
    std::vector<MixSource> sources;
    DatasetStats stats_a;
    DatasetStats stats_b;
};

namespace pipeline {

inline constexpr const char* kStageText = "text_response";
inline constexpr const char* kStageCaptionStandalone = "caption_standalone";
inline constexpr const char* kStageCaptionContextual = "caption_contextual";
inline constexpr const char* kStageInsertion = "insertion";

/// Documents with every image element removed, as the text-only model sees them.
std::string documents_text(const Sample& sample);

/// Text elements immediately around the image's position in its document.
std::string image_context(const Sample& sample, ImageId image);

ChatRequest text_response_request(const Sample& sample, const StageConfig& cfg);
ChatRequest standalone_caption_request(const ImageAsset& image, const StageConfig& cfg);
ChatRequest contextual_caption_request(const ImageAsset& image, const std::string& context, const StageConfig& cfg);
ChatRequest insertion_request(const std::string& text_response,
                              const std::vector<std::pair<ImageId, std::string>>& captions,
                              const StageConfig& cfg);

std::string generate_text_response(ModelBackend& backend, const Sample& sample, const StageConfig& cfg);
std::string caption_standalone(ModelBackend& backend, const ImageAsset& image, const StageConfig& cfg);
/// Falls back to the stage-1 caption when the model returns nothing.
std::string caption_contextual(ModelBackend& backend, const ImageAsset& image, const std::string& context,
                               const StageConfig& cfg);
InsertionResult insert_images(ModelBackend& backend, const std::string& text_response,
                              const std::vector<std::pair<ImageId, std::string>>& captions, const StageConfig& cfg);

/// Text response, both caption layers, then insertion. Intermediates are
/// stored on the returned sample. Throws StageError.
Sample run_three_stage(ModelBackend& llm, ModelBackend& vlm, const Sample& sample, const StageConfig& cfg);

/// Seeded categorical interleaving of two sources at ratio_a : ratio_b.
/// Throws PipelineError if a source runs dry before `count` emissions.
MixResult mix_datasets(SampleStream& a, SampleStream& b, const MixSpec& spec, std::size_t count,
                       LengthUnit unit = LengthUnit::chars);

}  // namespace pipeline
}  // namespace imgref
