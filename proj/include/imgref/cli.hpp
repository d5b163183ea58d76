// Copyright 2026 The imgref Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>

#include "json.hpp"

#include "imgref/backend.hpp"
#include "imgref/corpus.hpp"
#include "imgref/metrics.hpp"

namespace imgref::cli {

inline constexpr std::uint64_t kDefaultSeed = 20250117;

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Parsed --config file plus command-line overrides.
struct RunConfig {
    nlohmann::json raw = nlohmann::json::object();  // before env interpolation; hashed into the manifest
    std::filesystem::path base_dir;                 // relative paths resolve against this
    std::uint64_t seed = kDefaultSeed;
    std::optional<std::filesystem::path> output_dir;
    AggregationMode aggregation = AggregationMode::micro;
    LengthUnit length_unit = LengthUnit::chars;

    std::filesystem::path resolve(const std::string& p) const;
    std::string digest() const;
    /// The "backends.<role>" object with ${VAR} references expanded, if configured.
    std::optional<nlohmann::json> backend(const std::string& role) const;
    /// raw[section][key] as a path, or nullopt.
    std::optional<std::filesystem::path> path_at(const std::string& section, const std::string& key) const;
};

/// Loads a JSON config file; an empty path yields the defaults.
RunConfig load_config(const std::filesystem::path& path);

/// Expands ${NAME} from the environment in every string value. Throws ConfigError
/// for unset variables.
nlohmann::json interpolate_env(const nlohmann::json& j);

/// Builds a backend from {"kind": "http"|"scripted", ..., "cache": {"dir", "mode"}}.
std::shared_ptr<ModelBackend> make_backend(const nlohmann::json& spec, const RunConfig& cfg, const std::string& role);

/// Entry point shared by the `imgref` binary and the tests. Returns the exit status.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Set by signal handlers to stop `serve`.
std::atomic<bool>& stop_requested();

}  // namespace imgref::cli
