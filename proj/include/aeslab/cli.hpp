#pragma once

// Command-line front end: configuration files, run manifests, and the
// commands gen-corpus / pretrain / train / eval / ablate / report.

#include <cstdint>
#include <string>
#include <vector>

#include "aeslab/harness.hpp"

namespace aeslab {

inline constexpr const char* kVersion = "0.1.0";

// Written atomically when a command finishes, success or not. Timestamps
// are informational only; manifest_fingerprint drops them so repeated runs
// of the same (config, seed) fingerprint identically.
struct RunManifest {
    std::string command;
    std::string version = kVersion;
    std::string config_path;        // empty when configured by flags alone
    std::uint64_t config_hash = 0;  // FNV-1a over the config file bytes
    std::uint64_t seed = 0;
    std::string started_at;         // UTC
    std::string finished_at;
    bool ok = true;
    std::vector<std::string> artifacts;
    json extra;

    json to_json() const;
    static RunManifest from_json(const json& j);
};

std::uint64_t manifest_fingerprint(const json& manifest);

std::string utc_timestamp();

// Filename-safe variant label: "fixed:0.5,0.5" -> "fixed-0.5_0.5".
std::string variant_slug(const std::string& variant);

// Parses argv and dispatches. Returns the process exit code: 0 iff every
// requested artifact was produced. Logs go to stderr, data to files.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

} // namespace aeslab
