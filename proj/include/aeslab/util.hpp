#pragma once
// Small shared helpers: stable hashing, atomic file writes, JSONL I/O,
// seed derivation.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace aeslab {

using json = nlohmann::ordered_json;

// FNV-1a 64-bit. Used wherever a stable content identity is needed
// (config hashes, schema hashes, fold-split hashes).
std::uint64_t fnv1a64(std::string_view data);
std::string hash_hex(std::uint64_t h);

// Hash of a JSON value via its canonical compact dump.
std::uint64_t json_hash(const json& j);

// Write-to-temp-then-rename so readers never observe a partial file.
void atomic_write_file(const std::filesystem::path& path, const std::string& contents);

std::string read_file(const std::filesystem::path& path);

// One JSON object per line.
void write_jsonl(const std::filesystem::path& path, const std::vector<json>& rows);
std::vector<json> read_jsonl(const std::filesystem::path& path);

// Deterministic per-purpose seed: hash of (root seed, label).
std::uint64_t derive_seed(std::uint64_t root_seed, std::string_view label);

} // namespace aeslab
