#include "aeslab/util.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace aeslab {

std::uint64_t fnv1a64(std::string_view data) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : data) {
        h ^= static_cast<std::uint64_t>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

std::uint64_t json_hash(const json& j) { return fnv1a64(j.dump()); }

void atomic_write_file(const std::filesystem::path& path, const std::string& contents) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open for write: " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        out.flush();
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for read: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_jsonl(const std::filesystem::path& path, const std::vector<json>& rows) {
    std::string buf;
    for (const auto& row : rows) {
        buf += row.dump();
        buf += '\n';
    }
    atomic_write_file(path, buf);
}

std::vector<json> read_jsonl(const std::filesystem::path& path) {
    std::vector<json> rows;
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open for read: " + path.string());
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        rows.push_back(json::parse(line));
    }
    return rows;
}

std::uint64_t derive_seed(std::uint64_t root_seed, std::string_view label) {
    std::string key = std::to_string(root_seed);
    key += '/';
    key += label;
    return fnv1a64(key);
}

} // namespace aeslab
