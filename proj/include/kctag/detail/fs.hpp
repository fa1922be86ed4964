#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>

#include "kctag/detail/sha256.hpp"
#include "kctag/errors.hpp"

namespace kctag::detail {

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// Crash-safe write: contents land in a temp file first, then a rename makes
// them visible. Readers either see the old file or the complete new one.
inline void atomic_write_file(const std::filesystem::path& path,
                              std::string_view contents) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    static std::atomic<std::uint64_t> counter{0};
    fs::path tmp = path;
    tmp += ".tmp." +
           std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())) +
           "." + std::to_string(counter.fetch_add(1));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write file: " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw DataError("short write: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw DataError("rename failed for " + path.string());
    }
}

inline std::string file_sha256(const std::filesystem::path& path) {
    return sha256_hex(read_file(path));
}

}  // namespace kctag::detail
