#pragma once

#include <cstdint>
#include <ctime>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include <json.hpp>

#include "kctag/detail/fs.hpp"
#include "kctag/detail/sha256.hpp"
#include "kctag/errors.hpp"

namespace kctag {

// Flat "key = value" run configuration. Lines starting with '#' are
// comments; values may be quoted. Committable (secrets stay in environment
// variables).
class KeyValueConfig {
  public:
    static KeyValueConfig parse_string(const std::string& text) {
        KeyValueConfig cfg;
        std::size_t line_no = 0, pos = 0;
        while (pos <= text.size()) {
            const std::size_t eol = text.find('\n', pos);
            std::string line = text.substr(pos, eol == std::string::npos ? eol : eol - pos);
            pos = eol == std::string::npos ? text.size() + 1 : eol + 1;
            ++line_no;

            const std::size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;

            const std::size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw DataError("config line " + std::to_string(line_no) +
                                ": expected key = value");
            std::string key = trim(line.substr(0, eq));
            std::string value = trim(line.substr(eq + 1));
            if (key.empty())
                throw DataError("config line " + std::to_string(line_no) + ": empty key");
            if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
                value = value.substr(1, value.size() - 2);
            cfg.values_[key] = value;
        }
        return cfg;
    }

    static KeyValueConfig parse_file(const std::filesystem::path& path) {
        return parse_string(detail::read_file(path));
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_string(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw DataError("config is missing key: " + key);
        return it->second;
    }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    long long get_int(const std::string& key) const { return to_int(key, get_string(key)); }
    long long get_int(const std::string& key, long long fallback) const {
        return has(key) ? get_int(key) : fallback;
    }

    double get_double(const std::string& key) const {
        return to_double(key, get_string(key));
    }
    double get_double(const std::string& key, double fallback) const {
        return has(key) ? get_double(key) : fallback;
    }

    bool get_bool(const std::string& key) const {
        const std::string v = get_string(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw DataError("config key " + key + " is not a boolean: " + v);
    }
    bool get_bool(const std::string& key, bool fallback) const {
        return has(key) ? get_bool(key) : fallback;
    }

    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
        if (!has(key)) return fallback;
        try {
            return std::stoull(get_string(key));
        } catch (const std::exception&) {
            throw DataError("config key " + key + " is not an unsigned integer");
        }
    }

    const std::map<std::string, std::string>& values() const { return values_; }

    std::string digest() const {
        std::string canonical;
        for (const auto& [k, v] : values_) canonical += k + "=" + v + "\n";
        return detail::sha256_hex(canonical);
    }

  private:
    static std::string trim(const std::string& s) {
        const auto begin = s.find_first_not_of(" \t\r");
        if (begin == std::string::npos) return {};
        const auto end = s.find_last_not_of(" \t\r");
        return s.substr(begin, end - begin + 1);
    }

    static long long to_int(const std::string& key, const std::string& v) {
        try {
            std::size_t used = 0;
            const long long out = std::stoll(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return out;
        } catch (const std::exception&) {
            throw DataError("config key " + key + " is not an integer: " + v);
        }
    }

    static double to_double(const std::string& key, const std::string& v) {
        try {
            std::size_t used = 0;
            const double out = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return out;
        } catch (const std::exception&) {
            throw DataError("config key " + key + " is not a number: " + v);
        }
    }

    std::map<std::string, std::string> values_;
};

// Provenance record written once per output directory. Reruns with an
// identical manifest (modulo timestamp) reproduce identical outputs under
// the simulated judge.
struct RunManifest {
    std::string command_line;
    std::string tool_version;
    std::string config_digest;
    std::string dataset_digest;
    std::map<std::string, std::uint64_t> seeds;
    std::map<std::string, std::string> artifacts;  // output name -> digest
    std::string created_at;  // ISO-8601 UTC

    nlohmann::json to_json() const {
        nlohmann::json seeds_json = nlohmann::json::object();
        for (const auto& [name, seed] : seeds) seeds_json[name] = seed;
        nlohmann::json artifacts_json = nlohmann::json::object();
        for (const auto& [name, digest] : artifacts) artifacts_json[name] = digest;
        return nlohmann::json{{"command_line", command_line},
                              {"tool_version", tool_version},
                              {"config_digest", config_digest},
                              {"dataset_digest", dataset_digest},
                              {"seeds", seeds_json},
                              {"artifacts", artifacts_json},
                              {"created_at", created_at}};
    }
};

inline std::string iso8601_utc_now() {
    const std::time_t now = std::time(nullptr);
    std::tm tm_utc{};
    gmtime_r(&now, &tm_utc);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

inline void write_manifest(const RunManifest& manifest,
                           const std::filesystem::path& out_dir) {
    detail::atomic_write_file(out_dir / "manifest.json",
                              manifest.to_json().dump(2) + "\n");
}

}  // namespace kctag
