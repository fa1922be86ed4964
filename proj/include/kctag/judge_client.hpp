#pragma once

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

// resolv.h (pulled in by httplib) defines _res as a macro, which collides
// with Eigen's internal parameter names when Eigen is included afterwards.
#ifdef _res
#undef _res
#endif

#include "kctag/detail/fs.hpp"
#include "kctag/detail/sha256.hpp"
#include "kctag/errors.hpp"
#include "kctag/prompting.hpp"
#include "kctag/rng.hpp"

namespace kctag {

struct JudgeDecoding {
    double temperature = 0.0;
    int max_tokens = 512;
};

struct JudgeRequest {
    Prompt prompt;
    JudgeDecoding decoding;
    std::string model_name;
};

enum class ResponseProvenance { Live, Cache, Simulated };

struct JudgeResponse {
    std::string raw_text;
    ParsedJudgment parsed;
    ResponseProvenance provenance = ResponseProvenance::Live;
    std::chrono::microseconds latency{0};
};

class JudgeBackend {
  public:
    virtual ~JudgeBackend() = default;
    virtual JudgeResponse query(const JudgeRequest& request) = 0;
};

// Content address of a judge request: the model, the decoding settings, and
// the full rendered prompt. Stable across runs and platforms.
inline std::string cache_key(const JudgeRequest& r) {
    char decoding[64];
    std::snprintf(decoding, sizeof(decoding), "%.17g|%d", r.decoding.temperature,
                  r.decoding.max_tokens);
    detail::Sha256 h;
    h.update(r.model_name);
    h.update("\x1f");
    h.update(decoding);
    h.update("\x1f");
    h.update(render(r.prompt));
    return detail::to_hex(h.digest());
}

// ---------------------------------------------------------------------------
// Simulated judge
// ---------------------------------------------------------------------------

using PairKey = std::pair<std::string, std::string>;  // (knowledge_id, question_id)

// Deterministic judge used for tests and offline training. For each pair it
// answers correctly iff the prompt contains one of the pair's golden
// demonstrations; otherwise it emits a fixed base verdict. The verdict is a
// pure function of (prompt contents, spec, seed), and in particular does not
// depend on demonstration order.
struct SimulatedJudgeSpec {
    enum class BaseBehavior { SeededHash, AlwaysCorrect, AlwaysWrong };

    std::uint64_t seed = 0;
    std::map<PairKey, std::set<std::string>> golden_demos;  // demo question ids
    std::map<PairKey, JudgmentLabel> gold_labels;
    BaseBehavior base_behavior = BaseBehavior::SeededHash;
    std::map<std::string, BaseBehavior> base_by_knowledge;  // overrides per knowledge id

    BaseBehavior base_for(const std::string& knowledge_id) const {
        auto it = base_by_knowledge.find(knowledge_id);
        return it == base_by_knowledge.end() ? base_behavior : it->second;
    }
};

inline std::string base_behavior_name(SimulatedJudgeSpec::BaseBehavior b) {
    switch (b) {
        case SimulatedJudgeSpec::BaseBehavior::AlwaysCorrect: return "correct";
        case SimulatedJudgeSpec::BaseBehavior::AlwaysWrong: return "wrong";
        default: return "hash";
    }
}

inline SimulatedJudgeSpec::BaseBehavior base_behavior_from_name(const std::string& s) {
    if (s == "correct") return SimulatedJudgeSpec::BaseBehavior::AlwaysCorrect;
    if (s == "wrong") return SimulatedJudgeSpec::BaseBehavior::AlwaysWrong;
    if (s == "hash") return SimulatedJudgeSpec::BaseBehavior::SeededHash;
    throw DataError("unknown base behavior: " + s);
}

inline nlohmann::json simulated_spec_to_json(const SimulatedJudgeSpec& spec) {
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& [key, label] : spec.gold_labels) {
        nlohmann::json rec{{"knowledge_id", key.first},
                           {"question_id", key.second},
                           {"label", label_to_int(label)}};
        auto it = spec.golden_demos.find(key);
        if (it != spec.golden_demos.end())
            rec["golden_demos"] = std::vector<std::string>(it->second.begin(), it->second.end());
        pairs.push_back(std::move(rec));
    }
    nlohmann::json base = nlohmann::json::object();
    for (const auto& [kid, b] : spec.base_by_knowledge)
        base[kid] = base_behavior_name(b);
    return nlohmann::json{{"seed", spec.seed},
                          {"base_behavior", base_behavior_name(spec.base_behavior)},
                          {"base_by_knowledge", base},
                          {"pairs", pairs}};
}

inline SimulatedJudgeSpec simulated_spec_from_json(const nlohmann::json& j) {
    SimulatedJudgeSpec spec;
    spec.seed = j.value("seed", std::uint64_t{0});
    spec.base_behavior = base_behavior_from_name(j.value("base_behavior", "hash"));
    if (j.contains("base_by_knowledge"))
        for (const auto& [kid, name] : j.at("base_by_knowledge").items())
            spec.base_by_knowledge[kid] = base_behavior_from_name(name.get<std::string>());
    for (const auto& rec : j.at("pairs")) {
        PairKey key{rec.at("knowledge_id").get<std::string>(),
                    rec.at("question_id").get<std::string>()};
        spec.gold_labels[key] = label_from_int(rec.at("label").get<int>());
        if (rec.contains("golden_demos"))
            for (const auto& d : rec.at("golden_demos"))
                spec.golden_demos[key].insert(d.get<std::string>());
    }
    return spec;
}

inline SimulatedJudgeSpec load_simulated_spec(const std::filesystem::path& path) {
    try {
        return simulated_spec_from_json(nlohmann::json::parse(detail::read_file(path)));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("judge spec " + path.string() + ": " + e.what());
    }
}

inline void save_simulated_spec(const SimulatedJudgeSpec& spec,
                                const std::filesystem::path& path) {
    detail::atomic_write_file(path, simulated_spec_to_json(spec).dump(2) + "\n");
}

class SimulatedJudge : public JudgeBackend {
  public:
    explicit SimulatedJudge(SimulatedJudgeSpec spec) : spec_(std::move(spec)) {}

    const SimulatedJudgeSpec& spec() const { return spec_; }

    JudgeResponse query(const JudgeRequest& request) override {
        const Prompt& p = request.prompt;
        const PairKey key{p.knowledge_id, p.question_id};

        Verdict verdict;
        const auto gold = spec_.gold_labels.find(key);
        if (gold == spec_.gold_labels.end()) {
            // Unknown pair: fall back to a seeded hash of the pair identity.
            verdict = hash_verdict(key);
        } else if (has_golden_demo(key, p.demo_ids)) {
            verdict = gold->second == JudgmentLabel::Match ? Verdict::Yes : Verdict::No;
        } else {
            switch (spec_.base_for(p.knowledge_id)) {
                case SimulatedJudgeSpec::BaseBehavior::AlwaysCorrect:
                    verdict = gold->second == JudgmentLabel::Match ? Verdict::Yes
                                                                   : Verdict::No;
                    break;
                case SimulatedJudgeSpec::BaseBehavior::AlwaysWrong:
                    verdict = gold->second == JudgmentLabel::Match ? Verdict::No
                                                                   : Verdict::Yes;
                    break;
                default:
                    verdict = hash_verdict(key);
            }
        }

        JudgeResponse resp;
        resp.raw_text =
            "The simulated annotator compares the question against the knowledge "
            "definition. " +
            std::string(verdict == Verdict::Yes ? "<Yes>" : "<No>");
        resp.parsed = parse_judgment(resp.raw_text);
        resp.provenance = ResponseProvenance::Simulated;
        return resp;
    }

  private:
    bool has_golden_demo(const PairKey& key,
                         const std::vector<std::string>& demo_ids) const {
        auto it = spec_.golden_demos.find(key);
        if (it == spec_.golden_demos.end()) return false;
        for (const auto& id : demo_ids)
            if (it->second.count(id)) return true;
        return false;
    }

    Verdict hash_verdict(const PairKey& key) const {
        const std::uint64_t h =
            mix64(spec_.seed, mix64(fnv1a64(key.first), fnv1a64(key.second)));
        return (h & 1) ? Verdict::Yes : Verdict::No;
    }

    SimulatedJudgeSpec spec_;
};

// ---------------------------------------------------------------------------
// HTTP judge (OpenAI-style chat completions)
// ---------------------------------------------------------------------------

struct HttpJudgeOptions {
    std::string base_url;                     // e.g. "http://localhost:8000/v1"
    std::string api_key_env = "KCTAG_API_KEY";
    std::string message_role = "user";
    int max_retries = 3;
    int initial_backoff_ms = 250;
    double backoff_factor = 2.0;
    int timeout_seconds = 120;
};

class HttpJudge : public JudgeBackend {
  public:
    explicit HttpJudge(HttpJudgeOptions opts) : opts_(std::move(opts)) {
        if (opts_.base_url.empty()) throw ConfigError("HTTP judge needs a base URL");
        split_url(opts_.base_url, host_, path_prefix_);
    }

    JudgeResponse query(const JudgeRequest& request) override {
        const nlohmann::json body{
            {"model", request.model_name},
            {"messages",
             {{{"role", opts_.message_role}, {"content", render(request.prompt)}}}},
            {"temperature", request.decoding.temperature},
            {"max_tokens", request.decoding.max_tokens}};

        const auto start = std::chrono::steady_clock::now();
        std::string raw = post_with_retry("/chat/completions", body.dump(),
                                          extract_chat_content);
        JudgeResponse resp;
        resp.raw_text = std::move(raw);
        resp.parsed = parse_judgment(resp.raw_text);
        resp.provenance = ResponseProvenance::Live;
        resp.latency = std::chrono::duration_cast<std::chrono::microseconds>(
            std::chrono::steady_clock::now() - start);
        return resp;
    }

    // Shared by the embedding client: POST with retry/backoff, 4xx fatal.
    // `endpoint` is relative to the configured base URL.
    std::string post_with_retry(const std::string& endpoint, const std::string& body,
                                std::string (*extract)(const nlohmann::json&)) {
        const std::string path = path_prefix_ + endpoint;
        std::string last_error;
        int backoff = opts_.initial_backoff_ms;
        for (int attempt = 0; attempt <= opts_.max_retries; ++attempt) {
            if (attempt > 0) {
                std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
                backoff = static_cast<int>(backoff * opts_.backoff_factor);
            }
            httplib::Client client(host_);
            client.set_read_timeout(opts_.timeout_seconds, 0);
            client.set_connection_timeout(opts_.timeout_seconds, 0);
            httplib::Headers headers;
            if (const char* key = std::getenv(opts_.api_key_env.c_str());
                key != nullptr && *key != '\0')
                headers.emplace("Authorization", std::string("Bearer ") + key);

            auto res = client.Post(path, headers, body, "application/json");
            if (!res) {
                last_error = "transport error: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status >= 400 && res->status < 500)
                throw ConfigError("judge endpoint rejected request (HTTP " +
                                  std::to_string(res->status) + "): " + res->body);
            if (res->status != 200) {
                last_error = "HTTP " + std::to_string(res->status);
                continue;
            }
            try {
                return extract(nlohmann::json::parse(res->body));
            } catch (const nlohmann::json::exception& e) {
                last_error = std::string("unparseable response body: ") + e.what();
                continue;
            }
        }
        throw BackendError("backend unavailable after " +
                           std::to_string(opts_.max_retries + 1) + " attempts (" +
                           last_error + ")");
    }

  private:
    static std::string extract_chat_content(const nlohmann::json& j) {
        return j.at("choices").at(0).at("message").at("content").get<std::string>();
    }

    static void split_url(const std::string& url, std::string& host, std::string& path) {
        const auto scheme_end = url.find("://");
        const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
        const auto path_start = url.find('/', host_start);
        if (path_start == std::string::npos) {
            host = url;
            path.clear();
        } else {
            host = url.substr(0, path_start);
            path = url.substr(path_start);
        }
        while (!path.empty() && path.back() == '/') path.pop_back();
    }

    HttpJudgeOptions opts_;
    std::string host_;
    std::string path_prefix_;
};

// ---------------------------------------------------------------------------
// Response cache
// ---------------------------------------------------------------------------

// Content-addressed file store: one JSON file per digest, written atomically.
// Lookups of absent keys are misses, never errors.
class ResponseCache {
  public:
    explicit ResponseCache(std::filesystem::path root) : root_(std::move(root)) {
        std::filesystem::create_directories(root_);
    }

    std::optional<std::string> lookup(const std::string& key) const {
        const auto path = root_ / (key + ".json");
        if (!std::filesystem::exists(path)) return std::nullopt;
        try {
            const auto j = nlohmann::json::parse(detail::read_file(path));
            return j.at("raw_text").get<std::string>();
        } catch (const std::exception&) {
            return std::nullopt;  // treat unreadable entries as misses
        }
    }

    void store(const std::string& key, const std::string& model,
               const std::string& raw_text) const {
        const nlohmann::json j{
            {"model", model},
            {"digest", key},
            {"timestamp",
             std::chrono::duration_cast<std::chrono::seconds>(
                 std::chrono::system_clock::now().time_since_epoch())
                 .count()},
            {"raw_text", raw_text}};
        detail::atomic_write_file(root_ / (key + ".json"), j.dump() + "\n");
    }

  private:
    std::filesystem::path root_;
};

class CachingJudge : public JudgeBackend {
  public:
    CachingJudge(std::shared_ptr<JudgeBackend> inner, std::filesystem::path cache_dir)
        : inner_(std::move(inner)), cache_(std::move(cache_dir)) {}

    JudgeResponse query(const JudgeRequest& request) override {
        const std::string key = cache_key(request);
        if (auto hit = cache_.lookup(key)) {
            JudgeResponse resp;
            resp.raw_text = std::move(*hit);
            resp.parsed = parse_judgment(resp.raw_text);
            resp.provenance = ResponseProvenance::Cache;
            return resp;
        }
        JudgeResponse resp = inner_->query(request);
        cache_.store(key, request.model_name, resp.raw_text);
        return resp;
    }

  private:
    std::shared_ptr<JudgeBackend> inner_;
    ResponseCache cache_;
};

}  // namespace kctag
