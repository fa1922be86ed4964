#pragma once

#include <cmath>
#include <cstring>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "kctag/core_data.hpp"
#include "kctag/detail/fs.hpp"
#include "kctag/detail/sha256.hpp"
#include "kctag/errors.hpp"
#include "kctag/judge_client.hpp"
#include "kctag/rng.hpp"

namespace kctag {

// A text embedding. Values are kept as 32-bit floats, which is what the wire
// formats and the cache carry; the policy network widens to double.
struct EmbeddingVector {
    std::vector<float> values;
    std::string source_model;

    int dim() const { return static_cast<int>(values.size()); }
};

class EmbeddingBackend {
  public:
    virtual ~EmbeddingBackend() = default;
    virtual EmbeddingVector embed(const std::string& text) = 0;
    virtual std::string model_name() const = 0;
};

inline void check_finite(const EmbeddingVector& v) {
    for (float x : v.values)
        if (!std::isfinite(x))
            throw DataError("embedding from " + v.source_model + " contains non-finite values");
}

inline double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.dim() != b.dim())
        throw ContractViolation("cosine_similarity: dims differ (" +
                                std::to_string(a.dim()) + " vs " +
                                std::to_string(b.dim()) + ")");
    double dot = 0, na = 0, nb = 0;
    for (int i = 0; i < a.dim(); ++i) {
        const double x = a.values[i], y = b.values[i];
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if (na == 0.0 || nb == 0.0)
        throw DataError("cosine similarity is undefined for a zero vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Offline deterministic encoder: a seeded-hash pseudo-random unit vector per
// (model, text). No network, reproducible across runs and platforms.
class HashEmbeddingBackend : public EmbeddingBackend {
  public:
    HashEmbeddingBackend(int dim, std::uint64_t seed)
        : dim_(dim), seed_(seed),
          model_("hash-embed-d" + std::to_string(dim) + "-s" + std::to_string(seed)) {
        if (dim <= 0) throw ConfigError("embedding dim must be positive");
    }

    EmbeddingVector embed(const std::string& text) override {
        if (text.empty()) throw ContractViolation("cannot embed empty text");
        Rng rng(mix64(seed_, fnv1a64(text)));
        std::vector<double> raw(dim_);
        double norm_sq = 0;
        for (double& x : raw) {
            x = rng.normal();
            norm_sq += x * x;
        }
        const double inv_norm = 1.0 / std::sqrt(norm_sq);
        EmbeddingVector v;
        v.source_model = model_;
        v.values.resize(dim_);
        for (int i = 0; i < dim_; ++i)
            v.values[i] = static_cast<float>(raw[i] * inv_norm);
        return v;
    }

    std::string model_name() const override { return model_; }

  private:
    int dim_;
    std::uint64_t seed_;
    std::string model_;
};

// HTTP encoder speaking the /embeddings wire format. Reuses the judge
// client's retry/backoff behavior.
class HttpEmbeddingBackend : public EmbeddingBackend {
  public:
    HttpEmbeddingBackend(HttpJudgeOptions opts, std::string model)
        : http_(std::move(opts)), model_(std::move(model)) {}

    EmbeddingVector embed(const std::string& text) override {
        if (text.empty()) throw ContractViolation("cannot embed empty text");
        const nlohmann::json body{{"model", model_}, {"input", {text}}};
        const std::string payload =
            http_.post_with_retry("/embeddings", body.dump(), extract_first_embedding);
        EmbeddingVector v;
        v.source_model = model_;
        try {
            for (const auto& x : nlohmann::json::parse(payload))
                v.values.push_back(x.get<float>());
        } catch (const nlohmann::json::exception& e) {
            throw BackendError(std::string("malformed embedding payload: ") + e.what());
        }
        check_finite(v);
        return v;
    }

    std::string model_name() const override { return model_; }

  private:
    static std::string extract_first_embedding(const nlohmann::json& j) {
        return j.at("data").at(0).at("embedding").dump();
    }

    HttpJudge http_;
    std::string model_;
};

// ---------------------------------------------------------------------------
// Embedding cache: one binary file per (model, text) digest.
// Layout: "KEMB" magic, u32 version, u32 dim, dim little-endian f32 values.
// ---------------------------------------------------------------------------

class EmbeddingCache {
  public:
    explicit EmbeddingCache(std::filesystem::path root) : root_(std::move(root)) {
        std::filesystem::create_directories(root_);
    }

    static std::string key(const std::string& model, const std::string& text) {
        detail::Sha256 h;
        h.update(model);
        h.update("\x1f");
        h.update(text);
        return detail::to_hex(h.digest());
    }

    std::optional<std::vector<float>> lookup(const std::string& key) const {
        const auto path = root_ / (key + ".emb");
        if (!std::filesystem::exists(path)) return std::nullopt;
        std::string blob;
        try {
            blob = detail::read_file(path);
        } catch (const std::exception&) {
            return std::nullopt;
        }
        if (blob.size() < 12 || blob.compare(0, 4, "KEMB") != 0)
            throw FormatError("corrupt embedding cache entry: " + path.string());
        std::uint32_t version, dim;
        std::memcpy(&version, blob.data() + 4, 4);
        std::memcpy(&dim, blob.data() + 8, 4);
        if (version != 1 || blob.size() != 12 + std::size_t{dim} * 4)
            throw FormatError("corrupt embedding cache entry: " + path.string());
        std::vector<float> values(dim);
        std::memcpy(values.data(), blob.data() + 12, std::size_t{dim} * 4);
        return values;
    }

    void store(const std::string& key, const std::vector<float>& values) const {
        std::string blob;
        blob.reserve(12 + values.size() * 4);
        blob.append("KEMB", 4);
        const std::uint32_t version = 1, dim = static_cast<std::uint32_t>(values.size());
        blob.append(reinterpret_cast<const char*>(&version), 4);
        blob.append(reinterpret_cast<const char*>(&dim), 4);
        blob.append(reinterpret_cast<const char*>(values.data()), values.size() * 4);
        detail::atomic_write_file(root_ / (key + ".emb"), blob);
    }

  private:
    std::filesystem::path root_;
};

class CachingEmbeddingBackend : public EmbeddingBackend {
  public:
    CachingEmbeddingBackend(std::shared_ptr<EmbeddingBackend> inner,
                            std::filesystem::path cache_dir)
        : inner_(std::move(inner)), cache_(std::move(cache_dir)) {}

    EmbeddingVector embed(const std::string& text) override {
        const std::string key = EmbeddingCache::key(inner_->model_name(), text);
        if (auto hit = cache_.lookup(key)) {
            if (expected_dim_ != 0 && static_cast<int>(hit->size()) != expected_dim_)
                throw ConfigError("embedding cache dim mismatch: expected " +
                                  std::to_string(expected_dim_) + ", found " +
                                  std::to_string(hit->size()));
            EmbeddingVector v;
            v.values = std::move(*hit);
            v.source_model = inner_->model_name();
            expected_dim_ = v.dim();
            return v;
        }
        EmbeddingVector v = inner_->embed(text);
        if (expected_dim_ != 0 && v.dim() != expected_dim_)
            throw ConfigError("embedding backend dim changed mid-run: expected " +
                              std::to_string(expected_dim_) + ", got " +
                              std::to_string(v.dim()));
        expected_dim_ = v.dim();
        cache_.store(key, v.values);
        return v;
    }

    std::string model_name() const override { return inner_->model_name(); }

  private:
    std::shared_ptr<EmbeddingBackend> inner_;
    EmbeddingCache cache_;
    int expected_dim_ = 0;
};

// Fills a demonstration bank's embedding rows (one per entry, keyed by the
// demo's question stem).
inline void embed_bank(DemonstrationBank& bank, EmbeddingBackend& backend) {
    bank.embeddings.clear();
    bank.embedding_model = backend.model_name();
    for (const auto& entry : bank.entries) {
        EmbeddingVector v = backend.embed(entry.question.stem_text);
        check_finite(v);
        bank.embeddings.push_back(std::move(v.values));
    }
}

// Bank embeddings as a D x N column matrix for the policy network.
inline Eigen::MatrixXd bank_matrix(const DemonstrationBank& bank) {
    if (bank.embeddings.size() != bank.entries.size())
        throw ContractViolation("bank " + bank.knowledge_id + " has no embeddings");
    if (bank.embeddings.empty()) return Eigen::MatrixXd(0, 0);
    const int dim = static_cast<int>(bank.embeddings.front().size());
    Eigen::MatrixXd m(dim, static_cast<int>(bank.embeddings.size()));
    for (int j = 0; j < m.cols(); ++j) {
        if (static_cast<int>(bank.embeddings[j].size()) != dim)
            throw ContractViolation("bank " + bank.knowledge_id + " mixes embedding dims");
        for (int i = 0; i < dim; ++i) m(i, j) = bank.embeddings[j][i];
    }
    return m;
}

inline Eigen::VectorXd to_eigen(const EmbeddingVector& v) {
    Eigen::VectorXd out(v.dim());
    for (int i = 0; i < v.dim(); ++i) out(i) = v.values[i];
    return out;
}

}  // namespace kctag
