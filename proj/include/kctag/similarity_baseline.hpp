#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "kctag/core_data.hpp"
#include "kctag/embedding.hpp"
#include "kctag/errors.hpp"
#include "kctag/metrics.hpp"

namespace kctag {

// Hyper-parameters of the similarity tagger: either a similarity threshold
// eta, or per-knowledge top-K selection. Exactly one is active.
struct BaselineConfig {
    enum class Mode { Threshold, TopK };

    Mode mode = Mode::Threshold;
    double eta = 0.0;
    int k = 0;

    static BaselineConfig threshold(double eta) {
        return {Mode::Threshold, eta, 0};
    }
    static BaselineConfig top_k(int k) { return {Mode::TopK, 0.0, k}; }
};

enum class SimilarityMode { KnowledgeToQuestion, QuestionToQuestion };

struct ScoredCandidate {
    std::string question_id;
    double similarity = 0;
    JudgmentLabel gold = JudgmentLabel::NoMatch;
};

// All eval candidates of one knowledge, scored under one embedding model.
using ScoredPool = std::map<std::string, std::vector<ScoredCandidate>>;

// K/Q scores a question against the knowledge definition; Q/Q scores it
// against the bank's positive demonstration questions and takes the maximum.
inline ScoredPool score_eval_pairs(SimilarityMode mode,
                                   const std::vector<TaggingExample>& eval_set,
                                   const std::map<std::string, DemonstrationBank>& banks,
                                   EmbeddingBackend& backend) {
    ScoredPool pool;
    std::map<std::string, EmbeddingVector> knowledge_vecs;
    std::map<std::string, std::vector<EmbeddingVector>> positive_demo_vecs;

    for (const auto& ex : eval_set) {
        const std::string& kid = ex.knowledge.id;
        const EmbeddingVector xq = backend.embed(ex.question.stem_text);

        double sim = 0;
        if (mode == SimilarityMode::KnowledgeToQuestion) {
            auto it = knowledge_vecs.find(kid);
            if (it == knowledge_vecs.end())
                it = knowledge_vecs.emplace(kid, backend.embed(ex.knowledge.definition_text))
                         .first;
            sim = cosine_similarity(it->second, xq);
        } else {
            auto it = positive_demo_vecs.find(kid);
            if (it == positive_demo_vecs.end()) {
                std::vector<EmbeddingVector> vecs;
                auto bank_it = banks.find(kid);
                if (bank_it != banks.end())
                    for (const auto& demo : bank_it->second.entries)
                        if (demo.label == JudgmentLabel::Match)
                            vecs.push_back(backend.embed(demo.question.stem_text));
                it = positive_demo_vecs.emplace(kid, std::move(vecs)).first;
            }
            if (it->second.empty())
                throw DataError("knowledge " + kid +
                                " has no positive demonstrations for Q/Q scoring");
            sim = -1.0;
            for (const auto& dv : it->second)
                sim = std::max(sim, cosine_similarity(dv, xq));
        }
        pool[kid].push_back({ex.question.id, sim, ex.label});
    }
    return pool;
}

// Predicts one question given its knowledge's scored pool. Threshold mode:
// Match iff similarity >= eta. Top-K mode: Match iff the question is among
// the K most similar candidates, ties broken by question id ascending.
inline JudgmentLabel baseline_predict(const std::string& question_id,
                                      const std::vector<ScoredCandidate>& pool,
                                      const BaselineConfig& cfg) {
    const ScoredCandidate* target = nullptr;
    for (const auto& c : pool)
        if (c.question_id == question_id) target = &c;
    if (!target)
        throw ContractViolation("baseline_predict: question " + question_id +
                                " is not in the scored pool");

    if (cfg.mode == BaselineConfig::Mode::Threshold)
        return target->similarity >= cfg.eta ? JudgmentLabel::Match
                                             : JudgmentLabel::NoMatch;

    // rank of the target under (similarity desc, question_id asc)
    int better = 0;
    for (const auto& c : pool) {
        if (c.question_id == question_id) continue;
        if (c.similarity > target->similarity ||
            (c.similarity == target->similarity && c.question_id < target->question_id))
            ++better;
    }
    return better < cfg.k ? JudgmentLabel::Match : JudgmentLabel::NoMatch;
}

inline ConfusionCounts score_config(const ScoredPool& pool, const BaselineConfig& cfg) {
    ConfusionCounts counts;
    for (const auto& [kid, candidates] : pool) {
        if (cfg.mode == BaselineConfig::Mode::Threshold) {
            for (const auto& c : candidates)
                counts.add(c.gold == JudgmentLabel::Match, c.similarity >= cfg.eta);
        } else {
            std::vector<const ScoredCandidate*> order;
            order.reserve(candidates.size());
            for (const auto& c : candidates) order.push_back(&c);
            std::sort(order.begin(), order.end(),
                      [](const ScoredCandidate* a, const ScoredCandidate* b) {
                          if (a->similarity != b->similarity)
                              return a->similarity > b->similarity;
                          return a->question_id < b->question_id;
                      });
            for (std::size_t rank = 0; rank < order.size(); ++rank)
                counts.add(order[rank]->gold == JudgmentLabel::Match,
                           rank < static_cast<std::size_t>(cfg.k));
        }
    }
    return counts;
}

struct GridEntry {
    BaselineConfig cfg;
    ConfusionCounts counts;
    MetricSummary metrics;
};

struct GridSearchResult {
    BaselineConfig best;
    MetricSummary best_metrics;
    std::vector<GridEntry> table;
};

inline std::vector<double> default_eta_grid() {
    std::vector<double> etas;
    for (int i = 0; i < 20; ++i) etas.push_back(0.05 * i);
    return etas;
}

inline std::vector<int> default_k_grid() {
    std::vector<int> ks;
    for (int k = 1; k <= 50; ++k) ks.push_back(k);
    return ks;
}

// Exhaustive search over the configuration space, argmax F1. The candidate
// order (thresholds by descending eta, then top-K by ascending K) plus
// strict improvement makes the tie-break deterministic: larger eta wins,
// then smaller K.
inline GridSearchResult grid_search_baseline(const ScoredPool& pool,
                                             const std::vector<double>& etas,
                                             const std::vector<int>& ks) {
    if (etas.empty() && ks.empty())
        throw DataError("grid search needs a non-empty configuration space");

    std::vector<BaselineConfig> candidates;
    std::vector<double> sorted_etas = etas;
    std::sort(sorted_etas.begin(), sorted_etas.end(), std::greater<>());
    for (double eta : sorted_etas) candidates.push_back(BaselineConfig::threshold(eta));
    std::vector<int> sorted_ks = ks;
    std::sort(sorted_ks.begin(), sorted_ks.end());
    for (int k : sorted_ks) candidates.push_back(BaselineConfig::top_k(k));

    GridSearchResult result;
    double best_f1 = -1;
    for (const auto& cfg : candidates) {
        GridEntry entry{cfg, score_config(pool, cfg), {}};
        entry.metrics = summarize(entry.counts);
        if (entry.metrics.f1 > best_f1) {
            best_f1 = entry.metrics.f1;
            result.best = cfg;
            result.best_metrics = entry.metrics;
        }
        result.table.push_back(entry);
    }
    return result;
}

}  // namespace kctag
