#pragma once

#include <algorithm>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "kctag/episode_engine.hpp"
#include "kctag/errors.hpp"
#include "kctag/metrics.hpp"
#include "kctag/promptpg.hpp"
#include "kctag/trainer.hpp"

namespace kctag {

// ---------------------------------------------------------------------------
// Tagging pipelines
// ---------------------------------------------------------------------------

struct TagOutcome {
    std::optional<JudgmentLabel> prediction;  // absent when unparseable
    int demos_used = 0;
    bool errored = false;
    std::string error_text;
    std::optional<Trajectory> trajectory;  // retriever pipelines only
};

class Tagger {
  public:
    virtual ~Tagger() = default;
    virtual std::string name() const = 0;
    virtual TagOutcome tag(const EpisodePair& pair) = 0;

  protected:
    // Evaluation runs must be reproducible: sampling temperatures are out.
    static JudgeSettings require_deterministic(JudgeSettings settings) {
        if (settings.decoding.temperature != 0.0)
            throw ContractViolation("evaluation pipelines require temperature 0");
        return settings;
    }
};

inline std::optional<JudgmentLabel> label_from_verdict(Verdict v) {
    switch (v) {
        case Verdict::Yes: return JudgmentLabel::Match;
        case Verdict::No: return JudgmentLabel::NoMatch;
        default: return std::nullopt;
    }
}

class ZeroShotTagger : public Tagger {
  public:
    ZeroShotTagger(JudgeBackend& judge, JudgeSettings settings)
        : judge_(&judge), settings_(require_deterministic(std::move(settings))) {}

    std::string name() const override { return "zero-shot"; }

    TagOutcome tag(const EpisodePair& ep) override {
        const JudgeRequest req{
            build_zero_shot_prompt(ep.pair->knowledge, ep.pair->question),
            settings_.decoding, settings_.model_name};
        TagOutcome out;
        out.prediction = label_from_verdict(judge_->query(req).parsed.verdict);
        return out;
    }

  private:
    JudgeBackend* judge_;
    JudgeSettings settings_;
};

enum class ShotSelection { Random, Similar };

// Naive k-shot pipeline: k demonstrations per query, either drawn by seeded
// shuffle or ranked by embedding similarity to the question.
class KShotTagger : public Tagger {
  public:
    KShotTagger(JudgeBackend& judge, JudgeSettings settings, int shots,
                ShotSelection selection, std::uint64_t seed)
        : judge_(&judge), settings_(require_deterministic(std::move(settings))),
          shots_(shots), selection_(selection), seed_(seed) {}

    std::string name() const override {
        return std::to_string(shots_) + "-shot-" +
               (selection_ == ShotSelection::Random ? "random" : "similar");
    }

    TagOutcome tag(const EpisodePair& ep) override {
        if (ep.bank == nullptr)
            throw DataError("k-shot tagging needs a demonstration bank for knowledge " +
                            ep.pair->knowledge.id);
        const auto& entries = ep.bank->entries;
        const int take = std::min<int>(shots_, static_cast<int>(entries.size()));
        std::vector<int> order(entries.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

        if (selection_ == ShotSelection::Random) {
            Rng rng(mix64(seed_, mix64(fnv1a64(ep.pair->knowledge.id),
                                       fnv1a64(ep.pair->question.id))));
            rng.shuffle(order);
        } else {
            std::vector<double> sims(entries.size());
            for (std::size_t i = 0; i < entries.size(); ++i)
                sims[i] = ep.bank_embed->col(static_cast<int>(i)).dot(ep.x_q);
            std::sort(order.begin(), order.end(), [&](int a, int b) {
                if (sims[static_cast<std::size_t>(a)] != sims[static_cast<std::size_t>(b)])
                    return sims[static_cast<std::size_t>(a)] >
                           sims[static_cast<std::size_t>(b)];
                return a < b;
            });
        }

        std::vector<TaggingExample> demos;
        for (int i = 0; i < take; ++i)
            demos.push_back(entries[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);

        const JudgeRequest req{
            build_few_shot_prompt(ep.pair->knowledge, ep.pair->question, demos),
            settings_.decoding, settings_.model_name};
        TagOutcome out;
        out.prediction = label_from_verdict(judge_->query(req).parsed.verdict);
        out.demos_used = take;
        return out;
    }

  private:
    JudgeBackend* judge_;
    JudgeSettings settings_;
    int shots_;
    ShotSelection selection_;
    std::uint64_t seed_;
};

// Greedy-decoded retrieval episodes; the prediction is the episode's final
// judged verdict.
class RetrieverTagger : public Tagger {
  public:
    RetrieverTagger(const PolicyParameters& params, RetrieverVariantConfig variant,
                    JudgeBackend& judge, JudgeSettings settings)
        : params_(&params), variant_(variant), judge_(&judge),
          settings_(require_deterministic(std::move(settings))) {}

    std::string name() const override { return variant_name(variant_.variant); }

    TagOutcome tag(const EpisodePair& ep) override {
        Rng rng(0);  // greedy decoding draws nothing
        Trajectory traj = run_episode(ep, *params_, *judge_, variant_,
                                      SelectionMode::Greedy, rng, settings_);
        TagOutcome out;
        out.prediction = label_from_verdict(traj.final_verdict());
        out.demos_used = traj.demos_used();
        out.trajectory = std::move(traj);
        return out;
    }

  private:
    const PolicyParameters* params_;
    RetrieverVariantConfig variant_;
    JudgeBackend* judge_;
    JudgeSettings settings_;
};

// PromptPG at inference: top-shots scores, one judge query.
class PromptPgTagger : public Tagger {
  public:
    PromptPgTagger(const PromptPgParams& params, int shots, JudgeBackend& judge,
                   JudgeSettings settings)
        : params_(&params), shots_(shots), judge_(&judge),
          settings_(require_deterministic(std::move(settings))) {}

    std::string name() const override { return "promptpg"; }

    TagOutcome tag(const EpisodePair& ep) override {
        if (ep.bank == nullptr)
            throw DataError("promptpg tagging needs a demonstration bank for knowledge " +
                            ep.pair->knowledge.id);
        const int take = std::min<int>(shots_, static_cast<int>(ep.bank->entries.size()));
        PromptPgTape tape(*params_, ep.x_k, ep.x_q, *ep.bank_embed);
        std::vector<int> actions;
        Rng rng(0);
        tape.select(take, SelectionMode::Greedy, rng, actions);
        std::vector<TaggingExample> demos;
        for (int a : actions)
            demos.push_back(ep.bank->entries[static_cast<std::size_t>(a)]);
        const JudgeRequest req{
            build_few_shot_prompt(ep.pair->knowledge, ep.pair->question, demos),
            settings_.decoding, settings_.model_name};
        TagOutcome out;
        out.prediction = label_from_verdict(judge_->query(req).parsed.verdict);
        out.demos_used = take;
        return out;
    }

  private:
    const PromptPgParams* params_;
    int shots_;
    JudgeBackend* judge_;
    JudgeSettings settings_;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct KnowledgeBreakdown {
    ConfusionCounts counts;
    double accuracy = 0;
    double mean_demos = 0;
    std::int64_t pairs = 0;
    std::int64_t errored = 0;
};

struct PredictionRecord {
    std::string knowledge_id;
    std::string question_id;
    int gold = 0;
    int predicted = 0;
    bool unparseable = false;
    bool errored = false;
    int demos_used = 0;
};

struct MetricReport {
    std::string pipeline;
    MetricSummary micro;
    ConfusionCounts counts;
    double mean_demos = 0;
    std::int64_t pairs = 0;
    std::int64_t errored = 0;
    std::int64_t unparseable = 0;
    std::map<std::string, KnowledgeBreakdown> per_knowledge;
    std::vector<PredictionRecord> predictions;
};

struct EvaluationOptions {
    int concurrency = 1;
};

// Runs the pipeline over every eval pair and accumulates micro metrics plus
// the per-knowledge breakdown. An unparseable judgment counts as a wrong
// prediction; a backend failure excludes the pair and is reported loudly.
// Outcomes are aggregated in pair order, so reports do not depend on the
// worker schedule.
inline MetricReport evaluate(Tagger& tagger, const std::vector<EpisodePair>& pairs,
                             const EvaluationOptions& opts = {},
                             std::vector<Trajectory>* trajectory_audit = nullptr) {
    std::vector<TagOutcome> outcomes(pairs.size());
    const int workers =
        std::max(1, std::min<int>(opts.concurrency, static_cast<int>(pairs.size())));

    auto run_range = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t i = begin; i < pairs.size(); i += stride) {
            try {
                outcomes[i] = tagger.tag(pairs[i]);
            } catch (const std::exception& e) {
                outcomes[i].errored = true;
                outcomes[i].error_text = e.what();
            }
        }
    };
    if (workers == 1) {
        run_range(0, 1);
    } else {
        std::vector<std::thread> threads;
        for (int w = 0; w < workers; ++w)
            threads.emplace_back(run_range, static_cast<std::size_t>(w),
                                 static_cast<std::size_t>(workers));
        for (auto& t : threads) t.join();
    }

    MetricReport report;
    report.pipeline = tagger.name();
    double total_demos = 0;
    std::map<std::string, double> knowledge_demos;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const TaggingExample& pair = *pairs[i].pair;
        TagOutcome& out = outcomes[i];
        auto& bk = report.per_knowledge[pair.knowledge.id];
        ++report.pairs;
        ++bk.pairs;

        PredictionRecord rec;
        rec.knowledge_id = pair.knowledge.id;
        rec.question_id = pair.question.id;
        rec.gold = label_to_int(pair.label);
        rec.demos_used = out.demos_used;

        if (out.errored) {
            ++report.errored;
            ++bk.errored;
            rec.errored = true;
            report.predictions.push_back(std::move(rec));
            continue;
        }

        JudgmentLabel predicted;
        if (out.prediction) {
            predicted = *out.prediction;
        } else {
            ++report.unparseable;
            rec.unparseable = true;
            predicted = opposite(pair.label);  // format failure = wrong prediction
        }
        rec.predicted = label_to_int(predicted);

        report.counts.add(pair.label == JudgmentLabel::Match,
                          predicted == JudgmentLabel::Match);
        bk.counts.add(pair.label == JudgmentLabel::Match,
                      predicted == JudgmentLabel::Match);
        total_demos += out.demos_used;
        knowledge_demos[pair.knowledge.id] += out.demos_used;
        if (trajectory_audit && out.trajectory)
            trajectory_audit->push_back(std::move(*out.trajectory));
        report.predictions.push_back(std::move(rec));
    }

    report.micro = summarize(report.counts);
    const std::int64_t scored = report.pairs - report.errored;
    report.mean_demos = scored == 0 ? 0.0 : total_demos / static_cast<double>(scored);
    for (auto& [kid, bk] : report.per_knowledge) {
        bk.accuracy = summarize(bk.counts).accuracy;
        const std::int64_t k_scored = bk.pairs - bk.errored;
        bk.mean_demos =
            k_scored == 0 ? 0.0 : knowledge_demos[kid] / static_cast<double>(k_scored);
    }
    return report;
}

inline nlohmann::json report_to_json(const MetricReport& r) {
    nlohmann::json per_knowledge = nlohmann::json::object();
    for (const auto& [kid, bk] : r.per_knowledge)
        per_knowledge[kid] = {{"tp", bk.counts.tp},       {"fp", bk.counts.fp},
                              {"tn", bk.counts.tn},       {"fn", bk.counts.fn},
                              {"accuracy", bk.accuracy},  {"mean_demos", bk.mean_demos},
                              {"pairs", bk.pairs},        {"errored", bk.errored}};
    return nlohmann::json{
        {"pipeline", r.pipeline},
        {"accuracy", r.micro.accuracy},
        {"precision", r.micro.precision},
        {"recall", r.micro.recall},
        {"f1", r.micro.f1},
        {"mean_demos", r.mean_demos},
        {"pairs", r.pairs},
        {"errored", r.errored},
        {"unparseable", r.unparseable},
        {"counts",
         {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"tn", r.counts.tn}, {"fn", r.counts.fn}}},
        {"flags",
         {{"precision_zero_div", r.micro.precision_zero_div},
          {"recall_zero_div", r.micro.recall_zero_div},
          {"f1_zero_div", r.micro.f1_zero_div}}},
        {"per_knowledge", per_knowledge}};
}

inline MetricReport report_from_json(const nlohmann::json& j) {
    MetricReport r;
    r.pipeline = j.value("pipeline", "");
    r.micro.accuracy = j.at("accuracy").get<double>();
    r.micro.precision = j.at("precision").get<double>();
    r.micro.recall = j.at("recall").get<double>();
    r.micro.f1 = j.at("f1").get<double>();
    r.mean_demos = j.at("mean_demos").get<double>();
    r.pairs = j.at("pairs").get<std::int64_t>();
    r.errored = j.at("errored").get<std::int64_t>();
    r.unparseable = j.at("unparseable").get<std::int64_t>();
    const auto& c = j.at("counts");
    r.counts = {c.at("tp").get<std::int64_t>(), c.at("fp").get<std::int64_t>(),
                c.at("tn").get<std::int64_t>(), c.at("fn").get<std::int64_t>()};
    for (const auto& [kid, bj] : j.at("per_knowledge").items()) {
        KnowledgeBreakdown bk;
        bk.counts = {bj.at("tp").get<std::int64_t>(), bj.at("fp").get<std::int64_t>(),
                     bj.at("tn").get<std::int64_t>(), bj.at("fn").get<std::int64_t>()};
        bk.accuracy = bj.at("accuracy").get<double>();
        bk.mean_demos = bj.at("mean_demos").get<double>();
        bk.pairs = bj.at("pairs").get<std::int64_t>();
        bk.errored = bj.at("errored").get<std::int64_t>();
        r.per_knowledge[kid] = bk;
    }
    return r;
}

inline std::string render_report_table(const MetricReport& r) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "pipeline: " << r.pipeline << "\n";
    os << "pairs: " << r.pairs << "  errored: " << r.errored
       << "  unparseable: " << r.unparseable << "\n";
    os << "accuracy: " << r.micro.accuracy << "  precision: " << r.micro.precision
       << "  recall: " << r.micro.recall << "  f1: " << r.micro.f1 << "\n";
    os << "mean demonstrations: " << std::setprecision(3) << r.mean_demos << "\n";
    os << std::setprecision(4);
    os << "\nknowledge        acc     mean_demos  tp   fp   tn   fn\n";
    for (const auto& [kid, bk] : r.per_knowledge) {
        os << std::left << std::setw(16) << kid << std::right << " " << std::setw(6)
           << bk.accuracy << "  " << std::setw(10) << bk.mean_demos << "  " << std::setw(3)
           << bk.counts.tp << "  " << std::setw(3) << bk.counts.fp << "  " << std::setw(3)
           << bk.counts.tn << "  " << std::setw(3) << bk.counts.fn << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Zero-shot accuracy vs demonstration usage
// ---------------------------------------------------------------------------

struct KnowledgeUsagePoint {
    std::string knowledge_id;
    double zero_shot_accuracy = 0;
    double mean_demos = 0;
};

struct UsageCorrelation {
    std::vector<KnowledgeUsagePoint> points;
    std::optional<double> pearson;  // absent with fewer than 3 knowledge ids
    bool zero_variance = false;
};

// Joins a zero-shot report with a retriever report over their shared
// knowledge ids and correlates per-knowledge zero-shot accuracy with the
// retriever's mean demonstration usage.
inline UsageCorrelation knowledge_accuracy_vs_demos(const MetricReport& zero_shot,
                                                    const MetricReport& retriever) {
    UsageCorrelation out;
    std::vector<double> acc, demos;
    for (const auto& [kid, zs] : zero_shot.per_knowledge) {
        auto it = retriever.per_knowledge.find(kid);
        if (it == retriever.per_knowledge.end()) continue;
        out.points.push_back({kid, zs.accuracy, it->second.mean_demos});
        acc.push_back(zs.accuracy);
        demos.push_back(it->second.mean_demos);
    }
    out.pearson = pearson_correlation(acc, demos, &out.zero_variance);
    return out;
}

inline nlohmann::json usage_correlation_to_json(const UsageCorrelation& u) {
    nlohmann::json points = nlohmann::json::array();
    for (const auto& p : u.points)
        points.push_back({{"knowledge_id", p.knowledge_id},
                          {"zero_shot_accuracy", p.zero_shot_accuracy},
                          {"mean_demos", p.mean_demos}});
    nlohmann::json j{{"points", points}, {"zero_variance", u.zero_variance}};
    if (u.pearson) j["pearson"] = *u.pearson;
    return j;
}

}  // namespace kctag
