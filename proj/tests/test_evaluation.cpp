#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <memory>
#include <unistd.h>

#include "kctag/evaluation.hpp"
#include "support/synthetic.hpp"

using namespace kctag;

namespace {

// Deterministic corpus of `pairs` pairs across `knowledge` ids with banks.
TrainingCorpus make_corpus(HashEmbeddingBackend& backend, int knowledge, int per_knowledge) {
    std::map<std::string, DemonstrationBank> banks;
    std::vector<TaggingExample> pairs;
    for (int k = 0; k < knowledge; ++k) {
        const std::string kid = "k" + testing::pad3(k);
        DemonstrationBank bank;
        bank.knowledge_id = kid;
        for (int d = 0; d < 6; ++d)
            bank.entries.push_back(testing::make_example(
                kid, kid + "-d" + std::to_string(d),
                d % 2 == 0 ? JudgmentLabel::Match : JudgmentLabel::NoMatch, true));
        banks.emplace(kid, std::move(bank));
        for (int q = 0; q < per_knowledge; ++q)
            pairs.push_back(testing::make_example(
                kid, kid + "-q" + testing::pad3(q),
                q % 3 == 0 ? JudgmentLabel::Match : JudgmentLabel::NoMatch, false));
    }
    return build_corpus(std::move(pairs), std::move(banks), backend);
}

SimulatedJudgeSpec correct_spec(const TrainingCorpus& corpus) {
    SimulatedJudgeSpec spec;
    spec.base_behavior = SimulatedJudgeSpec::BaseBehavior::AlwaysCorrect;
    for (const auto& pair : corpus.pairs)
        spec.gold_labels[{pair.knowledge.id, pair.question.id}] = pair.label;
    return spec;
}

class UnparseableJudge : public JudgeBackend {
  public:
    JudgeResponse query(const JudgeRequest&) override {
        JudgeResponse r;
        r.raw_text = "no judgment token in this response";
        r.parsed = parse_judgment(r.raw_text);
        r.provenance = ResponseProvenance::Simulated;
        return r;
    }
};

class FlakyJudge : public JudgeBackend {
  public:
    FlakyJudge(std::shared_ptr<JudgeBackend> inner, std::string failing_question)
        : inner_(std::move(inner)), failing_(std::move(failing_question)) {}
    JudgeResponse query(const JudgeRequest& r) override {
        if (r.prompt.question_id == failing_)
            throw BackendError("backend unavailable after 3 attempts");
        return inner_->query(r);
    }

  private:
    std::shared_ptr<JudgeBackend> inner_;
    std::string failing_;
};

}  // namespace

TEST_CASE("summarize computes the standard identities") {
    SECTION("all correct") {
        const MetricSummary m = summarize({10, 0, 30, 0});
        CHECK(m.accuracy == 1.0);
        CHECK(m.f1 == 1.0);
    }
    SECTION("symmetric counts") {
        const MetricSummary m = summarize({25, 25, 25, 25});
        CHECK(m.accuracy == 0.5);
        CHECK(m.precision == 0.5);
        CHECK(m.recall == 0.5);
        CHECK(m.f1 == 0.5);
    }
    SECTION("hand-computed case") {
        const MetricSummary m = summarize({3, 1, 4, 2});
        CHECK(m.precision == Catch::Approx(0.75).margin(1e-15));
        CHECK(m.recall == Catch::Approx(0.6).margin(1e-15));
        CHECK(m.f1 == Catch::Approx(2.0 / 3.0).margin(1e-12));
    }
}

TEST_CASE("f1 is the harmonic mean of precision and recall on random tables") {
    Rng rng(19);
    for (int trial = 0; trial < 1000; ++trial) {
        const ConfusionCounts c{static_cast<std::int64_t>(rng.below(50)),
                                static_cast<std::int64_t>(rng.below(50)),
                                static_cast<std::int64_t>(rng.below(50)),
                                static_cast<std::int64_t>(rng.below(50))};
        const MetricSummary m = summarize(c);
        if (m.precision + m.recall > 0) {
            const double harmonic =
                2.0 * m.precision * m.recall / (m.precision + m.recall);
            CHECK(std::abs(m.f1 - harmonic) <= 1e-12);
        } else {
            CHECK(m.f1 == 0.0);
            CHECK(m.f1_zero_div);
        }
    }
}

TEST_CASE("zero-division conventions raise flags") {
    const MetricSummary no_predicted_positives = summarize({0, 0, 10, 5});
    CHECK(no_predicted_positives.precision == 0.0);
    CHECK(no_predicted_positives.precision_zero_div);

    const MetricSummary no_gold_positives = summarize({0, 5, 10, 0});
    CHECK(no_gold_positives.recall == 0.0);
    CHECK(no_gold_positives.recall_zero_div);
}

TEST_CASE("pearson correlation guards") {
    bool flag = false;
    CHECK_FALSE(pearson_correlation(std::vector<double>{1, 2}, std::vector<double>{1, 2},
                                    &flag)
                    .has_value());  // fewer than 3 points

    const std::vector<double> x{1, 2, 3, 4};
    const std::vector<double> constant{5, 5, 5, 5};
    const auto r = pearson_correlation(x, constant, &flag);
    REQUIRE(r.has_value());
    CHECK(*r == 0.0);
    CHECK(flag);

    const std::vector<double> y{2, 4, 6, 8};
    CHECK(*pearson_correlation(x, y, &flag) == Catch::Approx(1.0).margin(1e-12));
    const std::vector<double> neg{8, 6, 4, 2};
    CHECK(*pearson_correlation(x, neg, &flag) == Catch::Approx(-1.0).margin(1e-12));
}

TEST_CASE("zero-shot evaluation has mean_demos 0 and honors the judge") {
    HashEmbeddingBackend backend(8, 21);
    const TrainingCorpus corpus = make_corpus(backend, 3, 9);
    SimulatedJudge judge(correct_spec(corpus));
    ZeroShotTagger tagger(judge, {});

    const MetricReport report = evaluate(tagger, corpus.episode_pairs);
    CHECK(report.pairs == 27);
    CHECK(report.errored == 0);
    CHECK(report.mean_demos == 0.0);
    CHECK(report.micro.accuracy == 1.0);
    CHECK(report.per_knowledge.size() == 3);
}

TEST_CASE("k-shot evaluation uses exactly k demonstrations") {
    HashEmbeddingBackend backend(8, 22);
    const TrainingCorpus corpus = make_corpus(backend, 2, 6);
    SimulatedJudge judge(correct_spec(corpus));

    KShotTagger random4(judge, {}, 4, ShotSelection::Random, 17);
    const MetricReport report = evaluate(random4, corpus.episode_pairs);
    CHECK(report.mean_demos == 4.0);

    KShotTagger similar2(judge, {}, 2, ShotSelection::Similar, 17);
    CHECK(evaluate(similar2, corpus.episode_pairs).mean_demos == 2.0);
}

TEST_CASE("retriever evaluation stays within the shot budget and logs trajectories") {
    HashEmbeddingBackend backend(8, 23);
    const TrainingCorpus corpus = make_corpus(backend, 2, 5);
    SimulatedJudge judge(correct_spec(corpus));
    const PolicyParameters params = init_params(corpus.embedding_dim, 6, 2, 3);
    RetrieverTagger tagger(params, RetrieverVariantConfig::flex_sdr(3, 0.3, 1.0), judge, {});

    std::vector<Trajectory> audit;
    const MetricReport report = evaluate(tagger, corpus.episode_pairs, {}, &audit);
    CHECK(report.mean_demos <= 3.0);
    CHECK(audit.size() == corpus.episode_pairs.size());
}

TEST_CASE("unparseable judgments count as wrong predictions") {
    HashEmbeddingBackend backend(8, 24);
    const TrainingCorpus corpus = make_corpus(backend, 2, 4);
    UnparseableJudge judge;
    ZeroShotTagger tagger(judge, {});

    const MetricReport report = evaluate(tagger, corpus.episode_pairs);
    CHECK(report.unparseable == report.pairs);
    CHECK(report.micro.accuracy == 0.0);
    CHECK(report.errored == 0);
}

TEST_CASE("backend failures exclude the pair and are counted loudly") {
    HashEmbeddingBackend backend(8, 25);
    const TrainingCorpus corpus = make_corpus(backend, 2, 4);
    auto inner = std::make_shared<SimulatedJudge>(correct_spec(corpus));
    FlakyJudge judge(inner, corpus.pairs[2].question.id);
    ZeroShotTagger tagger(judge, {});

    const MetricReport report = evaluate(tagger, corpus.episode_pairs);
    CHECK(report.errored == 1);
    CHECK(report.counts.total() == report.pairs - 1);
    CHECK(report.micro.accuracy == 1.0);  // the scored pairs are all correct
}

TEST_CASE("metrics are invariant under eval-set permutation") {
    HashEmbeddingBackend backend(8, 26);
    const TrainingCorpus corpus = make_corpus(backend, 3, 7);
    SimulatedJudgeSpec spec = correct_spec(corpus);
    spec.base_behavior = SimulatedJudgeSpec::BaseBehavior::SeededHash;
    spec.seed = 5;
    SimulatedJudge judge(spec);
    ZeroShotTagger tagger(judge, {});

    const MetricReport forward = evaluate(tagger, corpus.episode_pairs);
    std::vector<EpisodePair> reversed(corpus.episode_pairs.rbegin(),
                                      corpus.episode_pairs.rend());
    const MetricReport backward = evaluate(tagger, reversed);
    CHECK(forward.micro.accuracy == backward.micro.accuracy);
    CHECK(forward.micro.f1 == backward.micro.f1);
    CHECK(forward.counts.tp == backward.counts.tp);
}

TEST_CASE("temperature-0 evaluation is byte-identical given a warm cache") {
    HashEmbeddingBackend backend(8, 28);
    const TrainingCorpus corpus = make_corpus(backend, 2, 6);
    SimulatedJudgeSpec spec = correct_spec(corpus);
    spec.base_behavior = SimulatedJudgeSpec::BaseBehavior::SeededHash;

    const auto cache_dir =
        std::filesystem::temp_directory_path() /
        ("kctag_eval_cache_" + std::to_string(::getpid()));
    std::filesystem::remove_all(cache_dir);
    CachingJudge judge(std::make_shared<SimulatedJudge>(spec), cache_dir);
    ZeroShotTagger tagger(judge, {});

    const MetricReport cold = evaluate(tagger, corpus.episode_pairs);
    const MetricReport warm = evaluate(tagger, corpus.episode_pairs);
    CHECK(report_to_json(cold).dump() == report_to_json(warm).dump());
    std::filesystem::remove_all(cache_dir);
}

TEST_CASE("concurrent evaluation produces the sequential report") {
    HashEmbeddingBackend backend(8, 27);
    const TrainingCorpus corpus = make_corpus(backend, 3, 8);
    SimulatedJudgeSpec spec = correct_spec(corpus);
    spec.base_behavior = SimulatedJudgeSpec::BaseBehavior::SeededHash;
    SimulatedJudge judge(spec);
    ZeroShotTagger tagger(judge, {});

    const MetricReport sequential = evaluate(tagger, corpus.episode_pairs, {1});
    const MetricReport parallel = evaluate(tagger, corpus.episode_pairs, {4});
    CHECK(report_to_json(sequential).dump() == report_to_json(parallel).dump());
}

TEST_CASE("report JSON round-trips") {
    MetricReport r;
    r.pipeline = "unit";
    r.counts = {3, 1, 4, 2};
    r.micro = summarize(r.counts);
    r.pairs = 10;
    r.errored = 0;
    r.unparseable = 1;
    r.mean_demos = 1.25;
    r.per_knowledge["k0"] = {{3, 1, 4, 2}, 0.7, 1.25, 10, 0};

    const MetricReport back = report_from_json(report_to_json(r));
    CHECK(back.micro.f1 == r.micro.f1);
    CHECK(back.counts.tp == 3);
    CHECK(back.per_knowledge.at("k0").mean_demos == 1.25);
}

TEST_CASE("knowledge_accuracy_vs_demos joins reports and correlates") {
    MetricReport zero, retr;
    SECTION("planted negative relationship") {
        for (int k = 0; k < 6; ++k) {
            const std::string kid = "k" + std::to_string(k);
            const double acc = k < 3 ? 1.0 : 0.0;
            zero.per_knowledge[kid] = {{}, acc, 0.0, 10, 0};
            retr.per_knowledge[kid] = {{}, 1.0, k < 3 ? 0.1 : 1.9, 10, 0};
        }
        const UsageCorrelation u = knowledge_accuracy_vs_demos(zero, retr);
        REQUIRE(u.pearson.has_value());
        CHECK(*u.pearson < -0.9);
        CHECK(u.points.size() == 6);
    }
    SECTION("constant demo usage returns zero with a flag") {
        for (int k = 0; k < 4; ++k) {
            const std::string kid = "k" + std::to_string(k);
            zero.per_knowledge[kid] = {{}, k % 2 ? 1.0 : 0.5, 0.0, 10, 0};
            retr.per_knowledge[kid] = {{}, 1.0, 2.0, 10, 0};
        }
        const UsageCorrelation u = knowledge_accuracy_vs_demos(zero, retr);
        REQUIRE(u.pearson.has_value());
        CHECK(*u.pearson == 0.0);
        CHECK(u.zero_variance);
    }
    SECTION("fewer than three shared knowledge ids omits the correlation") {
        zero.per_knowledge["a"] = {{}, 1.0, 0.0, 5, 0};
        zero.per_knowledge["b"] = {{}, 0.0, 0.0, 5, 0};
        retr.per_knowledge["a"] = {{}, 1.0, 1.0, 5, 0};
        retr.per_knowledge["b"] = {{}, 1.0, 2.0, 5, 0};
        const UsageCorrelation u = knowledge_accuracy_vs_demos(zero, retr);
        CHECK_FALSE(u.pearson.has_value());
    }
}
