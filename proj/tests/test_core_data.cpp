#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>

#include "kctag/core_data.hpp"
#include "support/synthetic.hpp"

using namespace kctag;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    static int counter = 0;
    const fs::path dir =
        fs::temp_directory_path() / ("kctag_core_" + std::to_string(::getpid()) + "_" +
                                     std::to_string(counter++));
    fs::create_directories(dir);
    return dir;
}

fs::path write_lines(const std::vector<std::string>& lines) {
    const fs::path path = temp_dir() / "data.jsonl";
    std::ofstream out(path);
    for (const auto& line : lines) out << line << "\n";
    return path;
}

}  // namespace

TEST_CASE("load_dataset ingests a full candidate dump") {
    // 24 knowledge ids with 100 questions each, except one with 87 and one
    // with 62; 2,349 records total at roughly 1:4 positive:negative.
    std::vector<int> sizes(24, 100);
    sizes[7] = 87;
    sizes[23] = 62;
    const TaggingDataset ds = testing::make_dataset(sizes);
    REQUIRE(ds.size() == 2349);

    const fs::path path = temp_dir() / "mathknow.jsonl";
    save_dataset(ds, path);
    const TaggingDataset loaded = load_dataset(path);

    CHECK(loaded.size() == 2349);
    CHECK(loaded.knowledge_ids().size() == 24);
    int positives = 0;
    for (const auto& ex : loaded.examples) positives += ex.label == JudgmentLabel::Match;
    CHECK(positives * 4 <= static_cast<int>(loaded.size()));  // ~1:4
    CHECK(loaded == ds);  // round-trip, field for field
}

TEST_CASE("empty file loads as an empty dataset") {
    const TaggingDataset ds = load_dataset(write_lines({}));
    CHECK(ds.size() == 0);
    CHECK(ds.knowledge_ids().empty());
}

TEST_CASE("malformed line reports its line number") {
    const auto path = write_lines(
        {R"({"knowledge_id":"k","knowledge_text":"t","question_id":"q1","question_text":"s","label":1})",
         "this is not json"});
    try {
        load_dataset(path);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("duplicate pair key is rejected") {
    const std::string rec =
        R"({"knowledge_id":"k","knowledge_text":"t","question_id":"q1","question_text":"s","label":1})";
    CHECK_THROWS_AS(load_dataset(write_lines({rec, rec})), DataError);
}

TEST_CASE("label outside {0,1} is a domain error") {
    const auto path = write_lines(
        {R"({"knowledge_id":"k","knowledge_text":"t","question_id":"q1","question_text":"s","label":2})"});
    CHECK_THROWS_AS(load_dataset(path), DataError);
}

TEST_CASE("rationale/label disagreement is rejected") {
    const auto path = write_lines(
        {R"({"knowledge_id":"k","knowledge_text":"t","question_id":"q1","question_text":"s","label":1,"rationale":"reasoning... <No>"})"});
    CHECK_THROWS_AS(load_dataset(path), DataError);
}

TEST_CASE("rationale token must be terminal") {
    const auto path = write_lines(
        {R"({"knowledge_id":"k","knowledge_text":"t","question_id":"q1","question_text":"s","label":1,"rationale":"<Yes> and then more text"})"});
    CHECK_THROWS_AS(load_dataset(path), DataError);

    const auto ok = write_lines(
        {R"({"knowledge_id":"k","knowledge_text":"t","question_id":"q1","question_text":"s","label":1,"rationale":"so it matches <Yes>  "})"});
    CHECK_NOTHROW(load_dataset(ok));
}

TEST_CASE("file-declared demo split respects the per-label cap") {
    std::vector<std::string> lines;
    for (int i = 0; i < 6; ++i)
        lines.push_back(R"({"knowledge_id":"k","knowledge_text":"t","question_id":"q)" +
                        std::to_string(i) +
                        R"(","question_text":"s","label":1,"rationale":"r <Yes>","split":"demo"})");
    CHECK_THROWS_AS(load_dataset(write_lines(lines)), DataError);
}

TEST_CASE("split_demo_bank draws per-label banks and leaves the rest for eval") {
    // one knowledge with 25 positives and 75 negatives
    TaggingDataset ds;
    for (int q = 0; q < 100; ++q) {
        ds.examples.push_back(testing::make_example(
            "x02030701", "q" + testing::pad3(q),
            q < 25 ? JudgmentLabel::Match : JudgmentLabel::NoMatch, true));
        ds.splits.push_back(Split::Eval);
    }

    const SplitResult split = split_demo_bank(ds, 5, 42);
    REQUIRE(split.banks.size() == 1);
    const DemonstrationBank& bank = split.banks.at("x02030701");
    CHECK(bank.entries.size() == 10);
    CHECK(split.eval_set.size() == 90);
    CHECK(split.warnings.empty());

    int positives = 0;
    for (const auto& e : bank.entries) positives += e.label == JudgmentLabel::Match;
    CHECK(positives == 5);

    // banks and eval set are disjoint and cover the dataset
    std::set<std::string> bank_ids, eval_ids;
    for (const auto& e : bank.entries) bank_ids.insert(e.question.id);
    for (const auto& e : split.eval_set) eval_ids.insert(e.question.id);
    CHECK(bank_ids.size() + eval_ids.size() == ds.size());
    for (const auto& id : bank_ids) CHECK_FALSE(eval_ids.count(id));
}

TEST_CASE("split_demo_bank with per_label=0 sends everything to eval") {
    const TaggingDataset ds = testing::make_dataset({10, 10});
    const SplitResult split = split_demo_bank(ds, 0, 1);
    for (const auto& [kid, bank] : split.banks) CHECK(bank.entries.empty());
    CHECK(split.eval_set.size() == ds.size());
}

TEST_CASE("split_demo_bank is a pure function of (dataset, per_label, seed)") {
    const TaggingDataset ds = testing::make_dataset({40, 40, 40});
    const SplitResult a = split_demo_bank(ds, 3, 99);
    const SplitResult b = split_demo_bank(ds, 3, 99);
    const SplitResult c = split_demo_bank(ds, 3, 100);

    REQUIRE(a.banks.size() == b.banks.size());
    for (const auto& [kid, bank] : a.banks) {
        REQUIRE(b.banks.count(kid));
        CHECK(bank.entries == b.banks.at(kid).entries);
    }
    CHECK(a.eval_set == b.eval_set);

    bool any_difference = false;
    for (const auto& [kid, bank] : a.banks)
        if (!(bank.entries == c.banks.at(kid).entries)) any_difference = true;
    CHECK(any_difference);  // a different seed draws a different bank
}

TEST_CASE("split_demo_bank records a warning when demonstrations run short") {
    TaggingDataset ds;
    ds.examples.push_back(testing::make_example("k0", "q0", JudgmentLabel::Match, true));
    ds.examples.push_back(testing::make_example("k0", "q1", JudgmentLabel::NoMatch, true));
    // a positive without rationale is not bank material
    ds.examples.push_back(testing::make_example("k0", "q2", JudgmentLabel::Match, false));
    ds.splits.assign(3, Split::Eval);

    const SplitResult split = split_demo_bank(ds, 2, 5);
    CHECK(split.banks.at("k0").entries.size() == 2);
    CHECK(split.eval_set.size() == 1);
    REQUIRE(split.warnings.size() == 2);
}

TEST_CASE("file-pinned demo examples are honored first") {
    TaggingDataset ds;
    for (int q = 0; q < 8; ++q) {
        ds.examples.push_back(testing::make_example("k0", "q" + std::to_string(q),
                                                    JudgmentLabel::Match, true));
        ds.splits.push_back(q == 6 ? Split::Demo : Split::Eval);
    }
    const SplitResult split = split_demo_bank(ds, 1, 11);
    REQUIRE(split.banks.at("k0").entries.size() == 1);
    CHECK(split.banks.at("k0").entries[0].question.id == "q6");
}
