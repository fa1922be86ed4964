#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "kctag/errors.hpp"
#include "kctag/rng.hpp"

namespace kctag {

// A knowledge-point definition, the left side of every tagging pair.
struct KnowledgeConcept {
    std::string id;
    std::string definition_text;
};

// A question stem, the right side of every tagging pair.
struct Question {
    std::string id;
    std::string stem_text;
};

enum class JudgmentLabel { NoMatch = 0, Match = 1 };

inline int label_to_int(JudgmentLabel l) { return l == JudgmentLabel::Match ? 1 : 0; }

inline JudgmentLabel label_from_int(int v) {
    if (v == 0) return JudgmentLabel::NoMatch;
    if (v == 1) return JudgmentLabel::Match;
    throw DataError("label must be 0 or 1, got " + std::to_string(v));
}

inline JudgmentLabel opposite(JudgmentLabel l) {
    return l == JudgmentLabel::Match ? JudgmentLabel::NoMatch : JudgmentLabel::Match;
}

// One annotated (knowledge, question, label) record. Demonstration-grade
// records additionally carry an expert rationale whose final non-whitespace
// content is the literal token <Yes> or <No>, in agreement with the label.
struct TaggingExample {
    KnowledgeConcept knowledge;
    Question question;
    JudgmentLabel label = JudgmentLabel::NoMatch;
    std::optional<std::string> rationale;

    bool operator==(const TaggingExample& o) const {
        return knowledge.id == o.knowledge.id &&
               knowledge.definition_text == o.knowledge.definition_text &&
               question.id == o.question.id && question.stem_text == o.question.stem_text &&
               label == o.label && rationale == o.rationale;
    }
};

enum class Split { Demo, Eval };

struct TaggingDataset {
    std::vector<TaggingExample> examples;
    std::vector<Split> splits;  // parallel to examples

    std::size_t size() const { return examples.size(); }

    std::vector<std::string> knowledge_ids() const {
        std::set<std::string> ids;
        for (const auto& ex : examples) ids.insert(ex.knowledge.id);
        return {ids.begin(), ids.end()};
    }

    bool operator==(const TaggingDataset& o) const {
        return examples == o.examples && splits == o.splits;
    }
};

// The per-knowledge pool of candidate demonstrations. Embeddings are filled
// later by the embedding module; one row per entry, all the same length.
struct DemonstrationBank {
    std::string knowledge_id;
    std::vector<TaggingExample> entries;
    std::vector<std::vector<float>> embeddings;
    std::string embedding_model;

    std::size_t size() const { return entries.size(); }
};

namespace detail_data {

inline constexpr std::string_view kYesToken = "<Yes>";
inline constexpr std::string_view kNoToken = "<No>";

// Position and kind of the last judgment token, if any.
inline std::optional<std::pair<std::size_t, bool>> last_token(std::string_view text) {
    const std::size_t yes = text.rfind(kYesToken);
    const std::size_t no = text.rfind(kNoToken);
    if (yes == std::string_view::npos && no == std::string_view::npos) return std::nullopt;
    if (no == std::string_view::npos || (yes != std::string_view::npos && yes > no))
        return std::make_pair(yes, true);
    return std::make_pair(no, false);
}

inline bool is_trailing_whitespace_only(std::string_view text, std::size_t from) {
    return text.find_first_not_of(" \t\r\n", from) == std::string_view::npos;
}

// A valid demonstration rationale ends (up to whitespace) in the judgment
// token that agrees with the record's label.
inline void validate_rationale(const std::string& rationale, JudgmentLabel label,
                               const std::string& where) {
    const auto tok = last_token(rationale);
    if (!tok) throw DataError(where + ": rationale lacks a terminal <Yes>/<No> token");
    const auto [pos, is_yes] = *tok;
    const std::size_t end = pos + (is_yes ? kYesToken.size() : kNoToken.size());
    if (!is_trailing_whitespace_only(rationale, end))
        throw DataError(where + ": rationale judgment token is not terminal");
    if (is_yes != (label == JudgmentLabel::Match))
        throw DataError(where + ": rationale/label disagreement");
}

}  // namespace detail_data

struct LoadOptions {
    // Upper bound on file-declared demo-split members per (knowledge, label).
    int demo_cap_per_label = 5;
};

inline TaggingDataset load_dataset(const std::filesystem::path& path,
                                   const LoadOptions& opts = {}) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset: " + path.string());

    TaggingDataset ds;
    std::set<std::pair<std::string, std::string>> seen;
    std::map<std::string, std::string> knowledge_texts;
    std::map<std::pair<std::string, int>, int> demo_counts;

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = "line " + std::to_string(line_no);

        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(where + ": malformed JSON record: " + e.what());
        }

        try {
            TaggingExample ex;
            ex.knowledge.id = rec.at("knowledge_id").get<std::string>();
            ex.knowledge.definition_text = rec.at("knowledge_text").get<std::string>();
            ex.question.id = rec.at("question_id").get<std::string>();
            ex.question.stem_text = rec.at("question_text").get<std::string>();
            ex.label = label_from_int(rec.at("label").get<int>());
            if (rec.contains("rationale") && !rec["rationale"].is_null())
                ex.rationale = rec["rationale"].get<std::string>();

            if (ex.knowledge.id.empty()) throw DataError("empty knowledge_id");
            if (ex.knowledge.definition_text.empty()) throw DataError("empty knowledge_text");
            if (ex.question.id.empty()) throw DataError("empty question_id");
            if (ex.question.stem_text.empty()) throw DataError("empty question_text");

            if (!seen.emplace(ex.knowledge.id, ex.question.id).second)
                throw DataError("duplicate (knowledge_id, question_id) = (" +
                                ex.knowledge.id + ", " + ex.question.id + ")");
            auto [it, inserted] =
                knowledge_texts.emplace(ex.knowledge.id, ex.knowledge.definition_text);
            if (!inserted && it->second != ex.knowledge.definition_text)
                throw DataError("knowledge_id " + ex.knowledge.id +
                                " has conflicting definition texts");

            if (ex.rationale)
                detail_data::validate_rationale(*ex.rationale, ex.label, where);

            Split split = Split::Eval;
            if (rec.contains("split") && !rec["split"].is_null()) {
                const auto s = rec["split"].get<std::string>();
                if (s == "demo")
                    split = Split::Demo;
                else if (s == "eval")
                    split = Split::Eval;
                else
                    throw DataError("split must be \"demo\" or \"eval\", got \"" + s + "\"");
            }
            if (split == Split::Demo) {
                int& n = demo_counts[{ex.knowledge.id, label_to_int(ex.label)}];
                if (++n > opts.demo_cap_per_label)
                    throw DataError("knowledge " + ex.knowledge.id + " declares more than " +
                                    std::to_string(opts.demo_cap_per_label) +
                                    " demo-split examples with label " +
                                    std::to_string(label_to_int(ex.label)));
            }

            ds.examples.push_back(std::move(ex));
            ds.splits.push_back(split);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(where + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError(where + ": " + e.what());
        }
    }
    return ds;
}

inline nlohmann::json example_to_json(const TaggingExample& ex) {
    nlohmann::json rec{{"knowledge_id", ex.knowledge.id},
                       {"knowledge_text", ex.knowledge.definition_text},
                       {"question_id", ex.question.id},
                       {"question_text", ex.question.stem_text},
                       {"label", label_to_int(ex.label)}};
    if (ex.rationale) rec["rationale"] = *ex.rationale;
    return rec;
}

inline void save_dataset(const TaggingDataset& ds, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write dataset: " + path.string());
    for (std::size_t i = 0; i < ds.examples.size(); ++i) {
        nlohmann::json rec = example_to_json(ds.examples[i]);
        rec["split"] = ds.splits[i] == Split::Demo ? "demo" : "eval";
        out << rec.dump() << "\n";
    }
}

struct SplitResult {
    std::map<std::string, DemonstrationBank> banks;
    std::vector<TaggingExample> eval_set;
    std::vector<std::string> warnings;
};

// Draws up to per_label rationale-bearing positives and negatives per
// knowledge into its demonstration bank; everything else becomes the eval
// set. Records the file pre-marked as demo are taken first (in file order),
// the rest of each bank is drawn by seeded shuffle, so the result is a pure
// function of (dataset, per_label, seed).
inline SplitResult split_demo_bank(const TaggingDataset& ds, int per_label,
                                   std::uint64_t seed) {
    if (per_label < 0) throw ContractViolation("split_demo_bank: per_label must be >= 0");

    SplitResult result;
    std::set<std::size_t> bank_members;

    for (const std::string& kid : ds.knowledge_ids()) {
        DemonstrationBank bank;
        bank.knowledge_id = kid;
        for (int label_v : {1, 0}) {
            std::vector<std::size_t> pinned, pool;
            for (std::size_t i = 0; i < ds.examples.size(); ++i) {
                const auto& ex = ds.examples[i];
                if (ex.knowledge.id != kid || label_to_int(ex.label) != label_v ||
                    !ex.rationale)
                    continue;
                (ds.splits[i] == Split::Demo ? pinned : pool).push_back(i);
            }
            Rng rng(mix64(seed, mix64(fnv1a64(kid), static_cast<std::uint64_t>(label_v))));
            rng.shuffle(pool);

            std::vector<std::size_t> chosen;
            for (std::size_t i : pinned)
                if (static_cast<int>(chosen.size()) < per_label) chosen.push_back(i);
            for (std::size_t i : pool)
                if (static_cast<int>(chosen.size()) < per_label) chosen.push_back(i);

            if (static_cast<int>(chosen.size()) < per_label)
                result.warnings.push_back(
                    "knowledge " + kid + ": only " + std::to_string(chosen.size()) +
                    " rationale-bearing examples with label " + std::to_string(label_v) +
                    " available (wanted " + std::to_string(per_label) + ")");

            for (std::size_t i : chosen) {
                bank.entries.push_back(ds.examples[i]);
                bank_members.insert(i);
            }
        }
        result.banks.emplace(kid, std::move(bank));
    }

    for (std::size_t i = 0; i < ds.examples.size(); ++i)
        if (!bank_members.count(i)) result.eval_set.push_back(ds.examples[i]);
    return result;
}

}  // namespace kctag
