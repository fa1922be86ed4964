#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kctag/core_data.hpp"
#include "kctag/errors.hpp"

namespace kctag {

// The judge instruction. Downstream parsing relies on the response-format
// sentence, so this string must not drift.
inline constexpr std::string_view kJudgeInstruction =
    "You are a knowledge concept annotator. Your job is to judge whether the "
    "<Question> is concerning the <Knowledge>. You should first provide the "
    "reasons before giving your judgment. The judgment token: <Yes> or <No> "
    "should be provided at the end of the response.";

// A judge prompt, kept structured until rendering. The id fields record
// where each block came from; they are not part of the rendered text (the
// simulated judge and audit logs use them).
struct Prompt {
    std::string instruction_text;
    std::string knowledge_block;
    std::vector<std::string> demonstration_blocks;
    std::string question_block;

    std::string knowledge_id;
    std::string question_id;
    std::vector<std::string> demo_ids;
};

enum class Verdict { Yes, No, Unparseable };

inline std::string_view verdict_name(Verdict v) {
    switch (v) {
        case Verdict::Yes: return "yes";
        case Verdict::No: return "no";
        default: return "unparseable";
    }
}

struct ParsedJudgment {
    Verdict verdict = Verdict::Unparseable;
    std::string reasoning_text;
};

inline bool verdict_matches(Verdict v, JudgmentLabel label) {
    return (v == Verdict::Yes && label == JudgmentLabel::Match) ||
           (v == Verdict::No && label == JudgmentLabel::NoMatch);
}

inline std::string render(const Prompt& p) {
    std::string out;
    out.reserve(256);
    out += "Instruction: ";
    out += p.instruction_text;
    out += "\n\n";
    out += p.knowledge_block;
    for (const auto& block : p.demonstration_blocks) {
        out += "\n\n";
        out += block;
    }
    out += "\n\n";
    out += p.question_block;
    return out;
}

inline Prompt build_zero_shot_prompt(const KnowledgeConcept& k, const Question& q) {
    Prompt p;
    p.instruction_text = std::string(kJudgeInstruction);
    p.knowledge_block = "Knowledge: <Knowledge>: " + k.definition_text;
    p.question_block = "Question: <Question>: " + q.stem_text + "\nJudgement:";
    p.knowledge_id = k.id;
    p.question_id = q.id;
    return p;
}

// Demonstrations are rendered in the given order, each as a worked judgment
// ending in its <Yes>/<No> token; the target question comes last. An empty
// demo list renders identically to the zero-shot prompt.
inline Prompt build_few_shot_prompt(const KnowledgeConcept& k, const Question& q,
                                    std::span<const TaggingExample> demos) {
    Prompt p = build_zero_shot_prompt(k, q);
    for (const auto& demo : demos) {
        if (!demo.rationale)
            throw ContractViolation("few-shot demo " + demo.question.id +
                                    " has no rationale");
        if (demo.knowledge.id != k.id)
            throw ContractViolation("few-shot demo " + demo.question.id +
                                    " belongs to knowledge " + demo.knowledge.id +
                                    ", prompt is for " + k.id);
        p.demonstration_blocks.push_back("Question: <Question>: " +
                                         demo.question.stem_text +
                                         "\nJudgement: " + *demo.rationale);
        p.demo_ids.push_back(demo.question.id);
    }
    return p;
}

// Extracts the verdict from a judge response: the last occurrence of <Yes>
// or <No> wins, and everything before it is kept as the reasoning. Total
// over arbitrary strings; a token-free response is Unparseable.
inline ParsedJudgment parse_judgment(std::string_view response_text) {
    ParsedJudgment out;
    const auto tok = detail_data::last_token(response_text);
    if (!tok) {
        out.verdict = Verdict::Unparseable;
        out.reasoning_text = std::string(response_text);
        return out;
    }
    out.verdict = tok->second ? Verdict::Yes : Verdict::No;
    out.reasoning_text = std::string(response_text.substr(0, tok->first));
    return out;
}

}  // namespace kctag
