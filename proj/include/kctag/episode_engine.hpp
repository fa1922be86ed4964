#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kctag/embedding.hpp"
#include "kctag/errors.hpp"
#include "kctag/judge_client.hpp"
#include "kctag/policy_network.hpp"
#include "kctag/prompting.hpp"

namespace kctag {

// ---------------------------------------------------------------------------
// Retriever variants
// ---------------------------------------------------------------------------

enum class RetrieverVariant { FlexSdr, RetIcl, FlexRetIcr, PromptPg };

inline std::string variant_name(RetrieverVariant v) {
    switch (v) {
        case RetrieverVariant::FlexSdr: return "flexsdr";
        case RetrieverVariant::RetIcl: return "reticl";
        case RetrieverVariant::FlexRetIcr: return "flexreticr";
        default: return "promptpg";
    }
}

inline RetrieverVariant variant_from_name(const std::string& s) {
    if (s == "flexsdr") return RetrieverVariant::FlexSdr;
    if (s == "reticl") return RetrieverVariant::RetIcl;
    if (s == "flexreticr") return RetrieverVariant::FlexRetIcr;
    if (s == "promptpg") return RetrieverVariant::PromptPg;
    throw UsageError("unknown variant: " + s);
}

enum class RewardMode { PerStep, FinalOnly };

// Reward semantics per variant. flexsdr: per-step rewards, stop enabled,
// discounted. reticl: final-step reward only, no stop, gamma = 1. flexreticr:
// final-only correctness plus the stop bonus with omega = 1/T, gamma = 1.
// promptpg: a fixed number of selections scored once (no recurrence).
struct RetrieverVariantConfig {
    RetrieverVariant variant = RetrieverVariant::FlexSdr;
    double gamma = 0.99;
    double omega = 1.0;
    int max_shots = 2;
    RewardMode reward_mode = RewardMode::PerStep;
    bool stop_enabled = true;

    static RetrieverVariantConfig flex_sdr(int max_shots, double gamma = 0.99,
                                           double omega = 1.0) {
        RetrieverVariantConfig c;
        c.variant = RetrieverVariant::FlexSdr;
        c.gamma = gamma;
        c.omega = omega;
        c.max_shots = max_shots;
        c.reward_mode = RewardMode::PerStep;
        c.stop_enabled = true;
        c.validate();
        return c;
    }

    static RetrieverVariantConfig ret_icl(int max_shots) {
        RetrieverVariantConfig c;
        c.variant = RetrieverVariant::RetIcl;
        c.gamma = 1.0;
        c.omega = 0.0;
        c.max_shots = max_shots;
        c.reward_mode = RewardMode::FinalOnly;
        c.stop_enabled = false;
        c.validate();
        return c;
    }

    static RetrieverVariantConfig flex_ret_icr(int max_shots) {
        RetrieverVariantConfig c;
        c.variant = RetrieverVariant::FlexRetIcr;
        c.gamma = 1.0;
        c.omega = 1.0 / static_cast<double>(max_shots);
        c.max_shots = max_shots;
        c.reward_mode = RewardMode::FinalOnly;
        c.stop_enabled = true;
        c.validate();
        return c;
    }

    static RetrieverVariantConfig prompt_pg(int shots) {
        RetrieverVariantConfig c;
        c.variant = RetrieverVariant::PromptPg;
        c.gamma = 1.0;
        c.omega = 0.0;
        c.max_shots = shots;
        c.reward_mode = RewardMode::FinalOnly;
        c.stop_enabled = false;
        c.validate();
        return c;
    }

    void validate() const {
        if (max_shots <= 0) throw ConfigError("max_shots must be positive");
        if (omega < 0) throw ConfigError("omega must be >= 0");
        switch (variant) {
            case RetrieverVariant::FlexSdr:
                if (!(gamma > 0.0 && gamma < 1.0))
                    throw ConfigError("flexsdr requires gamma in (0,1)");
                if (reward_mode != RewardMode::PerStep || !stop_enabled)
                    throw ConfigError("flexsdr requires per-step rewards and stop enabled");
                break;
            case RetrieverVariant::RetIcl:
                if (gamma != 1.0 || stop_enabled || reward_mode != RewardMode::FinalOnly)
                    throw ConfigError("reticl requires final-only rewards, no stop, gamma=1");
                break;
            case RetrieverVariant::FlexRetIcr:
                if (gamma != 1.0 || !stop_enabled || reward_mode != RewardMode::FinalOnly)
                    throw ConfigError(
                        "flexreticr requires final-only rewards, stop enabled, gamma=1");
                if (omega != 1.0 / static_cast<double>(max_shots))
                    throw ConfigError("flexreticr requires omega = 1/max_shots");
                break;
            case RetrieverVariant::PromptPg:
                if (stop_enabled) throw ConfigError("promptpg has no stop action");
                break;
        }
    }
};

// ---------------------------------------------------------------------------
// Rewards and trajectories
// ---------------------------------------------------------------------------

// +1 when the judge's verdict agrees with the gold label, otherwise -1.
// An unparseable response never agrees.
inline int eval_reward(Verdict verdict, JudgmentLabel gold) {
    return verdict_matches(verdict, gold) ? 1 : -1;
}

inline int eval_reward(const ParsedJudgment& judgment, JudgmentLabel gold) {
    return eval_reward(judgment.verdict, gold);
}

inline constexpr int kStopAction = -1;

struct StepRecord {
    int action = 0;                         // bank index, or kStopAction
    std::string demo_id;                    // question id of the chosen demo
    double log_prob = 0;
    double value = 0;
    std::optional<ParsedJudgment> verdict;  // absent on stop steps (no query)
    int reward = 0;                         // r_t in {-1, +1}
    int stop_bonus = 0;                     // r'_t, nonzero only on stop
};

enum class Termination { Stop, MaxLength };

struct Trajectory {
    std::string knowledge_id;
    std::string question_id;
    JudgmentLabel gold = JudgmentLabel::NoMatch;
    int zero_shot_reward = 0;
    ParsedJudgment zero_shot_verdict;
    std::vector<StepRecord> steps;
    Termination terminated_by = Termination::MaxLength;
    std::vector<double> returns;  // per step, stop bonus included

    int demos_used() const {
        int n = 0;
        for (const auto& s : steps) n += s.action != kStopAction;
        return n;
    }

    // The verdict backing the final prediction: the last judged step, or the
    // zero-shot probe when the episode stopped before selecting anything.
    Verdict final_verdict() const {
        for (auto it = steps.rbegin(); it != steps.rend(); ++it)
            if (it->verdict) return it->verdict->verdict;
        return zero_shot_verdict.verdict;
    }
};

// Per-step discounted returns R'(s_t) = (r_t + omega * r'_t) + gamma R'(s_{t+1}).
// Under final-only semantics every non-terminal correctness reward is zeroed
// first; the stop bonus is only ever granted on the terminal step.
inline std::vector<double> compute_returns(const std::vector<StepRecord>& steps,
                                           const RetrieverVariantConfig& cfg) {
    std::vector<double> returns(steps.size(), 0.0);
    double acc = 0;
    for (int t = static_cast<int>(steps.size()) - 1; t >= 0; --t) {
        double r = steps[static_cast<std::size_t>(t)].reward;
        if (cfg.reward_mode == RewardMode::FinalOnly &&
            t + 1 < static_cast<int>(steps.size()))
            r = 0;
        r += cfg.omega * steps[static_cast<std::size_t>(t)].stop_bonus;
        acc = r + cfg.gamma * acc;
        returns[static_cast<std::size_t>(t)] = acc;
    }
    return returns;
}

// ---------------------------------------------------------------------------
// Running episodes
// ---------------------------------------------------------------------------

struct JudgeSettings {
    std::string model_name = "simulated";
    JudgeDecoding decoding{};
};

// One evaluation pair with everything an episode needs precomputed: the
// pair's embeddings and its knowledge's bank embedding matrix.
struct EpisodePair {
    const TaggingExample* pair = nullptr;
    const DemonstrationBank* bank = nullptr;
    const Mat* bank_embed = nullptr;  // D x N
    Vec x_k, x_q;
};

// Runs one retrieval episode. Step 0 always probes the judge zero-shot; each
// demonstration selection queries the judge with every demo chosen so far in
// selection order; choosing stop re-uses the most recent reward (the
// zero-shot one when stopping first) and grants the stop bonus. The episode
// ends on stop, after max_shots selections, or when the bank runs out.
inline Trajectory run_episode(const EpisodePair& ep, const PolicyParameters& params,
                              JudgeBackend& judge, const RetrieverVariantConfig& cfg,
                              SelectionMode mode, Rng& rng,
                              const JudgeSettings& settings = {}) {
    if (ep.bank == nullptr || ep.bank->entries.empty())
        throw DataError("run_episode: no demonstration bank for knowledge " +
                        ep.pair->knowledge.id);
    cfg.validate();

    const KnowledgeConcept& k = ep.pair->knowledge;
    const Question& q = ep.pair->question;

    Trajectory traj;
    traj.knowledge_id = k.id;
    traj.question_id = q.id;
    traj.gold = ep.pair->label;

    auto ask = [&](const Prompt& prompt) {
        JudgeRequest req{prompt, settings.decoding, settings.model_name};
        return judge.query(req);
    };

    const JudgeResponse zero = ask(build_zero_shot_prompt(k, q));
    traj.zero_shot_verdict = zero.parsed;
    traj.zero_shot_reward = eval_reward(zero.parsed, traj.gold);

    EpisodeTape tape(params, ep.x_k, ep.x_q, *ep.bank_embed, cfg.stop_enabled);
    std::vector<TaggingExample> selected_demos;
    int previous_reward = traj.zero_shot_reward;
    traj.terminated_by = Termination::MaxLength;

    while (true) {
        const int slot = select_action(tape.current_dist(), mode, rng);
        const bool is_stop = slot == tape.stop_slot();
        const auto& step = tape.take(is_stop ? kStopActionIndex : slot);

        StepRecord rec;
        rec.log_prob = step.log_prob;
        rec.value = step.value;
        if (is_stop) {
            rec.action = kStopAction;
            rec.reward = previous_reward;
            rec.stop_bonus = previous_reward;
            traj.steps.push_back(std::move(rec));
            traj.terminated_by = Termination::Stop;
            break;
        }

        rec.action = slot;
        const TaggingExample& demo = ep.bank->entries[static_cast<std::size_t>(slot)];
        rec.demo_id = demo.question.id;
        selected_demos.push_back(demo);

        const JudgeResponse resp = ask(build_few_shot_prompt(k, q, selected_demos));
        rec.verdict = resp.parsed;
        rec.reward = eval_reward(resp.parsed, traj.gold);
        previous_reward = rec.reward;
        traj.steps.push_back(std::move(rec));

        if (static_cast<int>(selected_demos.size()) >= cfg.max_shots || tape.done())
            break;
    }

    traj.returns = compute_returns(traj.steps, cfg);
    return traj;
}

inline nlohmann::json trajectory_to_json(const Trajectory& t) {
    nlohmann::json steps = nlohmann::json::array();
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
        const auto& s = t.steps[i];
        nlohmann::json rec{{"action", s.action == kStopAction ? "stop" : s.demo_id},
                           {"log_prob", s.log_prob},
                           {"value", s.value},
                           {"reward", s.reward},
                           {"stop_bonus", s.stop_bonus},
                           {"return", t.returns.at(i)}};
        if (s.verdict) rec["verdict"] = verdict_name(s.verdict->verdict);
        steps.push_back(std::move(rec));
    }
    return nlohmann::json{
        {"knowledge_id", t.knowledge_id},
        {"question_id", t.question_id},
        {"gold", label_to_int(t.gold)},
        {"zero_shot",
         {{"verdict", verdict_name(t.zero_shot_verdict.verdict)},
          {"reward", t.zero_shot_reward}}},
        {"steps", steps},
        {"terminated_by", t.terminated_by == Termination::Stop ? "stop" : "max_length"},
        {"demos_used", t.demos_used()},
        {"final_verdict", verdict_name(t.final_verdict())}};
}

// ---------------------------------------------------------------------------
// Return-function enumeration
// ---------------------------------------------------------------------------

// One correctness pattern: the bracketed zero-shot outcome, an outcome per
// demonstration step, and optionally a terminating stop action. The stop
// step's rewards are implied by the copy rule.
struct ReturnPattern {
    int step0_reward = 1;           // +-1
    std::vector<int> demo_rewards;  // +-1 each
    bool stopped = false;

    int num_steps() const {
        return static_cast<int>(demo_rewards.size()) + (stopped ? 1 : 0);
    }

    // Reward sequence (r_t, r'_t) for steps t = 1..num_steps().
    std::vector<std::pair<int, int>> reward_sequence() const {
        std::vector<std::pair<int, int>> seq;
        for (int r : demo_rewards) seq.emplace_back(r, 0);
        if (stopped) {
            const int last = demo_rewards.empty() ? step0_reward : demo_rewards.back();
            seq.emplace_back(last, last);
        }
        return seq;
    }

    std::string notation(int horizon) const {
        std::string out = "([";
        out += step0_reward > 0 ? "v" : "x";
        out += "]";
        for (int r : demo_rewards) out += r > 0 ? ",v" : ",x";
        if (stopped) out += ",S";
        for (int i = num_steps(); i < horizon; ++i) out += ",-";
        out += ")";
        return out;
    }
};

// Every reachable correctness pattern of an episode with horizon T: all
// 2^j outcome strings for j < T demo steps followed by a stop (when the
// variant allows stopping), plus all 2^T full-length strings.
inline std::vector<ReturnPattern> enumerate_patterns(int horizon, bool include_stop) {
    if (horizon < 0) throw ContractViolation("enumerate_patterns: negative horizon");
    std::vector<ReturnPattern> out;
    for (int r0 : {1, -1}) {
        for (int demos = 0; demos <= horizon; ++demos) {
            const bool can_stop = include_stop && demos < horizon;
            for (int bits = 0; bits < (1 << demos); ++bits) {
                ReturnPattern p;
                p.step0_reward = r0;
                for (int i = 0; i < demos; ++i)
                    p.demo_rewards.push_back((bits >> i) & 1 ? 1 : -1);
                if (demos == horizon) {
                    p.stopped = false;
                    out.push_back(p);
                } else if (can_stop) {
                    p.stopped = true;
                    out.push_back(p);
                }
            }
        }
    }
    return out;
}

inline std::vector<StepRecord> pattern_steps(const ReturnPattern& p) {
    std::vector<StepRecord> steps;
    int index = 0;
    for (const auto& [r, bonus] : p.reward_sequence()) {
        StepRecord rec;
        rec.action = bonus != 0 ? kStopAction : index++;
        rec.reward = r;
        rec.stop_bonus = bonus;
        steps.push_back(rec);
    }
    return steps;
}

struct ReturnTable {
    int horizon = 0;
    double omega = 0;
    std::vector<double> gammas;
    std::vector<ReturnPattern> patterns;
    // returns[p][g] = R'(s_1) of pattern p at gammas[g]
    std::vector<std::vector<double>> returns;
};

// Named pairwise ordering between two patterns, evaluated per gamma.
struct OrderingCheck {
    std::string description;      // "lhs > rhs"
    std::vector<bool> holds;      // aligned with the table's gamma grid
    bool holds_everywhere() const {
        for (bool b : holds)
            if (!b) return false;
        return true;
    }
};

// Tabulates the trajectory return of every pattern over a gamma grid under
// the given variant's reward semantics.
inline ReturnTable enumerate_returns(int horizon, std::vector<double> gammas,
                                     double omega, const RetrieverVariantConfig& base) {
    if (horizon > 4)
        throw ContractViolation("enumerate_returns: horizon must be <= 4");
    ReturnTable table;
    table.horizon = horizon;
    table.omega = omega;
    table.gammas = std::move(gammas);
    table.patterns = enumerate_patterns(horizon, base.stop_enabled);
    for (const auto& p : table.patterns) {
        std::vector<double> row;
        for (double gamma : table.gammas) {
            RetrieverVariantConfig cfg = base;
            cfg.gamma = gamma;
            cfg.omega = omega;
            cfg.max_shots = horizon;
            const auto returns = compute_returns(pattern_steps(p), cfg);
            row.push_back(returns.empty() ? 0.0 : returns.front());
        }
        table.returns.push_back(std::move(row));
    }
    return table;
}

// Evaluates the characteristic return orderings of the T=2 enumeration:
// early correctness beats late correctness, late mistakes cost, and (when
// stop patterns exist) the stop-bonus chains. Each check is reported per
// gamma rather than asserted, since the bonus chains flip at gamma = 1/2.
inline std::vector<OrderingCheck> check_return_orderings(const ReturnTable& table) {
    auto row = [&](const std::string& notation) -> const std::vector<double>* {
        for (std::size_t i = 0; i < table.patterns.size(); ++i)
            if (table.patterns[i].notation(table.horizon) == notation)
                return &table.returns[i];
        return nullptr;
    };
    auto compare = [&](const std::string& lhs, const std::string& rhs) {
        std::optional<OrderingCheck> out;
        const auto* l = row(lhs);
        const auto* r = row(rhs);
        if (!l || !r) return out;
        OrderingCheck check;
        check.description = lhs + " > " + rhs;
        for (std::size_t g = 0; g < table.gammas.size(); ++g)
            check.holds.push_back((*l)[g] > (*r)[g]);
        out = std::move(check);
        return out;
    };

    std::vector<OrderingCheck> checks;
    for (const auto& pair : {std::pair{"([x],v,v)", "([x],x,v)"},
                             std::pair{"([x],v,v)", "([x],v,x)"},
                             std::pair{"([v],S,-)", "([v],v,S)"},
                             std::pair{"([v],v,S)", "([v],v,v)"},
                             std::pair{"([x],x,S)", "([x],S,-)"},
                             std::pair{"([x],x,x)", "([x],x,S)"}}) {
        if (auto check = compare(pair.first, pair.second)) checks.push_back(*check);
    }
    return checks;
}

}  // namespace kctag
