#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kctag/embedding.hpp"
#include "kctag/episode_engine.hpp"
#include "kctag/errors.hpp"
#include "kctag/policy_network.hpp"
#include "kctag/promptpg.hpp"
#include "kctag/rng.hpp"
#include "kctag/run_config.hpp"

namespace kctag {

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Adam over any parameter struct exposing tensor_list().
template <class Params>
class AdamOptimizer {
  public:
    AdamOptimizer(const Params& shape, double learning_rate)
        : lr_(learning_rate), m_(zeros_like(shape)), v_(zeros_like(shape)) {}

    void step(Params& params, const Params& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        auto pt = tensor_list(params);
        auto gt = tensor_list(grads);
        auto mt = tensor_list(m_);
        auto vt = tensor_list(v_);
        for (std::size_t i = 0; i < pt.size(); ++i) {
            const Mat& g = *gt[i].second;
            Mat& m = *mt[i].second;
            Mat& v = *vt[i].second;
            m = beta1_ * m + (1.0 - beta1_) * g;
            v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
            pt[i].second->array() -=
                lr_ * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps_);
        }
    }

    std::int64_t steps_taken() const { return t_; }
    Params& first_moment() { return m_; }
    Params& second_moment() { return v_; }
    void restore(std::int64_t t, Params m, Params v) {
        t_ = t;
        m_ = std::move(m);
        v_ = std::move(v);
    }

  private:
    double lr_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    std::int64_t t_ = 0;
    Params m_, v_;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainingConfig {
    RetrieverVariantConfig variant;
    double value_loss_weight = 0.5;
    double entropy_weight = 0.01;
    int off_policy_epochs = 80;
    double clip_epsilon = 0.2;
    double learning_rate = 1e-3;
    int batch_episodes = 64;
    int total_iterations = 100;
    std::uint64_t seed = 1;
    bool normalize_advantages = true;
    int plateau_patience = 20;
    double plateau_tolerance = 1e-6;
    int hidden_dim = 64;
    int lstm_layers = 2;
    int promptpg_hidden = 32;
    int checkpoint_every = 1;
    JudgeSettings judge;

    void validate() const {
        variant.validate();
        if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0))
            throw ConfigError("clip_epsilon must be in (0,1)");
        if (value_loss_weight < 0 || entropy_weight < 0)
            throw ConfigError("loss weights must be >= 0");
        if (off_policy_epochs <= 0) throw ConfigError("off_policy_epochs must be positive");
        if (learning_rate <= 0) throw ConfigError("learning_rate must be positive");
        if (batch_episodes <= 0) throw ConfigError("batch_episodes must be positive");
        if (total_iterations < 0) throw ConfigError("total_iterations must be >= 0");
        if (hidden_dim <= 0 || lstm_layers <= 0 || promptpg_hidden <= 0)
            throw ConfigError("network dims must be positive");
    }

    // Canonical digest used to guard checkpoint resumption. The iteration
    // budget is deliberately excluded: resuming a finished run with a larger
    // budget continues it, anything else is refused.
    std::string digest() const {
        nlohmann::json j{{"variant", variant_name(variant.variant)},
                         {"gamma", variant.gamma},
                         {"omega", variant.omega},
                         {"max_shots", variant.max_shots},
                         {"final_only", variant.reward_mode == RewardMode::FinalOnly},
                         {"stop_enabled", variant.stop_enabled},
                         {"value_loss_weight", value_loss_weight},
                         {"entropy_weight", entropy_weight},
                         {"off_policy_epochs", off_policy_epochs},
                         {"clip_epsilon", clip_epsilon},
                         {"learning_rate", learning_rate},
                         {"batch_episodes", batch_episodes},
                         {"seed", seed},
                         {"normalize_advantages", normalize_advantages},
                         {"plateau_patience", plateau_patience},
                         {"hidden_dim", hidden_dim},
                         {"lstm_layers", lstm_layers},
                         {"promptpg_hidden", promptpg_hidden},
                         {"judge_model", judge.model_name}};
        return detail::sha256_hex(j.dump());
    }
};

// Builds a TrainingConfig from a flat run config. Variant names select the
// published reward semantics: reticl is forced to final-only/no-stop/gamma=1
// and flexreticr to gamma=1 with omega = 1/max_shots.
inline TrainingConfig training_config_from(const KeyValueConfig& cfg) {
    TrainingConfig tc;
    const std::string variant = cfg.get_string("variant");
    const int max_shots = static_cast<int>(cfg.get_int("max_shots", 2));
    switch (variant_from_name(variant)) {
        case RetrieverVariant::FlexSdr:
            tc.variant = RetrieverVariantConfig::flex_sdr(
                max_shots, cfg.get_double("gamma", 0.99), cfg.get_double("omega", 1.0));
            break;
        case RetrieverVariant::RetIcl:
            tc.variant = RetrieverVariantConfig::ret_icl(max_shots);
            break;
        case RetrieverVariant::FlexRetIcr:
            tc.variant = RetrieverVariantConfig::flex_ret_icr(max_shots);
            break;
        case RetrieverVariant::PromptPg:
            tc.variant = RetrieverVariantConfig::prompt_pg(max_shots);
            break;
    }
    tc.value_loss_weight = cfg.get_double("value_loss_weight", 0.5);
    tc.entropy_weight = cfg.get_double("entropy_weight", 0.01);
    tc.off_policy_epochs = static_cast<int>(cfg.get_int("off_policy_epochs", 80));
    tc.clip_epsilon = cfg.get_double("clip_epsilon", 0.2);
    tc.learning_rate = cfg.get_double("learning_rate", 1e-3);
    tc.batch_episodes = static_cast<int>(cfg.get_int("batch_episodes", 64));
    tc.total_iterations = static_cast<int>(cfg.get_int("total_iterations", 100));
    tc.seed = cfg.get_u64("seed", 1);
    tc.normalize_advantages = cfg.get_bool("normalize_advantages", true);
    tc.plateau_patience = static_cast<int>(cfg.get_int("plateau_patience", 20));
    tc.plateau_tolerance = cfg.get_double("plateau_tolerance", 1e-6);
    tc.hidden_dim = static_cast<int>(cfg.get_int("hidden_dim", 64));
    tc.lstm_layers = static_cast<int>(cfg.get_int("lstm_layers", 2));
    tc.promptpg_hidden = static_cast<int>(cfg.get_int("promptpg_hidden", 32));
    tc.checkpoint_every = static_cast<int>(cfg.get_int("checkpoint_every", 1));
    tc.judge.model_name = cfg.get_string("judge_model", "simulated");
    tc.judge.decoding.temperature = cfg.get_double("judge_temperature", 0.0);
    tc.judge.decoding.max_tokens = static_cast<int>(cfg.get_int("judge_max_tokens", 512));
    tc.validate();
    return tc;
}

// ---------------------------------------------------------------------------
// Training corpus: pairs wired to their banks and embeddings
// ---------------------------------------------------------------------------

struct TrainingCorpus {
    std::vector<TaggingExample> pairs;
    std::map<std::string, DemonstrationBank> banks;
    std::map<std::string, Mat> bank_matrices;
    std::vector<EpisodePair> episode_pairs;
    int embedding_dim = 0;

    TrainingCorpus() = default;
    TrainingCorpus(const TrainingCorpus&) = delete;
    TrainingCorpus& operator=(const TrainingCorpus&) = delete;
    TrainingCorpus(TrainingCorpus&&) = default;
    TrainingCorpus& operator=(TrainingCorpus&&) = default;
};

// Embeds every pair and wires it to its knowledge's bank. Pairs whose
// knowledge has no (non-empty) bank stay bankless: zero-shot pipelines do
// not care, and bank-dependent pipelines reject them when asked.
inline TrainingCorpus build_corpus(std::vector<TaggingExample> pairs,
                                   std::map<std::string, DemonstrationBank> banks,
                                   EmbeddingBackend& backend) {
    TrainingCorpus corpus;
    corpus.pairs = std::move(pairs);
    corpus.banks = std::move(banks);
    for (auto& [kid, bank] : corpus.banks) {
        if (bank.entries.empty()) continue;
        if (bank.embeddings.size() != bank.entries.size())
            embed_bank(bank, backend);
        corpus.bank_matrices.emplace(kid, bank_matrix(bank));
    }
    for (const auto& pair : corpus.pairs) {
        EpisodePair ep;
        ep.pair = &pair;
        auto bank_it = corpus.banks.find(pair.knowledge.id);
        if (bank_it != corpus.banks.end() && !bank_it->second.entries.empty()) {
            ep.bank = &bank_it->second;
            ep.bank_embed = &corpus.bank_matrices.at(pair.knowledge.id);
        }
        ep.x_k = to_eigen(backend.embed(pair.knowledge.definition_text));
        ep.x_q = to_eigen(backend.embed(pair.question.stem_text));
        if (corpus.embedding_dim == 0)
            corpus.embedding_dim = static_cast<int>(ep.x_k.size());
        corpus.episode_pairs.push_back(std::move(ep));
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

struct FlatStep {
    int trajectory = 0;
    int step = 0;
    double old_log_prob = 0;
    double ret = 0;
    double value = 0;
    double advantage = 0;
};

struct RolloutBatch {
    std::vector<Trajectory> trajectories;
    std::vector<int> pair_indices;  // corpus index per trajectory
    std::vector<FlatStep> steps;
    double mean_return = 0;
    double mean_demos = 0;
};

// Sample-mode episodes over a seeded shuffle of the training pairs. Old
// log-probabilities and values are recorded at collection time; advantages
// are Return - V, optionally normalized per batch.
inline RolloutBatch collect_rollouts(const PolicyParameters& params,
                                     const TrainingCorpus& corpus, JudgeBackend& judge,
                                     const TrainingConfig& cfg, Rng& rng) {
    if (corpus.episode_pairs.empty())
        throw ContractViolation("collect_rollouts: empty training corpus");

    std::vector<int> order(corpus.episode_pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    while (static_cast<int>(order.size()) < cfg.batch_episodes) {
        std::vector<int> again(corpus.episode_pairs.size());
        for (std::size_t i = 0; i < again.size(); ++i) again[i] = static_cast<int>(i);
        rng.shuffle(again);
        order.insert(order.end(), again.begin(), again.end());
    }
    order.resize(static_cast<std::size_t>(cfg.batch_episodes));

    RolloutBatch batch;
    for (int idx : order) {
        Trajectory traj =
            run_episode(corpus.episode_pairs[static_cast<std::size_t>(idx)], params,
                        judge, cfg.variant, SelectionMode::Sample, rng, cfg.judge);
        batch.mean_return += traj.returns.empty() ? 0.0 : traj.returns.front();
        batch.mean_demos += traj.demos_used();
        batch.pair_indices.push_back(idx);
        batch.trajectories.push_back(std::move(traj));
    }
    batch.mean_return /= static_cast<double>(batch.trajectories.size());
    batch.mean_demos /= static_cast<double>(batch.trajectories.size());

    for (std::size_t i = 0; i < batch.trajectories.size(); ++i) {
        const Trajectory& traj = batch.trajectories[i];
        for (std::size_t t = 0; t < traj.steps.size(); ++t) {
            FlatStep fs;
            fs.trajectory = static_cast<int>(i);
            fs.step = static_cast<int>(t);
            fs.old_log_prob = traj.steps[t].log_prob;
            fs.ret = traj.returns[t];
            fs.value = traj.steps[t].value;
            fs.advantage = fs.ret - fs.value;
            batch.steps.push_back(fs);
        }
    }

    if (cfg.normalize_advantages && batch.steps.size() >= 2) {
        double mean = 0;
        for (const auto& s : batch.steps) mean += s.advantage;
        mean /= static_cast<double>(batch.steps.size());
        double var = 0;
        for (const auto& s : batch.steps) {
            const double d = s.advantage - mean;
            var += d * d;
        }
        const double stddev = std::sqrt(var / static_cast<double>(batch.steps.size()));
        if (stddev > 1e-8)
            for (auto& s : batch.steps) s.advantage = (s.advantage - mean) / stddev;
    }
    return batch;
}

// ---------------------------------------------------------------------------
// PPO update
// ---------------------------------------------------------------------------

struct EpochStats {
    double policy_loss = 0;
    double value_loss = 0;
    double entropy = 0;
    double total_loss = 0;
    double max_ratio_deviation = 0;  // max |rho - 1| over steps
};

struct UpdateReport {
    std::vector<EpochStats> epochs;
    bool value_loss_alarm = false;
};

// Clipped-surrogate PPO with a value head and an entropy bonus:
//   loss = -mean(min(rho A, clip(rho) A))
//          + value_loss_weight * mean((V - R)^2)
//          + entropy_weight * mean(-H).
// One optimizer step per off-policy epoch on the frozen batch.
inline UpdateReport ppo_update(PolicyParameters& params, const RolloutBatch& batch,
                               const TrainingCorpus& corpus, const TrainingConfig& cfg,
                               AdamOptimizer<PolicyParameters>& optimizer) {
    if (batch.steps.empty()) throw ContractViolation("ppo_update: empty batch");
    const double n_steps = static_cast<double>(batch.steps.size());
    const double eps = cfg.clip_epsilon;

    UpdateReport report;
    int value_increase_streak = 0;

    for (int epoch = 0; epoch < cfg.off_policy_epochs; ++epoch) {
        PolicyParameters grads = zeros_like(params);
        EpochStats stats;

        std::size_t cursor = 0;
        for (std::size_t i = 0; i < batch.trajectories.size(); ++i) {
            const Trajectory& traj = batch.trajectories[i];
            const EpisodePair& ep =
                corpus.episode_pairs[static_cast<std::size_t>(batch.pair_indices[i])];

            std::vector<int> actions;
            for (const auto& s : traj.steps) actions.push_back(s.action);
            EpisodeTape tape = replay_episode(params, ep.x_k, ep.x_q, *ep.bank_embed,
                                              cfg.variant.stop_enabled, actions);

            std::vector<StepOutputGrads> step_grads(traj.steps.size());
            for (std::size_t t = 0; t < traj.steps.size(); ++t) {
                const FlatStep& fs = batch.steps[cursor++];
                const auto& out = tape.step(static_cast<int>(t));
                const double ratio = std::exp(out.log_prob - fs.old_log_prob);
                stats.max_ratio_deviation =
                    std::max(stats.max_ratio_deviation, std::abs(ratio - 1.0));

                const double unclipped = ratio * fs.advantage;
                const double clipped =
                    std::clamp(ratio, 1.0 - eps, 1.0 + eps) * fs.advantage;
                const double surrogate = std::min(unclipped, clipped);
                stats.policy_loss -= surrogate / n_steps;
                if (unclipped <= clipped)
                    step_grads[t].d_log_prob = -(ratio * fs.advantage) / n_steps;

                const double v_err = out.value - fs.ret;
                stats.value_loss += v_err * v_err / n_steps;
                step_grads[t].d_value = cfg.value_loss_weight * 2.0 * v_err / n_steps;

                stats.entropy += out.entropy / n_steps;
                step_grads[t].d_entropy = -cfg.entropy_weight / n_steps;
            }

            accumulate(grads, tape.backward(step_grads));
        }

        stats.total_loss = stats.policy_loss + cfg.value_loss_weight * stats.value_loss -
                           cfg.entropy_weight * stats.entropy;
        if (!std::isfinite(stats.total_loss))
            throw DataError("ppo_update: non-finite loss at epoch " +
                            std::to_string(epoch) + " (policy=" +
                            std::to_string(stats.policy_loss) + ", value=" +
                            std::to_string(stats.value_loss) + ")");

        if (!report.epochs.empty() &&
            stats.value_loss > report.epochs.back().value_loss) {
            if (++value_increase_streak >= 10) report.value_loss_alarm = true;
        } else {
            value_increase_streak = 0;
        }

        optimizer.step(params, grads);
        check_finite(params, "ppo_update");
        report.epochs.push_back(stats);
    }
    return report;
}

// ---------------------------------------------------------------------------
// REINFORCE update (promptpg)
// ---------------------------------------------------------------------------

struct PromptPgEpisode {
    int pair_index = 0;
    std::vector<int> actions;
    double log_prob = 0;
    int reward = 0;
};

struct PromptPgBatch {
    std::vector<PromptPgEpisode> episodes;
    double mean_reward = 0;
};

inline PromptPgBatch collect_promptpg_rollouts(const PromptPgParams& params,
                                               const TrainingCorpus& corpus,
                                               JudgeBackend& judge,
                                               const TrainingConfig& cfg, Rng& rng) {
    if (corpus.episode_pairs.empty())
        throw ContractViolation("collect_promptpg_rollouts: empty corpus");
    std::vector<int> order(corpus.episode_pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    order.resize(std::min<std::size_t>(order.size(),
                                       static_cast<std::size_t>(cfg.batch_episodes)));

    PromptPgBatch batch;
    for (int idx : order) {
        const EpisodePair& ep = corpus.episode_pairs[static_cast<std::size_t>(idx)];
        const int shots =
            std::min(cfg.variant.max_shots, static_cast<int>(ep.bank->entries.size()));
        PromptPgTape tape(params, ep.x_k, ep.x_q, *ep.bank_embed);
        PromptPgEpisode episode;
        episode.pair_index = idx;
        episode.log_prob = tape.select(shots, SelectionMode::Sample, rng, episode.actions);

        std::vector<TaggingExample> demos;
        for (int a : episode.actions)
            demos.push_back(ep.bank->entries[static_cast<std::size_t>(a)]);
        const JudgeRequest req{
            build_few_shot_prompt(ep.pair->knowledge, ep.pair->question, demos),
            cfg.judge.decoding, cfg.judge.model_name};
        episode.reward = eval_reward(judge.query(req).parsed, ep.pair->label);
        batch.mean_reward += episode.reward;
        batch.episodes.push_back(std::move(episode));
    }
    batch.mean_reward /= static_cast<double>(batch.episodes.size());
    return batch;
}

// Running-mean reward baseline shared across updates.
struct ReinforceBaseline {
    double reward_sum = 0;
    std::int64_t reward_count = 0;

    double mean() const {
        return reward_count == 0 ? 0.0 : reward_sum / static_cast<double>(reward_count);
    }
};

// One-step REINFORCE: ascends mean(log_prob * (reward - baseline)) with the
// running-mean baseline folded in before the gradient is taken, so constant
// rewards produce an exactly zero update.
inline EpochStats reinforce_update(PromptPgParams& params, const PromptPgBatch& batch,
                                   const TrainingCorpus& corpus,
                                   const TrainingConfig& /*cfg*/,
                                   AdamOptimizer<PromptPgParams>& optimizer,
                                   ReinforceBaseline& baseline) {
    if (batch.episodes.empty()) throw ContractViolation("reinforce_update: empty batch");
    for (const auto& e : batch.episodes) {
        baseline.reward_sum += e.reward;
        baseline.reward_count += 1;
    }
    const double b = baseline.mean();
    const double n = static_cast<double>(batch.episodes.size());

    PromptPgParams grads = zeros_like(params);
    EpochStats stats;
    for (const auto& episode : batch.episodes) {
        const EpisodePair& ep =
            corpus.episode_pairs[static_cast<std::size_t>(episode.pair_index)];
        PromptPgTape tape(params, ep.x_k, ep.x_q, *ep.bank_embed);
        const double log_prob = tape.replay(episode.actions);
        const double advantage = episode.reward - b;
        stats.policy_loss -= log_prob * advantage / n;
        accumulate(grads, tape.backward(-advantage / n));
    }
    stats.total_loss = stats.policy_loss;
    if (!std::isfinite(stats.total_loss))
        throw DataError("reinforce_update: non-finite loss");
    optimizer.step(params, grads);
    check_finite(params, "reinforce_update");
    return stats;
}

// ---------------------------------------------------------------------------
// Training loop with checkpointing
// ---------------------------------------------------------------------------

struct IterationStats {
    int iteration = 0;
    double mean_return = 0;
    double mean_demos = 0;
    double policy_loss = 0;
    double value_loss = 0;
    double entropy = 0;
    double epoch1_max_ratio_deviation = 0;
    std::optional<double> val_return;
};

inline nlohmann::json iteration_stats_to_json(const IterationStats& s) {
    nlohmann::json j{{"iteration", s.iteration},
                     {"mean_return", s.mean_return},
                     {"mean_demos", s.mean_demos},
                     {"policy_loss", s.policy_loss},
                     {"value_loss", s.value_loss},
                     {"entropy", s.entropy},
                     {"epoch1_max_ratio_deviation", s.epoch1_max_ratio_deviation}};
    if (s.val_return) j["val_return"] = *s.val_return;
    return j;
}

struct TrainResult {
    PolicyParameters params;
    std::vector<IterationStats> log;
    bool stopped_early = false;
    int iterations_run = 0;
};

// Mean greedy-mode trajectory return over a corpus; the plateau signal.
inline double greedy_mean_return(const PolicyParameters& params,
                                 const TrainingCorpus& corpus, JudgeBackend& judge,
                                 const TrainingConfig& cfg) {
    if (corpus.episode_pairs.empty()) return 0;
    Rng rng(0);  // unused by greedy selection
    double total = 0;
    for (const auto& ep : corpus.episode_pairs) {
        Trajectory t = run_episode(ep, params, judge, cfg.variant, SelectionMode::Greedy,
                                   rng, cfg.judge);
        total += t.returns.empty() ? 0.0 : t.returns.front();
    }
    return total / static_cast<double>(corpus.episode_pairs.size());
}

namespace detail_trainer {

struct CheckpointState {
    int next_iteration = 0;
    std::string rng_state;
    int plateau_counter = 0;
    double best_signal = -std::numeric_limits<double>::infinity();
};

inline void save_checkpoint(const std::filesystem::path& path, const TrainingConfig& cfg,
                            const PolicyParameters& params,
                            AdamOptimizer<PolicyParameters>& optimizer,
                            const CheckpointState& st) {
    std::map<std::string, std::string> meta{
        {"kind", "training_checkpoint"},
        {"config_digest", cfg.digest()},
        {"embedding_dim", std::to_string(params.embedding_dim)},
        {"hidden_dim", std::to_string(params.hidden_dim)},
        {"num_layers", std::to_string(params.num_layers)},
        {"next_iteration", std::to_string(st.next_iteration)},
        {"adam_t", std::to_string(optimizer.steps_taken())},
        {"rng_state", st.rng_state},
        {"plateau_counter", std::to_string(st.plateau_counter)},
        {"best_signal", [&] {
             char buf[64];
             std::snprintf(buf, sizeof(buf), "%.17g", st.best_signal);
             return std::string(buf);
         }()}};
    std::vector<std::pair<std::string, const Mat*>> tensors;
    for (const auto& [name, mat] : tensor_list(params))
        tensors.emplace_back("param/" + name, mat);
    for (const auto& [name, mat] : tensor_list(optimizer.first_moment()))
        tensors.emplace_back("adam_m/" + name, mat);
    for (const auto& [name, mat] : tensor_list(optimizer.second_moment()))
        tensors.emplace_back("adam_v/" + name, mat);
    save_tensor_container(path, meta, tensors);
}

inline void fill_from_prefix(const TensorContainer& c, const std::string& prefix,
                             PolicyParameters& into) {
    for (auto& [name, mat] : tensor_list(into)) {
        auto it = c.tensors.find(prefix + name);
        if (it == c.tensors.end())
            throw FormatError("checkpoint is missing tensor " + prefix + name);
        if (it->second.rows() != mat->rows() || it->second.cols() != mat->cols())
            throw FormatError("checkpoint tensor " + prefix + name + " has wrong shape");
        *mat = it->second;
    }
}

}  // namespace detail_trainer

// Alternates rollout collection and PPO updates, checkpointing each
// iteration. If out_dir already holds a checkpoint whose config digest
// matches, training resumes from it (bit-identically); a digest mismatch is
// refused. Training stops early when the plateau signal (validation return
// when a validation corpus is given, else the batch mean return) fails to
// improve for plateau_patience iterations.
inline TrainResult train_policy(const TrainingConfig& cfg, const TrainingCorpus& train,
                                const TrainingCorpus* validation, JudgeBackend& judge,
                                const std::filesystem::path& out_dir = {}) {
    cfg.validate();
    if (cfg.variant.variant == RetrieverVariant::PromptPg)
        throw ContractViolation("train_policy: promptpg uses train_promptpg");

    TrainResult result;
    result.params = init_params(train.embedding_dim, cfg.hidden_dim, cfg.lstm_layers,
                                cfg.seed);
    AdamOptimizer<PolicyParameters> optimizer(result.params, cfg.learning_rate);
    Rng rng(mix64(cfg.seed, 0x726f6c6c6f757473ull));
    detail_trainer::CheckpointState st;

    const bool persist = !out_dir.empty();
    const std::filesystem::path ckpt_path = out_dir / "checkpoint.bin";
    bool resumed = false;
    std::ofstream log_stream;
    if (persist) {
        std::filesystem::create_directories(out_dir);
        if (std::filesystem::exists(ckpt_path)) {
            resumed = true;
            const TensorContainer c = load_tensor_container(ckpt_path);
            if (c.meta.at("kind") != "training_checkpoint")
                throw FormatError(ckpt_path.string() + " is not a training checkpoint");
            if (c.meta.at("config_digest") != cfg.digest())
                throw ConfigError(
                    "refusing to resume: checkpoint was written under a different "
                    "training config");
            detail_trainer::fill_from_prefix(c, "param/", result.params);
            PolicyParameters m = zeros_like(result.params);
            PolicyParameters v = zeros_like(result.params);
            detail_trainer::fill_from_prefix(c, "adam_m/", m);
            detail_trainer::fill_from_prefix(c, "adam_v/", v);
            optimizer.restore(std::stoll(c.meta.at("adam_t")), std::move(m), std::move(v));
            st.next_iteration = std::stoi(c.meta.at("next_iteration"));
            st.plateau_counter = std::stoi(c.meta.at("plateau_counter"));
            st.best_signal = std::stod(c.meta.at("best_signal"));
            rng.restore_state(c.meta.at("rng_state"));
        }
        log_stream.open(out_dir / "training_log.jsonl",
                        resumed ? std::ios::app : std::ios::trunc);
    }

    for (int iter = st.next_iteration; iter < cfg.total_iterations; ++iter) {
        const RolloutBatch batch = collect_rollouts(result.params, train, judge, cfg, rng);
        const UpdateReport update = ppo_update(result.params, batch, train, cfg, optimizer);

        IterationStats stats;
        stats.iteration = iter;
        stats.mean_return = batch.mean_return;
        stats.mean_demos = batch.mean_demos;
        stats.policy_loss = update.epochs.back().policy_loss;
        stats.value_loss = update.epochs.back().value_loss;
        stats.entropy = update.epochs.back().entropy;
        stats.epoch1_max_ratio_deviation = update.epochs.front().max_ratio_deviation;
        if (validation)
            stats.val_return = greedy_mean_return(result.params, *validation, judge, cfg);

        const double signal = stats.val_return.value_or(stats.mean_return);
        if (signal > st.best_signal + cfg.plateau_tolerance) {
            st.best_signal = signal;
            st.plateau_counter = 0;
        } else {
            ++st.plateau_counter;
        }

        result.log.push_back(stats);
        result.iterations_run = iter + 1;
        if (persist) {
            log_stream << iteration_stats_to_json(stats).dump() << "\n";
            log_stream.flush();
            if ((iter + 1) % cfg.checkpoint_every == 0 ||
                iter + 1 == cfg.total_iterations) {
                st.next_iteration = iter + 1;
                st.rng_state = rng.save_state();
                detail_trainer::save_checkpoint(ckpt_path, cfg, result.params, optimizer,
                                                st);
            }
        }
        if (st.plateau_counter >= cfg.plateau_patience) {
            result.stopped_early = true;
            break;
        }
    }
    return result;
}

struct PromptPgTrainResult {
    PromptPgParams params;
    std::vector<IterationStats> log;
    int iterations_run = 0;
};

inline PromptPgTrainResult train_promptpg(const TrainingConfig& cfg,
                                          const TrainingCorpus& train,
                                          JudgeBackend& judge,
                                          const std::filesystem::path& out_dir = {}) {
    cfg.validate();
    if (cfg.variant.variant != RetrieverVariant::PromptPg)
        throw ContractViolation("train_promptpg requires the promptpg variant");

    PromptPgTrainResult result;
    result.params = init_promptpg(train.embedding_dim, cfg.promptpg_hidden, cfg.seed);
    AdamOptimizer<PromptPgParams> optimizer(result.params, cfg.learning_rate);
    ReinforceBaseline baseline;
    Rng rng(mix64(cfg.seed, 0x726f6c6c6f757473ull));

    std::ofstream log_stream;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        log_stream.open(out_dir / "training_log.jsonl", std::ios::trunc);
    }

    for (int iter = 0; iter < cfg.total_iterations; ++iter) {
        const PromptPgBatch batch =
            collect_promptpg_rollouts(result.params, train, judge, cfg, rng);
        const EpochStats stats =
            reinforce_update(result.params, batch, train, cfg, optimizer, baseline);

        IterationStats is;
        is.iteration = iter;
        is.mean_return = batch.mean_reward;
        is.mean_demos = cfg.variant.max_shots;
        is.policy_loss = stats.policy_loss;
        result.log.push_back(is);
        result.iterations_run = iter + 1;
        if (log_stream.is_open())
            log_stream << iteration_stats_to_json(is).dump() << "\n";
    }
    return result;
}

}  // namespace kctag
