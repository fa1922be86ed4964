// kctag: knowledge-concept tagging with an RL demonstration retriever.
//
// Subcommands: ingest, train, tag, baseline, enumerate-returns, report.
// Exit codes: 0 success, 2 usage/config error, 3 backend error, 4 data error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include <CLI11.hpp>

#include "kctag/core_data.hpp"
#include "kctag/episode_engine.hpp"
#include "kctag/evaluation.hpp"
#include "kctag/run_config.hpp"
#include "kctag/similarity_baseline.hpp"
#include "kctag/trainer.hpp"

namespace fs = std::filesystem;
using namespace kctag;

namespace {

#ifndef KCTAG_VERSION
#define KCTAG_VERSION "0.0.0"
#endif

struct BackendFlags {
    std::string judge = "simulated";
    std::string judge_spec_path;
    std::string judge_base_url;
    std::string judge_model = "simulated";
    std::string judge_api_key_env = "KCTAG_API_KEY";
    double judge_temperature = 0.0;
    int judge_max_tokens = 512;
    int judge_concurrency = 1;
    std::string cache_dir;

    std::string embedding = "hash";
    int embedding_dim = 16;
    std::uint64_t embedding_seed = 42;
    std::string embedding_model = "text-embedding";
    std::string embedding_base_url;

    void add_judge_flags(CLI::App* cmd) {
        cmd->add_option("--judge", judge, "judge backend: simulated or http")
            ->check(CLI::IsMember({"simulated", "http"}));
        cmd->add_option("--judge-spec", judge_spec_path,
                        "simulated-judge spec JSON (required for --judge simulated)");
        cmd->add_option("--judge-base-url", judge_base_url,
                        "chat-completions base URL for --judge http");
        cmd->add_option("--judge-model", judge_model, "judge model name");
        cmd->add_option("--judge-api-key-env", judge_api_key_env,
                        "environment variable holding the bearer token");
        cmd->add_option("--judge-temperature", judge_temperature, "decoding temperature");
        cmd->add_option("--judge-max-tokens", judge_max_tokens, "decoding token limit");
        cmd->add_option("--judge-concurrency", judge_concurrency,
                        "max in-flight judge requests during evaluation");
        cmd->add_option("--cache-dir", cache_dir, "judge response cache directory");
    }

    void add_embedding_flags(CLI::App* cmd) {
        cmd->add_option("--embedding", embedding, "embedding backend: hash or http")
            ->check(CLI::IsMember({"hash", "http"}));
        cmd->add_option("--embedding-dim", embedding_dim, "hash-backend dimensionality");
        cmd->add_option("--embedding-seed", embedding_seed, "hash-backend seed");
        cmd->add_option("--embedding-model", embedding_model, "embedding model name");
        cmd->add_option("--embedding-base-url", embedding_base_url,
                        "embeddings endpoint base URL for --embedding http");
    }

    std::shared_ptr<JudgeBackend> make_judge() const {
        std::shared_ptr<JudgeBackend> backend;
        if (judge == "simulated") {
            if (judge_spec_path.empty())
                throw UsageError("--judge simulated requires --judge-spec");
            backend = std::make_shared<SimulatedJudge>(load_simulated_spec(judge_spec_path));
        } else {
            HttpJudgeOptions opts;
            opts.base_url = judge_base_url;
            opts.api_key_env = judge_api_key_env;
            if (opts.base_url.empty())
                throw UsageError("--judge http requires --judge-base-url");
            backend = std::make_shared<HttpJudge>(opts);
        }
        if (!cache_dir.empty())
            backend = std::make_shared<CachingJudge>(backend, cache_dir);
        return backend;
    }

    std::shared_ptr<EmbeddingBackend> make_embedding() const {
        std::shared_ptr<EmbeddingBackend> backend;
        if (embedding == "hash") {
            backend = std::make_shared<HashEmbeddingBackend>(embedding_dim, embedding_seed);
        } else {
            if (embedding_base_url.empty())
                throw UsageError("--embedding http requires --embedding-base-url");
            HttpJudgeOptions opts;
            opts.base_url = embedding_base_url;
            opts.api_key_env = judge_api_key_env;
            backend = std::make_shared<HttpEmbeddingBackend>(opts, embedding_model);
        }
        if (!cache_dir.empty())
            backend = std::make_shared<CachingEmbeddingBackend>(
                backend, fs::path(cache_dir) / "embeddings");
        return backend;
    }

    JudgeSettings judge_settings() const {
        JudgeSettings s;
        s.model_name = judge_model;
        s.decoding.temperature = judge_temperature;
        s.decoding.max_tokens = judge_max_tokens;
        return s;
    }
};

std::string join_args(int argc, char** argv) {
    std::string out;
    for (int i = 0; i < argc; ++i) {
        if (i) out += ' ';
        out += argv[i];
    }
    return out;
}

RunManifest base_manifest(const std::string& command_line) {
    RunManifest m;
    m.command_line = command_line;
    m.tool_version = KCTAG_VERSION;
    m.created_at = iso8601_utc_now();
    return m;
}

// ---------------------------------------------------------------------------
// Ingested dataset directory: banks/<knowledge>.jsonl + eval.jsonl
// ---------------------------------------------------------------------------

void write_examples(const std::vector<TaggingExample>& examples, const fs::path& path) {
    std::ostringstream os;
    for (const auto& ex : examples) os << example_to_json(ex).dump() << "\n";
    detail::atomic_write_file(path, os.str());
}

std::vector<TaggingExample> read_examples(const fs::path& path) {
    TaggingDataset ds = load_dataset(path);
    return std::move(ds.examples);
}

struct IngestedData {
    std::map<std::string, DemonstrationBank> banks;
    std::vector<TaggingExample> eval_set;
};

IngestedData load_ingested(const fs::path& dir) {
    IngestedData data;
    const fs::path banks_dir = dir / "banks";
    if (!fs::exists(banks_dir))
        throw DataError("not an ingested dataset directory (no banks/): " + dir.string());
    std::vector<fs::path> bank_files;
    for (const auto& entry : fs::directory_iterator(banks_dir))
        if (entry.path().extension() == ".jsonl") bank_files.push_back(entry.path());
    std::sort(bank_files.begin(), bank_files.end());
    for (const auto& file : bank_files) {
        DemonstrationBank bank;
        bank.entries = read_examples(file);
        if (bank.entries.empty()) continue;
        bank.knowledge_id = bank.entries.front().knowledge.id;
        data.banks.emplace(bank.knowledge_id, std::move(bank));
    }
    data.eval_set = read_examples(dir / "eval.jsonl");
    return data;
}

std::string splits_digest(const SplitResult& split) {
    detail::Sha256 h;
    for (const auto& [kid, bank] : split.banks) {
        h.update(kid);
        for (const auto& e : bank.entries) h.update(example_to_json(e).dump());
    }
    for (const auto& e : split.eval_set) h.update(example_to_json(e).dump());
    return detail::to_hex(h.digest());
}

// ---------------------------------------------------------------------------
// Trained policy artifact (parameters + the settings needed to run them)
// ---------------------------------------------------------------------------

struct PolicyArtifact {
    std::string kind;  // "policy_parameters" or "promptpg_parameters"
    PolicyParameters policy;
    PromptPgParams promptpg;
    RetrieverVariantConfig variant;
    std::string embedding;
    int embedding_dim = 0;
    std::uint64_t embedding_seed = 0;
    std::string embedding_model;
};

std::map<std::string, std::string> artifact_meta(const PolicyArtifact& a,
                                                 const std::string& config_digest) {
    char gamma[32], omega[32];
    std::snprintf(gamma, sizeof(gamma), "%.17g", a.variant.gamma);
    std::snprintf(omega, sizeof(omega), "%.17g", a.variant.omega);
    return {{"kind", a.kind},
            {"config_digest", config_digest},
            {"variant", variant_name(a.variant.variant)},
            {"gamma", gamma},
            {"omega", omega},
            {"max_shots", std::to_string(a.variant.max_shots)},
            {"embedding", a.embedding},
            {"embedding_dim", std::to_string(a.embedding_dim)},
            {"embedding_seed", std::to_string(a.embedding_seed)},
            {"embedding_model", a.embedding_model}};
}

void save_policy_artifact(const PolicyArtifact& a, const fs::path& path,
                          const std::string& config_digest) {
    auto meta = artifact_meta(a, config_digest);
    if (a.kind == "policy_parameters") {
        meta["embedding_dim_net"] = std::to_string(a.policy.embedding_dim);
        meta["hidden_dim"] = std::to_string(a.policy.hidden_dim);
        meta["num_layers"] = std::to_string(a.policy.num_layers);
        save_tensor_container(path, meta, tensor_list(a.policy));
    } else {
        meta["embedding_dim_net"] = std::to_string(a.promptpg.embedding_dim);
        meta["hidden_dim"] = std::to_string(a.promptpg.hidden_dim);
        save_tensor_container(path, meta, tensor_list(a.promptpg));
    }
}

PolicyArtifact load_policy_artifact(const fs::path& path) {
    TensorContainer c = load_tensor_container(path);
    PolicyArtifact a;
    if (!c.meta.count("kind") || !c.meta.count("embedding_dim_net"))
        throw FormatError("not a trained policy artifact: " + path.string());
    a.kind = c.meta.at("kind");
    const std::string backend_dim = c.meta.at("embedding_dim");
    // the network was saved under the net-dim key; map back for the loaders
    c.meta["embedding_dim"] = c.meta.at("embedding_dim_net");
    if (a.kind == "policy_parameters")
        a.policy = params_from_container(c);
    else if (a.kind == "promptpg_parameters")
        a.promptpg = promptpg_from_container(c);
    else
        throw FormatError("not a trained policy artifact: " + path.string());

    a.variant.variant = variant_from_name(c.meta.at("variant"));
    a.variant.gamma = std::stod(c.meta.at("gamma"));
    a.variant.omega = std::stod(c.meta.at("omega"));
    a.variant.max_shots = std::stoi(c.meta.at("max_shots"));
    switch (a.variant.variant) {
        case RetrieverVariant::FlexSdr:
            a.variant.reward_mode = RewardMode::PerStep;
            a.variant.stop_enabled = true;
            break;
        case RetrieverVariant::RetIcl:
        case RetrieverVariant::PromptPg:
            a.variant.reward_mode = RewardMode::FinalOnly;
            a.variant.stop_enabled = false;
            break;
        case RetrieverVariant::FlexRetIcr:
            a.variant.reward_mode = RewardMode::FinalOnly;
            a.variant.stop_enabled = true;
            break;
    }
    a.embedding = c.meta.at("embedding");
    a.embedding_dim = std::stoi(backend_dim);
    a.embedding_seed = std::stoull(c.meta.at("embedding_seed"));
    a.embedding_model = c.meta.at("embedding_model");
    return a;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_ingest(const std::string& dataset_path, const std::string& out_dir,
               int per_label, std::uint64_t seed, const std::string& command_line) {
    const TaggingDataset ds = load_dataset(dataset_path);
    const SplitResult split = split_demo_bank(ds, per_label, seed);

    const fs::path out(out_dir);
    fs::create_directories(out / "banks");
    for (const auto& [kid, bank] : split.banks)
        write_examples(bank.entries, out / "banks" / (kid + ".jsonl"));
    write_examples(split.eval_set, out / "eval.jsonl");
    for (const auto& warning : split.warnings)
        std::cerr << "warning: " << warning << "\n";

    RunManifest manifest = base_manifest(command_line);
    manifest.dataset_digest = detail::file_sha256(dataset_path);
    manifest.config_digest = detail::sha256_hex("per_label=" + std::to_string(per_label));
    manifest.seeds["split"] = seed;
    manifest.artifacts["splits"] = splits_digest(split);
    write_manifest(manifest, out);

    std::cout << "ingested " << ds.size() << " examples into " << split.banks.size()
              << " banks (" << split.eval_set.size() << " eval pairs)\n"
              << "splits digest: " << manifest.artifacts["splits"] << "\n";
    return 0;
}

BackendFlags backend_flags_from(const KeyValueConfig& cfg) {
    BackendFlags flags;
    flags.judge = cfg.get_string("judge", "simulated");
    flags.judge_spec_path = cfg.get_string("judge_spec", "");
    flags.judge_base_url = cfg.get_string("judge_base_url", "");
    flags.judge_model = cfg.get_string("judge_model", "simulated");
    flags.judge_api_key_env = cfg.get_string("judge_api_key_env", "KCTAG_API_KEY");
    flags.judge_temperature = cfg.get_double("judge_temperature", 0.0);
    flags.judge_max_tokens = static_cast<int>(cfg.get_int("judge_max_tokens", 512));
    flags.cache_dir = cfg.get_string("cache_dir", "");
    flags.embedding = cfg.get_string("embedding", "hash");
    flags.embedding_dim = static_cast<int>(cfg.get_int("embedding_dim", 16));
    flags.embedding_seed = cfg.get_u64("embedding_seed", 42);
    flags.embedding_model = cfg.get_string("embedding_model", "text-embedding");
    flags.embedding_base_url = cfg.get_string("embedding_base_url", "");
    return flags;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::string& dataset_override, const std::string& variant_override,
              int max_shots_override, const std::string& command_line) {
    std::string config_text = detail::read_file(config_path);
    if (!variant_override.empty())
        config_text += "\nvariant = " + variant_override + "\n";
    if (max_shots_override > 0)
        config_text += "\nmax_shots = " + std::to_string(max_shots_override) + "\n";
    const KeyValueConfig cfg = KeyValueConfig::parse_string(config_text);
    const TrainingConfig tc = training_config_from(cfg);
    const BackendFlags flags = backend_flags_from(cfg);
    const std::string dataset_dir =
        dataset_override.empty() ? cfg.get_string("dataset_dir") : dataset_override;

    IngestedData data = load_ingested(dataset_dir);
    auto embedding = flags.make_embedding();
    auto judge = flags.make_judge();

    // training pairs default to the ingested directory's train.jsonl and
    // fall back to the eval split when a dedicated file is absent
    std::string train_file = cfg.get_string("train_pairs", "train.jsonl");
    if (!fs::exists(fs::path(dataset_dir) / train_file)) train_file = "eval.jsonl";
    std::vector<TaggingExample> train_pairs =
        read_examples(fs::path(dataset_dir) / train_file);
    TrainingCorpus train = build_corpus(std::move(train_pairs), data.banks, *embedding);

    std::unique_ptr<TrainingCorpus> val;
    if (cfg.has("val_pairs")) {
        std::vector<TaggingExample> val_pairs =
            read_examples(fs::path(dataset_dir) / cfg.get_string("val_pairs"));
        val = std::make_unique<TrainingCorpus>(
            build_corpus(std::move(val_pairs), data.banks, *embedding));
    }

    const fs::path out(out_dir);
    fs::create_directories(out);

    PolicyArtifact artifact;
    artifact.variant = tc.variant;
    artifact.embedding = flags.embedding;
    artifact.embedding_dim = flags.embedding_dim;
    artifact.embedding_seed = flags.embedding_seed;
    artifact.embedding_model = flags.embedding_model;

    if (tc.variant.variant == RetrieverVariant::PromptPg) {
        const PromptPgTrainResult result = train_promptpg(tc, train, *judge, out);
        artifact.kind = "promptpg_parameters";
        artifact.promptpg = result.params;
        std::cout << "trained promptpg for " << result.iterations_run << " iterations\n";
    } else {
        const TrainResult result = train_policy(tc, train, val.get(), *judge, out);
        artifact.kind = "policy_parameters";
        artifact.policy = result.params;
        std::cout << "trained " << variant_name(tc.variant.variant) << " for "
                  << result.iterations_run << " iterations"
                  << (result.stopped_early ? " (stopped on plateau)" : "") << "\n";
    }
    save_policy_artifact(artifact, out / "policy.bin", tc.digest());

    RunManifest manifest = base_manifest(command_line);
    manifest.config_digest = cfg.digest();
    manifest.dataset_digest = detail::file_sha256(fs::path(dataset_dir) / train_file);
    manifest.seeds["training"] = tc.seed;
    manifest.seeds["embedding"] = flags.embedding_seed;
    manifest.artifacts["policy"] = detail::file_sha256(out / "policy.bin");
    write_manifest(manifest, out);
    std::cout << "policy written to " << (out / "policy.bin").string() << "\n";
    return 0;
}

int cmd_tag(const std::string& checkpoint, const std::string& mode, int shots,
            const std::string& dataset_dir, const std::string& out_dir,
            std::uint64_t seed, int max_shots_flag, BackendFlags flags,
            const std::string& command_line) {
    if (checkpoint.empty() && mode.empty())
        throw UsageError("tag needs either --checkpoint or --mode");
    if (flags.judge_temperature != 0.0)
        throw UsageError("tag requires --judge-temperature 0 (deterministic evaluation)");

    PolicyArtifact artifact;
    if (!checkpoint.empty()) {
        artifact = load_policy_artifact(checkpoint);
        // the artifact pins the encoder unless the operator overrides it
        flags.embedding = artifact.embedding;
        flags.embedding_dim = artifact.embedding_dim;
        flags.embedding_seed = artifact.embedding_seed;
        flags.embedding_model = artifact.embedding_model;
        if (max_shots_flag > 0) {
            artifact.variant.max_shots = max_shots_flag;
            if (artifact.variant.variant == RetrieverVariant::FlexRetIcr)
                artifact.variant.omega = 1.0 / max_shots_flag;  // the 1/T rule
        }
    }

    IngestedData data = load_ingested(dataset_dir);
    auto embedding = flags.make_embedding();
    auto judge = flags.make_judge();
    TrainingCorpus eval_corpus =
        build_corpus(std::move(data.eval_set), std::move(data.banks), *embedding);

    std::unique_ptr<Tagger> tagger;
    const JudgeSettings settings = flags.judge_settings();
    if (!checkpoint.empty()) {
        if (artifact.kind == "policy_parameters")
            tagger = std::make_unique<RetrieverTagger>(artifact.policy, artifact.variant,
                                                       *judge, settings);
        else
            tagger = std::make_unique<PromptPgTagger>(
                artifact.promptpg, artifact.variant.max_shots, *judge, settings);
    } else if (mode == "zero-shot") {
        tagger = std::make_unique<ZeroShotTagger>(*judge, settings);
    } else if (mode == "k-shot") {
        if (shots <= 0) throw UsageError("--mode k-shot requires --shots > 0");
        tagger = std::make_unique<KShotTagger>(*judge, settings, shots,
                                               ShotSelection::Random, seed);
    } else {
        throw UsageError("unknown tag mode: " + mode);
    }

    std::vector<Trajectory> trajectories;
    const MetricReport report = evaluate(*tagger, eval_corpus.episode_pairs,
                                         {flags.judge_concurrency}, &trajectories);

    const fs::path out(out_dir);
    fs::create_directories(out);
    detail::atomic_write_file(out / "report.json", report_to_json(report).dump(2) + "\n");
    detail::atomic_write_file(out / "report.txt", render_report_table(report));
    {
        std::ostringstream os;
        for (const auto& p : report.predictions) {
            nlohmann::json rec{{"knowledge_id", p.knowledge_id},
                               {"question_id", p.question_id},
                               {"gold", p.gold},
                               {"predicted", p.predicted},
                               {"unparseable", p.unparseable},
                               {"errored", p.errored},
                               {"demos_used", p.demos_used}};
            os << rec.dump() << "\n";
        }
        detail::atomic_write_file(out / "predictions.jsonl", os.str());
    }
    if (!trajectories.empty()) {
        std::ostringstream os;
        for (const auto& t : trajectories) os << trajectory_to_json(t).dump() << "\n";
        detail::atomic_write_file(out / "trajectories.jsonl", os.str());
    }

    RunManifest manifest = base_manifest(command_line);
    manifest.config_digest =
        detail::sha256_hex("mode=" + (checkpoint.empty() ? mode : "checkpoint") +
                           "|shots=" + std::to_string(shots));
    manifest.dataset_digest = detail::file_sha256(fs::path(dataset_dir) / "eval.jsonl");
    manifest.seeds["tag"] = seed;
    manifest.artifacts["report"] = detail::file_sha256(out / "report.json");
    manifest.artifacts["predictions"] = detail::file_sha256(out / "predictions.jsonl");
    write_manifest(manifest, out);

    if (report.errored > 0)
        std::cerr << "warning: " << report.errored << " pairs errored and were excluded\n";
    std::cout << render_report_table(report);
    return report.errored > 0 ? 3 : 0;
}

int cmd_baseline(const std::string& dataset_dir, const std::string& out_dir,
                 const std::string& sim_mode, const std::vector<double>& etas,
                 const std::vector<int>& ks, const BackendFlags& flags,
                 const std::string& command_line) {
    IngestedData data = load_ingested(dataset_dir);
    auto embedding = flags.make_embedding();

    const std::vector<double> eta_grid = etas.empty() ? default_eta_grid() : etas;
    const std::vector<int> k_grid = ks.empty() ? default_k_grid() : ks;

    nlohmann::json out_json = nlohmann::json::object();
    auto run_mode = [&](SimilarityMode m, const std::string& name) {
        const ScoredPool pool = score_eval_pairs(m, data.eval_set, data.banks, *embedding);
        const GridSearchResult result = grid_search_baseline(pool, eta_grid, k_grid);
        nlohmann::json table = nlohmann::json::array();
        for (const auto& entry : result.table)
            table.push_back(
                {{"mode", entry.cfg.mode == BaselineConfig::Mode::Threshold ? "threshold"
                                                                            : "top_k"},
                 {"eta", entry.cfg.eta},
                 {"k", entry.cfg.k},
                 {"accuracy", entry.metrics.accuracy},
                 {"precision", entry.metrics.precision},
                 {"recall", entry.metrics.recall},
                 {"f1", entry.metrics.f1}});
        out_json[name] = {
            {"best",
             {{"mode", result.best.mode == BaselineConfig::Mode::Threshold ? "threshold"
                                                                           : "top_k"},
              {"eta", result.best.eta},
              {"k", result.best.k},
              {"f1", result.best_metrics.f1},
              {"accuracy", result.best_metrics.accuracy},
              {"precision", result.best_metrics.precision},
              {"recall", result.best_metrics.recall}}},
            {"table", table}};
        std::cout << name << ": best "
                  << (result.best.mode == BaselineConfig::Mode::Threshold
                          ? "eta=" + std::to_string(result.best.eta)
                          : "K=" + std::to_string(result.best.k))
                  << "  f1=" << result.best_metrics.f1 << "\n";
    };

    if (sim_mode == "kq" || sim_mode == "both")
        run_mode(SimilarityMode::KnowledgeToQuestion, "kq");
    if (sim_mode == "qq" || sim_mode == "both")
        run_mode(SimilarityMode::QuestionToQuestion, "qq");

    const fs::path out(out_dir);
    fs::create_directories(out);
    detail::atomic_write_file(out / "baseline_report.json", out_json.dump(2) + "\n");

    RunManifest manifest = base_manifest(command_line);
    manifest.config_digest = detail::sha256_hex("sim_mode=" + sim_mode);
    manifest.dataset_digest = detail::file_sha256(fs::path(dataset_dir) / "eval.jsonl");
    manifest.seeds["embedding"] = flags.embedding_seed;
    manifest.artifacts["baseline_report"] =
        detail::file_sha256(out / "baseline_report.json");
    write_manifest(manifest, out);
    return 0;
}

int cmd_enumerate_returns(int max_shots, const std::vector<double>& gammas, double omega,
                          const std::string& variant, const std::string& out_path) {
    RetrieverVariantConfig base;
    switch (variant_from_name(variant)) {
        case RetrieverVariant::FlexSdr:
            base = RetrieverVariantConfig::flex_sdr(max_shots, 0.5, omega);
            break;
        case RetrieverVariant::RetIcl:
            base = RetrieverVariantConfig::ret_icl(max_shots);
            break;
        case RetrieverVariant::FlexRetIcr:
            base = RetrieverVariantConfig::flex_ret_icr(max_shots);
            break;
        case RetrieverVariant::PromptPg:
            base = RetrieverVariantConfig::prompt_pg(max_shots);
            break;
    }
    const std::vector<double> grid =
        gammas.empty() ? std::vector<double>{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}
                       : gammas;
    const ReturnTable table = enumerate_returns(max_shots, grid, omega, base);

    std::ostringstream os;
    os << "pattern";
    for (double g : table.gammas) os << "\tg=" << g;
    os << "\n";
    for (std::size_t i = 0; i < table.patterns.size(); ++i) {
        os << table.patterns[i].notation(table.horizon);
        for (double r : table.returns[i]) os << "\t" << r;
        os << "\n";
    }
    os << "\norderings (per gamma):\n";
    for (const auto& check : check_return_orderings(table)) {
        os << "  " << check.description << ": ";
        for (std::size_t g = 0; g < check.holds.size(); ++g)
            os << (check.holds[g] ? "y" : "N") << (g + 1 < check.holds.size() ? " " : "");
        if (!check.holds_everywhere()) os << "   [does not hold for every gamma]";
        os << "\n";
    }

    if (out_path.empty())
        std::cout << os.str();
    else
        detail::atomic_write_file(out_path, os.str());
    return 0;
}

int cmd_report(const std::string& zero_shot_path, const std::string& retriever_path,
               const std::string& out_dir, const std::string& command_line) {
    const MetricReport zero =
        report_from_json(nlohmann::json::parse(detail::read_file(zero_shot_path)));
    const MetricReport retr =
        report_from_json(nlohmann::json::parse(detail::read_file(retriever_path)));
    const UsageCorrelation corr = knowledge_accuracy_vs_demos(zero, retr);

    std::ostringstream os;
    os << "pipelines: " << zero.pipeline << " (zero-shot) vs " << retr.pipeline << "\n";
    os << "zero-shot: acc=" << zero.micro.accuracy << " f1=" << zero.micro.f1 << "\n";
    os << "retriever: acc=" << retr.micro.accuracy << " f1=" << retr.micro.f1
       << " mean_demos=" << retr.mean_demos << "\n\n";
    os << "knowledge        zero_acc   mean_demos\n";
    for (const auto& p : corr.points)
        os << p.knowledge_id << "  " << p.zero_shot_accuracy << "  " << p.mean_demos
           << "\n";
    if (corr.pearson)
        os << "\npearson(zero-shot accuracy, mean demos) = " << *corr.pearson
           << (corr.zero_variance ? " [zero variance]" : "") << "\n";
    else
        os << "\npearson omitted (fewer than 3 knowledge ids)\n";
    std::cout << os.str();

    if (!out_dir.empty()) {
        const fs::path out(out_dir);
        fs::create_directories(out);
        detail::atomic_write_file(out / "comparison.txt", os.str());
        detail::atomic_write_file(out / "comparison.json",
                                  usage_correlation_to_json(corr).dump(2) + "\n");
        RunManifest manifest = base_manifest(command_line);
        manifest.config_digest = detail::sha256_hex("report");
        manifest.dataset_digest =
            detail::sha256_hex(detail::file_sha256(zero_shot_path) +
                               detail::file_sha256(retriever_path));
        manifest.artifacts["comparison"] = detail::file_sha256(out / "comparison.json");
        write_manifest(manifest, out);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"knowledge-concept tagging with an RL demonstration retriever"};
    app.require_subcommand(1);
    const std::string command_line = join_args(argc, argv);

    // ingest
    auto* ingest = app.add_subcommand("ingest", "split a dataset into banks and eval set");
    std::string ingest_dataset, ingest_out;
    int ingest_per_label = 5;
    std::uint64_t ingest_seed = 1;
    ingest->add_option("--dataset", ingest_dataset, "JSONL dataset file")->required();
    ingest->add_option("--out", ingest_out, "output directory")->required();
    ingest->add_option("--per-label", ingest_per_label,
                       "demonstrations per label per knowledge");
    ingest->add_option("--seed", ingest_seed, "split seed");

    // train
    auto* train = app.add_subcommand("train", "train a retriever policy");
    std::string train_config, train_out, train_dataset, train_variant;
    int train_max_shots = 0;
    train->add_option("--config", train_config, "key = value run config")->required();
    train->add_option("--out", train_out, "output directory")->required();
    train->add_option("--dataset", train_dataset, "ingested dataset dir (overrides config)");
    train->add_option("--variant", train_variant, "override the config's variant")
        ->check(CLI::IsMember({"flexsdr", "reticl", "flexreticr", "promptpg"}));
    train->add_option("--max-shots", train_max_shots, "override the config's shot budget");

    // tag
    auto* tag = app.add_subcommand("tag", "judge every eval pair and report metrics");
    std::string tag_checkpoint, tag_mode, tag_dataset, tag_out;
    int tag_shots = 0, tag_max_shots = 0;
    std::uint64_t tag_seed = 1;
    BackendFlags tag_flags;
    tag->add_option("--checkpoint", tag_checkpoint, "trained policy artifact");
    tag->add_option("--mode", tag_mode, "zero-shot or k-shot")
        ->check(CLI::IsMember({"zero-shot", "k-shot"}));
    tag->add_option("--shots", tag_shots, "k for k-shot mode");
    tag->add_option("--max-shots", tag_max_shots, "override the retriever's shot budget");
    tag->add_option("--dataset", tag_dataset, "ingested dataset dir")->required();
    tag->add_option("--out", tag_out, "output directory")->required();
    tag->add_option("--seed", tag_seed, "seed for random shot selection");
    tag_flags.add_judge_flags(tag);
    tag_flags.add_embedding_flags(tag);

    // baseline
    auto* baseline = app.add_subcommand("baseline", "similarity baselines with grid search");
    std::string baseline_dataset, baseline_out, baseline_mode = "both";
    std::vector<double> baseline_etas;
    std::vector<int> baseline_ks;
    BackendFlags baseline_flags;
    baseline->add_option("--dataset", baseline_dataset, "ingested dataset dir")->required();
    baseline->add_option("--out", baseline_out, "output directory")->required();
    baseline->add_option("--sim-mode", baseline_mode, "kq, qq, or both")
        ->check(CLI::IsMember({"kq", "qq", "both"}));
    baseline->add_option("--etas", baseline_etas, "threshold grid");
    baseline->add_option("--ks", baseline_ks, "top-K grid");
    baseline_flags.add_embedding_flags(baseline);
    baseline->add_option("--cache-dir", baseline_flags.cache_dir, "embedding cache dir");

    // enumerate-returns
    auto* enumerate = app.add_subcommand("enumerate-returns",
                                         "tabulate return functions per gamma");
    int enum_shots = 2;
    std::vector<double> enum_gammas;
    double enum_omega = 1.0;
    std::string enum_variant = "flexsdr", enum_out;
    enumerate->add_option("--max-shots", enum_shots, "horizon T");
    enumerate->add_option("--gammas", enum_gammas, "gamma grid");
    enumerate->add_option("--omega", enum_omega, "stop bonus weight");
    enumerate->add_option("--variant", enum_variant, "reward semantics")
        ->check(CLI::IsMember({"flexsdr", "reticl", "flexreticr", "promptpg"}));
    enumerate->add_option("--out", enum_out, "write the table here instead of stdout");

    // report
    auto* report = app.add_subcommand("report", "compare a zero-shot and a retriever run");
    std::string report_zero, report_retriever, report_out;
    report->add_option("--zero-shot", report_zero, "zero-shot report.json")->required();
    report->add_option("--retriever", report_retriever, "retriever report.json")->required();
    report->add_option("--out", report_out, "output directory");

    try {
        app.parse(argc, argv);
        if (*ingest)
            return cmd_ingest(ingest_dataset, ingest_out, ingest_per_label, ingest_seed,
                              command_line);
        if (*train)
            return cmd_train(train_config, train_out, train_dataset, train_variant,
                             train_max_shots, command_line);
        if (*tag)
            return cmd_tag(tag_checkpoint, tag_mode, tag_shots, tag_dataset, tag_out,
                           tag_seed, tag_max_shots, tag_flags, command_line);
        if (*baseline)
            return cmd_baseline(baseline_dataset, baseline_out, baseline_mode,
                                baseline_etas, baseline_ks, baseline_flags, command_line);
        if (*enumerate)
            return cmd_enumerate_returns(enum_shots, enum_gammas, enum_omega, enum_variant,
                                         enum_out);
        if (*report) return cmd_report(report_zero, report_retriever, report_out,
                                       command_line);
        return 2;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const BackendError& e) {
        std::cerr << "backend error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 4;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
