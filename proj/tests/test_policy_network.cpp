#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <unistd.h>

#include "kctag/policy_network.hpp"
#include "support/gradcheck.hpp"

using namespace kctag;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
    static int counter = 0;
    const fs::path dir =
        fs::temp_directory_path() / ("kctag_policy_" + std::to_string(::getpid()) + "_" +
                                     std::to_string(counter++));
    fs::create_directories(dir);
    return dir / name;
}

Vec random_unit(Rng& rng, int dim) {
    Vec v(dim);
    for (int i = 0; i < dim; ++i) v(i) = rng.normal();
    return v / v.norm();
}

Mat random_bank(Rng& rng, int dim, int n) {
    Mat m(dim, n);
    for (int j = 0; j < n; ++j) m.col(j) = random_unit(rng, dim);
    return m;
}

}  // namespace

TEST_CASE("init_params is deterministic and shaped per configuration") {
    const PolicyParameters a = init_params(12, 64, 2, 123);
    const PolicyParameters b = init_params(12, 64, 2, 123);
    const auto ta = tensor_list(a), tb = tensor_list(b);
    for (std::size_t i = 0; i < ta.size(); ++i) CHECK(*ta[i].second == *tb[i].second);

    CHECK(a.action_w.rows() == 64);
    CHECK(a.action_w.cols() == 12);
    CHECK(a.fuse_w.rows() == 64);
    CHECK(a.fuse_w.cols() == 24);
    CHECK(a.lstm.size() == 2);
    CHECK(a.lstm[0].w_in.cols() == 12);
    CHECK(a.lstm[1].w_in.cols() == 64);
    CHECK(a.fuse_b.isZero());
    CHECK(a.lstm[0].bias.isZero());

    const PolicyParameters c = init_params(12, 64, 2, 124);
    CHECK_FALSE(a.fuse_w == c.fuse_w);
}

TEST_CASE("zero fusion weights give a zero initial state, otherwise tanh-bounded") {
    Rng rng(5);
    PolicyParameters p = init_params(6, 4, 2, 1);
    const Vec x_k = random_unit(rng, 6), x_q = random_unit(rng, 6);

    PolicyParameters zeroed = p;
    zeroed.fuse_w.setZero();
    zeroed.fuse_b.setZero();
    const RetrieverState s0 = encode_query(zeroed, x_k, x_q, 3);
    CHECK(s0.top_hidden().isZero());

    const RetrieverState s1 = encode_query(p, x_k, x_q, 3);
    for (int i = 0; i < 4; ++i) {
        CHECK(s1.top_hidden()(i) > -1.0);
        CHECK(s1.top_hidden()(i) < 1.0);
    }
    CHECK_THROWS_AS(encode_query(p, Vec::Zero(5), x_q, 3), ContractViolation);
}

TEST_CASE("advance_state with all-zero LSTM parameters matches the hand-computed cell") {
    Rng rng(6);
    PolicyParameters p = init_params(4, 3, 2, 2);
    for (auto& layer : p.lstm) {
        layer.w_in.setZero();
        layer.w_rec.setZero();
        layer.bias.setZero();
    }
    const Vec x_k = random_unit(rng, 4), x_q = random_unit(rng, 4);
    const Mat bank = random_bank(rng, 4, 2);

    RetrieverState s = encode_query(p, x_k, x_q, 2);
    const Vec h0 = s.top_hidden();
    advance_state(s, p, bank, 1);

    // gates sigmoid(0)=0.5, candidate tanh(0)=0:
    //   c1 = 0.5*c0, h1 = 0.5*tanh(0.5*c0), per layer with c0 = h0
    const Vec c1_expected = 0.5 * h0;
    const Vec h1_expected = 0.5 * c1_expected.array().tanh();
    for (int l = 0; l < 2; ++l) {
        CHECK((s.c[l] - c1_expected).cwiseAbs().maxCoeff() < 1e-15);
        CHECK((s.h[l] - h1_expected).cwiseAbs().maxCoeff() < 1e-15);
    }
    CHECK(s.selected == std::vector<int>{1});
    CHECK(s.mask[1] == 1);
    CHECK_THROWS_AS(advance_state(s, p, bank, 1), ContractViolation);  // already taken
}

TEST_CASE("consumption order changes the hidden state") {
    Rng rng(7);
    const PolicyParameters p = init_params(5, 4, 2, 77);
    const Vec x_k = random_unit(rng, 5), x_q = random_unit(rng, 5);
    const Mat bank = random_bank(rng, 5, 3);

    RetrieverState fwd = encode_query(p, x_k, x_q, 3);
    advance_state(fwd, p, bank, 0);
    advance_state(fwd, p, bank, 1);

    RetrieverState rev = encode_query(p, x_k, x_q, 3);
    advance_state(rev, p, bank, 1);
    advance_state(rev, p, bank, 0);

    CHECK((fwd.top_hidden() - rev.top_hidden()).norm() > 1e-8);
    CHECK(fwd.selected.size() == 2);
}

TEST_CASE("score_actions: zero state is uniform, masked entries carry zero probability") {
    Rng rng(8);
    PolicyParameters p = init_params(4, 3, 1, 3);
    p.fuse_w.setZero();
    p.fuse_b.setZero();  // h0 = 0 -> all logits 0
    const Vec x_k = random_unit(rng, 4), x_q = random_unit(rng, 4);
    const Mat bank = random_bank(rng, 4, 4);

    RetrieverState s = encode_query(p, x_k, x_q, 4);
    const ActionDistribution uniform = score_actions(s, p, bank, true);
    for (int j = 0; j <= 4; ++j)
        CHECK(uniform.probs(j) == Catch::Approx(1.0 / 5).margin(1e-12));

    s.mask[2] = 1;
    const ActionDistribution masked = score_actions(s, p, bank, true);
    CHECK(masked.probs(2) == 0.0);
    CHECK(std::isinf(masked.logits(2)));
    CHECK(masked.probs.sum() == Catch::Approx(1.0).margin(1e-9));

    const ActionDistribution no_stop = score_actions(s, p, bank, false);
    CHECK(no_stop.probs(no_stop.stop_index()) == 0.0);
}

TEST_CASE("probabilities sum to one across random configurations") {
    Rng rng(9);
    for (int trial = 0; trial < 1000; ++trial) {
        const int dim = 2 + static_cast<int>(rng.below(6));
        const int hidden = 2 + static_cast<int>(rng.below(3));
        const int n = 1 + static_cast<int>(rng.below(5));
        const PolicyParameters p = init_params(dim, hidden, 1, rng.next_u64());
        const Vec x_k = random_unit(rng, dim), x_q = random_unit(rng, dim);
        const Mat bank = random_bank(rng, dim, n);
        RetrieverState s = encode_query(p, x_k, x_q, n);
        const ActionDistribution dist = score_actions(s, p, bank, true);
        CHECK(std::abs(dist.probs.sum() - 1.0) <= 1e-9);
    }
}

TEST_CASE("positive rescaling of the bilinear head preserves the argmax") {
    Rng rng(10);
    PolicyParameters p = init_params(6, 4, 2, 11);
    const Vec x_k = random_unit(rng, 6), x_q = random_unit(rng, 6);
    const Mat bank = random_bank(rng, 6, 5);
    RetrieverState s = encode_query(p, x_k, x_q, 5);
    const ActionDistribution before = score_actions(s, p, bank, true);

    p.action_w *= 3.7;
    const ActionDistribution after = score_actions(s, p, bank, true);
    for (int j = 0; j <= 5; ++j)
        CHECK(after.logits(j) == Catch::Approx(3.7 * before.logits(j)).margin(1e-12));

    Rng grng(0);
    CHECK(select_action(before, SelectionMode::Greedy, grng) ==
          select_action(after, SelectionMode::Greedy, grng));
}

TEST_CASE("greedy selection breaks ties toward the lowest index") {
    ActionDistribution dist;
    dist.logits = Vec::Zero(4);
    dist.probs = Vec::Constant(4, 0.25);
    dist.log_probs = Vec::Constant(4, std::log(0.25));
    dist.masked.assign(4, 0);
    Rng rng(1);
    CHECK(select_action(dist, SelectionMode::Greedy, rng) == 0);

    dist.probs << 0.1, 0.7, 0.1, 0.1;
    CHECK(select_action(dist, SelectionMode::Greedy, rng) == 1);
}

TEST_CASE("sampling a one-hot distribution always returns its support") {
    ActionDistribution dist;
    dist.logits = Vec::Zero(3);
    dist.probs = Vec::Zero(3);
    dist.probs(2) = 1.0;
    dist.log_probs = Vec::Constant(3, -1e9);
    dist.log_probs(2) = 0;
    dist.masked = {1, 1, 0};
    Rng rng(33);
    for (int i = 0; i < 100; ++i)
        CHECK(select_action(dist, SelectionMode::Sample, rng) == 2);
}

TEST_CASE("sampling frequencies match probabilities within 3 sigma") {
    Rng rng(12);
    const PolicyParameters p = init_params(4, 3, 1, 21);
    const Vec x_k = random_unit(rng, 4), x_q = random_unit(rng, 4);
    const Mat bank = random_bank(rng, 4, 3);
    RetrieverState s = encode_query(p, x_k, x_q, 3);
    const ActionDistribution dist = score_actions(s, p, bank, true);

    const int n = 100000;
    std::vector<int> counts(4, 0);
    for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(
        select_action(dist, SelectionMode::Sample, rng))];
    for (int j = 0; j < 4; ++j) {
        const double expected = dist.probs(j) * n;
        const double sigma = std::sqrt(n * dist.probs(j) * (1 - dist.probs(j)));
        CHECK(std::abs(counts[static_cast<std::size_t>(j)] - expected) <= 3 * sigma);
    }
}

TEST_CASE("value estimate is the linear value head") {
    Rng rng(13);
    PolicyParameters p = init_params(4, 3, 1, 31);
    const Vec x_k = random_unit(rng, 4), x_q = random_unit(rng, 4);
    RetrieverState s = encode_query(p, x_k, x_q, 2);

    PolicyParameters zero_head = p;
    zero_head.value_w.setZero();
    zero_head.value_b.setZero();
    CHECK(value_estimate(s, zero_head) == 0.0);

    const double v = value_estimate(s, p);
    PolicyParameters doubled = p;
    doubled.value_w *= 2.0;
    doubled.value_b *= 2.0;
    CHECK(value_estimate(s, doubled) == Catch::Approx(2 * v).margin(1e-12));
}

TEST_CASE("fusion-layer gradient matches central finite differences") {
    Rng rng(14);
    const auto episode = testing::random_episode(rng, 4, 3, 1, 3, 1);
    // seed only the value output of the first decision: the value head reads
    // h0 directly, so this isolates d(h0)/d(fusion parameters)
    std::vector<StepOutputGrads> weights(episode.actions.size());
    weights[0].d_value = 1.0;
    const double max_rel = testing::gradcheck_max_rel_error(episode, weights, 1e-4);
    CHECK(max_rel <= 1e-5);
}

TEST_CASE("value-head gradient matches central finite differences") {
    Rng rng(15);
    const auto episode = testing::random_episode(rng, 5, 4, 2, 4, 2);
    std::vector<StepOutputGrads> weights(episode.actions.size());
    for (auto& w : weights) w.d_value = 0.7;
    const double max_rel = testing::gradcheck_max_rel_error(episode, weights, 1e-4);
    CHECK(max_rel <= 1e-5);
}

TEST_CASE("a loss that ignores the network yields zero gradients") {
    Rng rng(16);
    const auto episode = testing::random_episode(rng, 4, 3, 2, 3, 2);
    const std::vector<StepOutputGrads> weights(episode.actions.size());  // all zero
    EpisodeTape tape = replay_episode(episode.params, episode.x_k, episode.x_q,
                                      episode.bank, episode.include_stop,
                                      episode.actions);
    const PolicyParameters grads = tape.backward(weights);
    for (const auto& [name, mat] : tensor_list(grads)) {
        INFO(name);
        CHECK(mat->isZero());
    }
}

TEST_CASE("backward is deterministic") {
    Rng rng(17);
    const auto episode = testing::random_episode(rng, 4, 3, 2, 4, 3);
    std::vector<StepOutputGrads> weights(episode.actions.size());
    for (auto& w : weights) {
        w.d_log_prob = 0.3;
        w.d_value = -0.2;
        w.d_entropy = 0.1;
    }
    EpisodeTape tape = replay_episode(episode.params, episode.x_k, episode.x_q,
                                      episode.bank, episode.include_stop,
                                      episode.actions);
    const PolicyParameters a = tape.backward(weights);
    const PolicyParameters b = tape.backward(weights);
    const auto ta = tensor_list(a), tb = tensor_list(b);
    for (std::size_t i = 0; i < ta.size(); ++i) CHECK(*ta[i].second == *tb[i].second);
}

TEST_CASE("small random episodes pass the finite-difference gradient check") {
    Rng rng(18);
    double worst = 0;
    for (int trial = 0; trial < 30; ++trial) {
        const auto episode = testing::random_episode(rng);
        std::vector<StepOutputGrads> weights(episode.actions.size());
        for (auto& w : weights) {
            w.d_log_prob = rng.uniform(-1, 1);
            w.d_value = rng.uniform(-1, 1);
            w.d_entropy = rng.uniform(-1, 1);
        }
        worst = std::max(worst,
                         testing::gradcheck_max_rel_error(episode, weights, 1e-4));
    }
    CHECK(worst <= 1e-4);
}

TEST_CASE("stop-action gradients vanish when stop is unavailable") {
    Rng rng(19);
    auto episode = testing::random_episode(rng, 4, 3, 2, 4, 2, /*force_no_stop=*/true);
    std::vector<StepOutputGrads> weights(episode.actions.size());
    for (auto& w : weights) w.d_log_prob = 1.0;
    EpisodeTape tape = replay_episode(episode.params, episode.x_k, episode.x_q,
                                      episode.bank, episode.include_stop,
                                      episode.actions);
    const PolicyParameters grads = tape.backward(weights);
    CHECK(grads.stop_embedding.isZero());
}

TEST_CASE("parameters survive a save/load round-trip bit-exactly") {
    const PolicyParameters p = init_params(6, 5, 2, 91);
    const fs::path path = temp_file("params.bin");
    save_params(p, path, "digest-abc");

    const LoadedParams loaded = load_params(path);
    CHECK(loaded.config_digest == "digest-abc");
    const auto ta = tensor_list(p), tb = tensor_list(loaded.params);
    for (std::size_t i = 0; i < ta.size(); ++i) CHECK(*ta[i].second == *tb[i].second);
    CHECK(loaded.params.hidden_dim == 5);
}

TEST_CASE("loading a container with inconsistent shapes is a format error") {
    const PolicyParameters p = init_params(6, 5, 2, 91);
    const fs::path path = temp_file("bad.bin");
    // declare hidden_dim=7 while writing tensors shaped for hidden_dim=5
    std::map<std::string, std::string> meta{{"kind", "policy_parameters"},
                                            {"embedding_dim", "6"},
                                            {"hidden_dim", "7"},
                                            {"num_layers", "2"}};
    save_tensor_container(path, meta, tensor_list(p));
    CHECK_THROWS_AS(load_params(path), FormatError);
}

TEST_CASE("a corrupted parameter file fails its checksum") {
    const PolicyParameters p = init_params(4, 3, 1, 8);
    const fs::path path = temp_file("corrupt.bin");
    save_params(p, path);

    std::string blob = detail::read_file(path);
    blob[blob.size() / 2] ^= 0x01;
    detail::atomic_write_file(path, blob);
    CHECK_THROWS_AS(load_params(path), FormatError);
}
