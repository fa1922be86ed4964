#pragma once

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kctag/detail/fs.hpp"
#include "kctag/detail/sha256.hpp"
#include "kctag/errors.hpp"
#include "kctag/rng.hpp"

namespace kctag {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct LstmLayerParams {
    Mat w_in;   // 4H x in_dim, gate order [input; forget; candidate; output]
    Mat w_rec;  // 4H x H
    Mat bias;   // 4H x 1
};

// All learnable tensors of the retriever: the (knowledge, question) fusion
// layer, the LSTM stack, the bilinear action head shared by demonstrations
// and the stop action, the learned stop embedding, and the value head.
struct PolicyParameters {
    int embedding_dim = 0;
    int hidden_dim = 0;
    int num_layers = 0;

    Mat fuse_w;          // H x 2D
    Mat fuse_b;          // H x 1
    std::vector<LstmLayerParams> lstm;
    Mat action_w;        // H x D
    Mat stop_embedding;  // D x 1
    Mat value_w;         // H x 1
    Mat value_b;         // 1 x 1
};

inline std::vector<std::pair<std::string, Mat*>> tensor_list(PolicyParameters& p) {
    std::vector<std::pair<std::string, Mat*>> out;
    out.emplace_back("fuse_w", &p.fuse_w);
    out.emplace_back("fuse_b", &p.fuse_b);
    for (std::size_t l = 0; l < p.lstm.size(); ++l) {
        const std::string prefix = "lstm" + std::to_string(l) + "_";
        out.emplace_back(prefix + "w_in", &p.lstm[l].w_in);
        out.emplace_back(prefix + "w_rec", &p.lstm[l].w_rec);
        out.emplace_back(prefix + "bias", &p.lstm[l].bias);
    }
    out.emplace_back("action_w", &p.action_w);
    out.emplace_back("stop_embedding", &p.stop_embedding);
    out.emplace_back("value_w", &p.value_w);
    out.emplace_back("value_b", &p.value_b);
    return out;
}

inline std::vector<std::pair<std::string, const Mat*>> tensor_list(
    const PolicyParameters& p) {
    std::vector<std::pair<std::string, const Mat*>> out;
    for (auto& [name, mat] : tensor_list(const_cast<PolicyParameters&>(p)))
        out.emplace_back(name, mat);
    return out;
}

inline PolicyParameters zeros_like(const PolicyParameters& p) {
    PolicyParameters z = p;
    for (auto& [name, mat] : tensor_list(z)) mat->setZero();
    return z;
}

// dst += src, elementwise over all tensors of any tensor_list-compatible
// parameter struct.
template <class Params>
void accumulate(Params& dst, const Params& src) {
    auto d = tensor_list(dst);
    auto s = tensor_list(src);
    for (std::size_t i = 0; i < d.size(); ++i) *d[i].second += *s[i].second;
}

inline void check_finite(const PolicyParameters& p, const std::string& context) {
    for (const auto& [name, mat] : tensor_list(p))
        if (!mat->allFinite())
            throw DataError(context + ": tensor " + name + " contains non-finite values");
}

// Deterministic initialization: every weight uniform in [-s, s] with
// s = 1/sqrt(fan-in), biases zero, the stop embedding drawn like a weight
// row of the bilinear head.
inline PolicyParameters init_params(int embedding_dim, int hidden, int layers,
                                    std::uint64_t seed) {
    if (embedding_dim <= 0 || hidden <= 0 || layers <= 0)
        throw ContractViolation("init_params: dims must be positive");

    PolicyParameters p;
    p.embedding_dim = embedding_dim;
    p.hidden_dim = hidden;
    p.num_layers = layers;
    p.fuse_w.setZero(hidden, 2 * embedding_dim);
    p.fuse_b.setZero(hidden, 1);
    p.lstm.resize(layers);
    for (int l = 0; l < layers; ++l) {
        const int in_dim = l == 0 ? embedding_dim : hidden;
        p.lstm[l].w_in.setZero(4 * hidden, in_dim);
        p.lstm[l].w_rec.setZero(4 * hidden, hidden);
        p.lstm[l].bias.setZero(4 * hidden, 1);
    }
    p.action_w.setZero(hidden, embedding_dim);
    p.stop_embedding.setZero(embedding_dim, 1);
    p.value_w.setZero(hidden, 1);
    p.value_b.setZero(1, 1);

    Rng rng(seed);
    auto fill_uniform = [&](Mat& m, int fan_in) {
        const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-s, s);
    };
    fill_uniform(p.fuse_w, 2 * embedding_dim);
    for (int l = 0; l < layers; ++l) {
        const int in_dim = l == 0 ? embedding_dim : hidden;
        fill_uniform(p.lstm[l].w_in, in_dim);
        fill_uniform(p.lstm[l].w_rec, hidden);
    }
    fill_uniform(p.action_w, embedding_dim);
    fill_uniform(p.stop_embedding, embedding_dim);
    fill_uniform(p.value_w, hidden);
    return p;
}

// ---------------------------------------------------------------------------
// Forward state
// ---------------------------------------------------------------------------

// Recurrent state of one retrieval episode: hidden and cell vectors per
// layer, the ordered selections so far, and the availability mask. The
// scoring state h_t is the top layer's hidden vector.
struct RetrieverState {
    std::vector<Vec> h;          // per layer, H
    std::vector<Vec> c;          // per layer, H
    std::vector<int> selected;
    std::vector<char> mask;      // per bank entry, 1 = already selected

    const Vec& top_hidden() const { return h.back(); }
};

namespace detail_policy {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Everything the cell backward needs from one forward step of one layer.
struct LstmCellCache {
    Vec x, h_prev, c_prev;
    Vec gate_i, gate_f, gate_g, gate_o;
    Vec c_new, tanh_c;
};

inline void lstm_cell_forward(const LstmLayerParams& layer, const Vec& x,
                              const Vec& h_prev, const Vec& c_prev, Vec& h_out,
                              Vec& c_out, LstmCellCache* cache) {
    const Eigen::Index hidden = h_prev.size();
    Vec pre = layer.w_in * x + layer.w_rec * h_prev + layer.bias.col(0);
    Vec i = pre.segment(0, hidden).unaryExpr([](double v) { return sigmoid(v); });
    Vec f = pre.segment(hidden, hidden).unaryExpr([](double v) { return sigmoid(v); });
    Vec g = pre.segment(2 * hidden, hidden).array().tanh();
    Vec o = pre.segment(3 * hidden, hidden).unaryExpr([](double v) { return sigmoid(v); });
    Vec c_new = f.cwiseProduct(c_prev) + i.cwiseProduct(g);
    Vec tanh_c = c_new.array().tanh();
    h_out = o.cwiseProduct(tanh_c);
    c_out = c_new;
    if (cache) {
        cache->x = x;
        cache->h_prev = h_prev;
        cache->c_prev = c_prev;
        cache->gate_i = std::move(i);
        cache->gate_f = std::move(f);
        cache->gate_g = std::move(g);
        cache->gate_o = std::move(o);
        cache->c_new = std::move(c_new);
        cache->tanh_c = std::move(tanh_c);
    }
}

}  // namespace detail_policy

// Fuses the query pair into h0 = tanh(W0 [x_k || x_q] + b0) and seeds both
// the hidden and the cell state of every LSTM layer with it.
inline RetrieverState encode_query(const PolicyParameters& p, const Vec& x_k,
                                   const Vec& x_q, int bank_size) {
    if (x_k.size() != p.embedding_dim || x_q.size() != p.embedding_dim)
        throw ContractViolation("encode_query: embedding dim mismatch");
    Vec z(2 * p.embedding_dim);
    z << x_k, x_q;
    Vec h0 = (p.fuse_w * z + p.fuse_b.col(0)).array().tanh();

    RetrieverState s;
    s.h.assign(p.num_layers, h0);
    s.c.assign(p.num_layers, h0);
    s.mask.assign(bank_size, 0);
    return s;
}

// Consumes the chosen demonstration's embedding through the LSTM stack and
// masks the demonstration for the rest of the episode.
inline void advance_state(RetrieverState& s, const PolicyParameters& p, const Mat& bank,
                          int demo_index,
                          std::vector<detail_policy::LstmCellCache>* caches = nullptr) {
    if (demo_index < 0 || demo_index >= static_cast<int>(s.mask.size()))
        throw ContractViolation("advance_state: demo index out of range");
    if (s.mask[demo_index])
        throw ContractViolation("advance_state: demonstration " +
                                std::to_string(demo_index) + " was already selected");
    if (caches) caches->resize(p.num_layers);

    Vec x = bank.col(demo_index);
    for (int l = 0; l < p.num_layers; ++l) {
        Vec h_new, c_new;
        detail_policy::lstm_cell_forward(p.lstm[l], x, s.h[l], s.c[l], h_new, c_new,
                                         caches ? &(*caches)[l] : nullptr);
        s.h[l] = h_new;
        s.c[l] = c_new;
        x = s.h[l];
    }
    s.selected.push_back(demo_index);
    s.mask[demo_index] = 1;
}

// ---------------------------------------------------------------------------
// Action scoring
// ---------------------------------------------------------------------------

// Scores over the bank plus the stop action (index bank_size). Masked
// entries carry probability exactly 0 and -inf logits.
struct ActionDistribution {
    Vec logits;
    Vec probs;
    Vec log_probs;
    std::vector<char> masked;

    int stop_index() const { return static_cast<int>(logits.size()) - 1; }
    double entropy() const {
        double h = 0;
        for (Eigen::Index j = 0; j < probs.size(); ++j)
            if (!masked[j] && probs(j) > 0) h -= probs(j) * log_probs(j);
        return h;
    }
};

inline ActionDistribution score_actions(const RetrieverState& s,
                                        const PolicyParameters& p, const Mat& bank,
                                        bool include_stop = true) {
    const int n = static_cast<int>(bank.cols());
    if (n == 0) throw ContractViolation("score_actions: empty demonstration bank");
    if (static_cast<int>(s.mask.size()) != n)
        throw ContractViolation("score_actions: mask/bank size mismatch");

    ActionDistribution dist;
    dist.masked.assign(n + 1, 0);
    dist.logits.resize(n + 1);

    const Vec w = p.action_w.transpose() * s.top_hidden();  // D
    dist.logits.head(n) = bank.transpose() * w;
    dist.logits(n) = p.stop_embedding.col(0).dot(w);

    for (int j = 0; j < n; ++j) dist.masked[j] = s.mask[j];
    if (!include_stop) dist.masked[n] = 1;

    const double neg_inf = -std::numeric_limits<double>::infinity();
    double max_logit = neg_inf;
    for (int j = 0; j <= n; ++j)
        if (!dist.masked[j]) max_logit = std::max(max_logit, dist.logits(j));
    if (max_logit == neg_inf)
        throw ContractViolation("score_actions: every action is masked");

    dist.probs.setZero(n + 1);
    dist.log_probs.setConstant(n + 1, neg_inf);
    double z = 0;
    for (int j = 0; j <= n; ++j) {
        if (dist.masked[j]) {
            dist.logits(j) = neg_inf;
            continue;
        }
        z += std::exp(dist.logits(j) - max_logit);
    }
    const double log_z = std::log(z);
    for (int j = 0; j <= n; ++j) {
        if (dist.masked[j]) continue;
        dist.log_probs(j) = dist.logits(j) - max_logit - log_z;
        dist.probs(j) = std::exp(dist.log_probs(j));
    }
    return dist;
}

enum class SelectionMode { Greedy, Sample };

// Greedy takes the argmax (ties to the lowest index); sample draws from the
// categorical distribution.
inline int select_action(const ActionDistribution& dist, SelectionMode mode, Rng& rng) {
    const int n = static_cast<int>(dist.probs.size());
    if (mode == SelectionMode::Greedy) {
        int best = -1;
        for (int j = 0; j < n; ++j) {
            if (dist.masked[j]) continue;
            if (best < 0 || dist.probs(j) > dist.probs(best)) best = j;
        }
        return best;
    }
    const double u = rng.uniform();
    double cum = 0;
    int last_unmasked = -1;
    for (int j = 0; j < n; ++j) {
        if (dist.masked[j]) continue;
        last_unmasked = j;
        cum += dist.probs(j);
        if (u < cum) return j;
    }
    return last_unmasked;  // u landed in the tail fp residue
}

inline double value_estimate(const RetrieverState& s, const PolicyParameters& p) {
    return p.value_w.col(0).dot(s.top_hidden()) + p.value_b(0, 0);
}

// ---------------------------------------------------------------------------
// Episode tape: forward with recorded intermediates, exact backward
// ---------------------------------------------------------------------------

// Loss gradient seeds for one decision step: coefficients on the chosen
// action's log-probability, the value estimate, and the policy entropy.
struct StepOutputGrads {
    double d_log_prob = 0;
    double d_value = 0;
    double d_entropy = 0;
};

inline constexpr int kStopActionIndex = -1;  // exported action id for "stop"

// One episode's forward trace. Drives the same encode/advance/score
// primitives the live engine uses, so replayed log-probabilities are
// bit-identical to collection time, and keeps every intermediate needed for
// the exact reverse pass.
class EpisodeTape {
  public:
    struct Step {
        ActionDistribution dist;
        Vec h_top;       // scoring state of this decision
        int action = 0;  // index into dist (bank entry or stop slot)
        double log_prob = 0;
        double value = 0;
        double entropy = 0;
    };

    EpisodeTape(const PolicyParameters& params, Vec x_k, Vec x_q, const Mat& bank,
                bool include_stop)
        : params_(&params), bank_(&bank), include_stop_(include_stop),
          x_k_(std::move(x_k)), x_q_(std::move(x_q)) {
        state_ = encode_query(params, x_k_, x_q_, static_cast<int>(bank.cols()));
        z_.resize(2 * params.embedding_dim);
        z_ << x_k_, x_q_;
        h0_ = state_.h[0];
        refresh_dist();
    }

    const ActionDistribution& current_dist() const { return dist_; }
    bool done() const { return done_; }
    int bank_size() const { return static_cast<int>(bank_->cols()); }
    int stop_slot() const { return bank_size(); }
    bool stop_available() const { return include_stop_; }
    int num_selected() const { return static_cast<int>(state_.selected.size()); }

    // Takes an action at the current decision point. `action` is a bank
    // index or kStopActionIndex.
    const Step& take(int action) {
        if (done_) throw ContractViolation("EpisodeTape: episode already ended");
        const int slot = action == kStopActionIndex ? stop_slot() : action;
        if (slot < 0 || slot > stop_slot() || dist_.masked[slot])
            throw ContractViolation("EpisodeTape: action " + std::to_string(action) +
                                    " is unavailable");
        Step step;
        step.dist = dist_;
        step.h_top = state_.top_hidden();
        step.action = slot;
        step.log_prob = dist_.log_probs(slot);
        step.value = value_estimate(state_, *params_);
        step.entropy = dist_.entropy();
        steps_.push_back(std::move(step));

        if (slot == stop_slot()) {
            done_ = true;
        } else {
            consumption_caches_.emplace_back();
            advance_state(state_, *params_, *bank_, slot, &consumption_caches_.back());
            if (num_unmasked_demos() == 0 && !include_stop_)
                done_ = true;
            else
                refresh_dist();
        }
        return steps_.back();
    }

    int num_steps() const { return static_cast<int>(steps_.size()); }
    const Step& step(int t) const { return steps_.at(static_cast<std::size_t>(t)); }

    // Exact reverse-mode gradients of sum_t(g_t . outputs_t) with the action
    // sequence held fixed. Masked logits receive zero gradient.
    PolicyParameters backward(std::span<const StepOutputGrads> grads) const {
        if (static_cast<int>(grads.size()) != num_steps())
            throw ContractViolation("EpisodeTape::backward: need one grad per step");
        const PolicyParameters& p = *params_;
        PolicyParameters g = zeros_like(p);

        std::vector<Vec> dh(p.num_layers, Vec::Zero(p.hidden_dim));
        std::vector<Vec> dc(p.num_layers, Vec::Zero(p.hidden_dim));

        const int decisions = num_steps();
        const int consumptions = static_cast<int>(consumption_caches_.size());
        for (int u = consumptions; u >= 1; --u) {
            if (u + 1 <= decisions)
                apply_decision_grads(steps_[u], grads[u], g, dh[p.num_layers - 1]);
            backward_consumption(u - 1, g, dh, dc);
        }
        if (decisions > 0) apply_decision_grads(steps_[0], grads[0], g, dh[p.num_layers - 1]);

        Vec dh0 = Vec::Zero(p.hidden_dim);
        for (int l = 0; l < p.num_layers; ++l) dh0 += dh[l] + dc[l];
        const Vec dpre = dh0.cwiseProduct(Vec::Ones(p.hidden_dim) - h0_.cwiseProduct(h0_));
        g.fuse_w += dpre * z_.transpose();
        g.fuse_b.col(0) += dpre;

        check_finite(g, "EpisodeTape::backward");
        return g;
    }

  private:
    int num_unmasked_demos() const {
        int n = 0;
        for (char m : state_.mask) n += m == 0;
        return n;
    }

    void refresh_dist() { dist_ = score_actions(state_, *params_, *bank_, include_stop_); }

    void apply_decision_grads(const Step& step, const StepOutputGrads& sg,
                              PolicyParameters& g, Vec& dh_top) const {
        const PolicyParameters& p = *params_;
        const int n = bank_size();
        const ActionDistribution& dist = step.dist;

        Vec dlogit = Vec::Zero(n + 1);
        if (sg.d_log_prob != 0) {
            for (int j = 0; j <= n; ++j)
                if (!dist.masked[j]) dlogit(j) -= sg.d_log_prob * dist.probs(j);
            dlogit(step.action) += sg.d_log_prob;
        }
        if (sg.d_entropy != 0) {
            const double h = step.entropy;
            for (int j = 0; j <= n; ++j) {
                if (dist.masked[j] || dist.probs(j) <= 0) continue;
                dlogit(j) -= sg.d_entropy * dist.probs(j) * (dist.log_probs(j) + h);
            }
        }

        if (sg.d_log_prob != 0 || sg.d_entropy != 0) {
            const Vec w_sum =
                bank_->operator*(dlogit.head(n)) + p.stop_embedding.col(0) * dlogit(n);
            g.action_w += step.h_top * w_sum.transpose();
            dh_top += p.action_w * w_sum;
            g.stop_embedding.col(0) +=
                dlogit(n) * (p.action_w.transpose() * step.h_top);
        }
        if (sg.d_value != 0) {
            dh_top += sg.d_value * p.value_w.col(0);
            g.value_w.col(0) += sg.d_value * step.h_top;
            g.value_b(0, 0) += sg.d_value;
        }
    }

    void backward_consumption(int u, PolicyParameters& g, std::vector<Vec>& dh,
                              std::vector<Vec>& dc) const {
        const PolicyParameters& p = *params_;
        const auto& caches = consumption_caches_[static_cast<std::size_t>(u)];
        const Eigen::Index hidden = p.hidden_dim;

        for (int l = p.num_layers - 1; l >= 0; --l) {
            const auto& cc = caches[static_cast<std::size_t>(l)];
            const Vec do_gate = dh[l].cwiseProduct(cc.tanh_c);
            const Vec dc_total =
                dc[l] + dh[l].cwiseProduct(cc.gate_o).cwiseProduct(
                            (1.0 - cc.tanh_c.array().square()).matrix());
            const Vec di = dc_total.cwiseProduct(cc.gate_g);
            const Vec df = dc_total.cwiseProduct(cc.c_prev);
            const Vec dg = dc_total.cwiseProduct(cc.gate_i);

            Vec da(4 * hidden);
            da.segment(0, hidden) =
                di.cwiseProduct(cc.gate_i)
                    .cwiseProduct((1.0 - cc.gate_i.array()).matrix());
            da.segment(hidden, hidden) =
                df.cwiseProduct(cc.gate_f)
                    .cwiseProduct((1.0 - cc.gate_f.array()).matrix());
            da.segment(2 * hidden, hidden) =
                dg.cwiseProduct((1.0 - cc.gate_g.array().square()).matrix());
            da.segment(3 * hidden, hidden) =
                do_gate.cwiseProduct(cc.gate_o)
                    .cwiseProduct((1.0 - cc.gate_o.array()).matrix());

            g.lstm[l].w_in += da * cc.x.transpose();
            g.lstm[l].w_rec += da * cc.h_prev.transpose();
            g.lstm[l].bias.col(0) += da;

            dh[l] = p.lstm[l].w_rec.transpose() * da;
            dc[l] = dc_total.cwiseProduct(cc.gate_f);
            if (l > 0) dh[l - 1] += p.lstm[l].w_in.transpose() * da;
        }
    }

    const PolicyParameters* params_;
    const Mat* bank_;
    bool include_stop_;
    Vec x_k_, x_q_, z_, h0_;
    RetrieverState state_;
    ActionDistribution dist_;
    bool done_ = false;
    std::vector<Step> steps_;
    std::vector<std::vector<detail_policy::LstmCellCache>> consumption_caches_;
};

// Replays a recorded action sequence under (possibly updated) parameters.
inline EpisodeTape replay_episode(const PolicyParameters& params, const Vec& x_k,
                                  const Vec& x_q, const Mat& bank, bool include_stop,
                                  std::span<const int> actions) {
    EpisodeTape tape(params, x_k, x_q, bank, include_stop);
    for (int a : actions) tape.take(a);
    return tape;
}

// ---------------------------------------------------------------------------
// Serialization: versioned binary tensor container with checksum
// ---------------------------------------------------------------------------

namespace detail_policy {

inline constexpr char kContainerMagic[4] = {'K', 'T', 'P', 'F'};
inline constexpr std::uint32_t kContainerVersion = 1;

inline void append_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t read_u32(const std::string& in, std::size_t& pos) {
    if (pos + 4 > in.size()) throw FormatError("tensor container truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= std::uint32_t(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    pos += 4;
    return v;
}

inline void append_str(std::string& out, std::string_view s) {
    append_u32(out, static_cast<std::uint32_t>(s.size()));
    out.append(s);
}

inline std::string read_str(const std::string& in, std::size_t& pos) {
    const std::uint32_t len = read_u32(in, pos);
    if (pos + len > in.size()) throw FormatError("tensor container truncated");
    std::string s = in.substr(pos, len);
    pos += len;
    return s;
}

}  // namespace detail_policy

inline void save_tensor_container(const std::filesystem::path& path,
                                  const std::map<std::string, std::string>& meta,
                                  const std::vector<std::pair<std::string, const Mat*>>& tensors) {
    using namespace detail_policy;
    std::string out(kContainerMagic, 4);
    append_u32(out, kContainerVersion);
    append_u32(out, static_cast<std::uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
        append_str(out, k);
        append_str(out, v);
    }
    append_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, mat] : tensors) {
        append_str(out, name);
        append_u32(out, static_cast<std::uint32_t>(mat->rows()));
        append_u32(out, static_cast<std::uint32_t>(mat->cols()));
        out.append(reinterpret_cast<const char*>(mat->data()),
                   static_cast<std::size_t>(mat->size()) * sizeof(double));
    }
    out += detail::sha256_hex(out);
    detail::atomic_write_file(path, out);
}

struct TensorContainer {
    std::map<std::string, std::string> meta;
    std::map<std::string, Mat> tensors;
};

inline TensorContainer load_tensor_container(const std::filesystem::path& path) {
    using namespace detail_policy;
    const std::string in = detail::read_file(path);
    if (in.size() < 72 || in.compare(0, 4, kContainerMagic, 4) != 0)
        throw FormatError("not a tensor container: " + path.string());
    const std::string body = in.substr(0, in.size() - 64);
    if (detail::sha256_hex(body) != in.substr(in.size() - 64))
        throw FormatError("tensor container checksum mismatch: " + path.string());

    std::size_t pos = 4;
    if (read_u32(in, pos) != kContainerVersion)
        throw FormatError("unsupported tensor container version: " + path.string());

    TensorContainer c;
    const std::uint32_t n_meta = read_u32(in, pos);
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        std::string k = read_str(in, pos);
        c.meta[k] = read_str(in, pos);
    }
    const std::uint32_t n_tensors = read_u32(in, pos);
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        std::string name = read_str(in, pos);
        const std::uint32_t rows = read_u32(in, pos);
        const std::uint32_t cols = read_u32(in, pos);
        const std::size_t bytes = std::size_t{rows} * cols * sizeof(double);
        if (pos + bytes > body.size()) throw FormatError("tensor container truncated");
        Mat m(rows, cols);
        std::memcpy(m.data(), in.data() + pos, bytes);
        pos += bytes;
        c.tensors.emplace(std::move(name), std::move(m));
    }
    return c;
}

inline void save_params(const PolicyParameters& p, const std::filesystem::path& path,
                        const std::string& config_digest = {}) {
    std::map<std::string, std::string> meta{
        {"kind", "policy_parameters"},
        {"embedding_dim", std::to_string(p.embedding_dim)},
        {"hidden_dim", std::to_string(p.hidden_dim)},
        {"num_layers", std::to_string(p.num_layers)},
        {"config_digest", config_digest}};
    save_tensor_container(path, meta, tensor_list(p));
}

inline PolicyParameters params_from_container(const TensorContainer& c) {
    try {
        PolicyParameters p = init_params(std::stoi(c.meta.at("embedding_dim")),
                                         std::stoi(c.meta.at("hidden_dim")),
                                         std::stoi(c.meta.at("num_layers")), 0);
        for (auto& [name, mat] : tensor_list(p)) {
            auto it = c.tensors.find(name);
            if (it == c.tensors.end())
                throw FormatError("parameter file is missing tensor " + name);
            if (it->second.rows() != mat->rows() || it->second.cols() != mat->cols())
                throw FormatError("tensor " + name + " has shape " +
                                  std::to_string(it->second.rows()) + "x" +
                                  std::to_string(it->second.cols()) + ", expected " +
                                  std::to_string(mat->rows()) + "x" +
                                  std::to_string(mat->cols()));
            *mat = it->second;
        }
        return p;
    } catch (const std::out_of_range&) {
        throw FormatError("parameter file lacks dimension metadata");
    } catch (const std::invalid_argument&) {
        throw FormatError("parameter file has malformed dimension metadata");
    }
}

struct LoadedParams {
    PolicyParameters params;
    std::string config_digest;
};

inline LoadedParams load_params(const std::filesystem::path& path) {
    const TensorContainer c = load_tensor_container(path);
    if (auto it = c.meta.find("kind");
        it == c.meta.end() || it->second != "policy_parameters")
        throw FormatError("not a policy parameter file: " + path.string());
    LoadedParams out{params_from_container(c), {}};
    if (auto it = c.meta.find("config_digest"); it != c.meta.end())
        out.config_digest = it->second;
    return out;
}

}  // namespace kctag
