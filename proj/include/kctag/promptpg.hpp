#pragma once

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "kctag/errors.hpp"
#include "kctag/policy_network.hpp"
#include "kctag/rng.hpp"

namespace kctag {

// The one-shot selection baseline's scorer: a single hidden layer mapping
// [x_k || x_q || x_e] to a scalar per candidate. No recurrence and no stop
// action; a fixed number of demonstrations is drawn from the softmax over
// scores without replacement.
struct PromptPgParams {
    int embedding_dim = 0;
    int hidden_dim = 0;
    Mat w1;  // m x 3D
    Mat b1;  // m x 1
    Mat w2;  // 1 x m
    Mat b2;  // 1 x 1
};

inline std::vector<std::pair<std::string, Mat*>> tensor_list(PromptPgParams& p) {
    return {{"w1", &p.w1}, {"b1", &p.b1}, {"w2", &p.w2}, {"b2", &p.b2}};
}

inline std::vector<std::pair<std::string, const Mat*>> tensor_list(
    const PromptPgParams& p) {
    std::vector<std::pair<std::string, const Mat*>> out;
    for (auto& [name, mat] : tensor_list(const_cast<PromptPgParams&>(p)))
        out.emplace_back(name, mat);
    return out;
}

inline PromptPgParams zeros_like(const PromptPgParams& p) {
    PromptPgParams z = p;
    for (auto& [name, mat] : tensor_list(z)) mat->setZero();
    return z;
}

inline void check_finite(const PromptPgParams& p, const std::string& context) {
    for (const auto& [name, mat] : tensor_list(p))
        if (!mat->allFinite())
            throw DataError(context + ": tensor " + name + " contains non-finite values");
}

inline PromptPgParams init_promptpg(int embedding_dim, int hidden, std::uint64_t seed) {
    if (embedding_dim <= 0 || hidden <= 0)
        throw ContractViolation("init_promptpg: dims must be positive");
    PromptPgParams p;
    p.embedding_dim = embedding_dim;
    p.hidden_dim = hidden;
    p.w1.setZero(hidden, 3 * embedding_dim);
    p.b1.setZero(hidden, 1);
    p.w2.setZero(1, hidden);
    p.b2.setZero(1, 1);
    Rng rng(seed);
    auto fill = [&](Mat& m, int fan_in) {
        const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-s, s);
    };
    fill(p.w1, 3 * embedding_dim);
    fill(p.w2, hidden);
    return p;
}

// Forward trace of one selection episode: per-candidate hiddens and scores,
// plus the without-replacement softmax selections.
class PromptPgTape {
  public:
    PromptPgTape(const PromptPgParams& params, const Vec& x_k, const Vec& x_q,
                 const Mat& bank)
        : params_(&params), bank_(&bank) {
        const int n = static_cast<int>(bank.cols());
        if (n == 0) throw ContractViolation("PromptPgTape: empty bank");
        hidden_.resize(params.hidden_dim, n);
        scores_.resize(n);
        Vec z(3 * params.embedding_dim);
        z.head(2 * params.embedding_dim) << x_k, x_q;
        for (int j = 0; j < n; ++j) {
            z.tail(params.embedding_dim) = bank.col(j);
            hidden_.col(j) = (params.w1 * z + params.b1.col(0)).array().tanh();
            scores_(j) = params.w2.row(0).dot(hidden_.col(j)) + params.b2(0, 0);
        }
        z_head_ = z.head(2 * params.embedding_dim);
    }

    const Vec& scores() const { return scores_; }

    // Draws `shots` distinct demonstrations (softmax sampling or greedy) and
    // returns the total log-probability of the selection sequence.
    double select(int shots, SelectionMode mode, Rng& rng, std::vector<int>& actions) {
        actions.clear();
        const int n = static_cast<int>(scores_.size());
        if (shots > n)
            throw ContractViolation("PromptPgTape: cannot draw " + std::to_string(shots) +
                                    " of " + std::to_string(n) + " demonstrations");
        std::vector<char> taken(n, 0);
        double total_log_prob = 0;
        for (int s = 0; s < shots; ++s) {
            const Vec lp = masked_log_softmax(taken);
            int chosen = -1;
            if (mode == SelectionMode::Greedy) {
                for (int j = 0; j < n; ++j)
                    if (!taken[j] && (chosen < 0 || scores_(j) > scores_(chosen)))
                        chosen = j;
            } else {
                const double u = rng.uniform();
                double cum = 0;
                for (int j = 0; j < n; ++j) {
                    if (taken[j]) continue;
                    chosen = j;
                    cum += std::exp(lp(j));
                    if (u < cum) break;
                }
            }
            total_log_prob += lp(chosen);
            selection_steps_.push_back({taken, chosen});
            taken[chosen] = 1;
            actions.push_back(chosen);
        }
        return total_log_prob;
    }

    // Replays a recorded selection, returning its log-probability under the
    // current parameters.
    double replay(std::span<const int> actions) {
        std::vector<char> taken(scores_.size(), 0);
        double total = 0;
        for (int a : actions) {
            const Vec lp = masked_log_softmax(taken);
            total += lp(a);
            selection_steps_.push_back({taken, a});
            taken[a] = 1;
        }
        return total;
    }

    // Gradients of coeff * total_log_prob with the selection held fixed.
    PromptPgParams backward(double coeff) const {
        const PromptPgParams& p = *params_;
        PromptPgParams g = zeros_like(p);
        const int n = static_cast<int>(scores_.size());

        Vec dscore = Vec::Zero(n);
        for (const auto& step : selection_steps_) {
            std::vector<char> taken = step.first;
            const Vec lp = masked_log_softmax(taken);
            for (int j = 0; j < n; ++j)
                if (!taken[j]) dscore(j) -= coeff * std::exp(lp(j));
            dscore(step.second) += coeff;
        }

        Vec z(3 * p.embedding_dim);
        z.head(2 * p.embedding_dim) = z_head_;
        for (int j = 0; j < n; ++j) {
            if (dscore(j) == 0) continue;
            z.tail(p.embedding_dim) = bank_->col(j);
            const Vec h = hidden_.col(j);
            g.w2.row(0) += dscore(j) * h.transpose();
            g.b2(0, 0) += dscore(j);
            const Vec dh = dscore(j) * p.w2.row(0).transpose();
            const Vec dpre = dh.cwiseProduct((1.0 - h.array().square()).matrix());
            g.w1 += dpre * z.transpose();
            g.b1.col(0) += dpre;
        }
        return g;
    }

  private:
    Vec masked_log_softmax(const std::vector<char>& taken) const {
        const int n = static_cast<int>(scores_.size());
        double max_s = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j)
            if (!taken[j]) max_s = std::max(max_s, scores_(j));
        if (max_s == -std::numeric_limits<double>::infinity())
            throw ContractViolation("PromptPgTape: no candidates left");
        double z = 0;
        for (int j = 0; j < n; ++j)
            if (!taken[j]) z += std::exp(scores_(j) - max_s);
        const double log_z = std::log(z);
        Vec lp = Vec::Constant(n, -std::numeric_limits<double>::infinity());
        for (int j = 0; j < n; ++j)
            if (!taken[j]) lp(j) = scores_(j) - max_s - log_z;
        return lp;
    }

    const PromptPgParams* params_;
    const Mat* bank_;
    Mat hidden_;  // m x N
    Vec scores_;
    Vec z_head_;
    std::vector<std::pair<std::vector<char>, int>> selection_steps_;
};

inline void save_promptpg(const PromptPgParams& p, const std::filesystem::path& path,
                          const std::string& config_digest = {}) {
    std::map<std::string, std::string> meta{
        {"kind", "promptpg_parameters"},
        {"embedding_dim", std::to_string(p.embedding_dim)},
        {"hidden_dim", std::to_string(p.hidden_dim)},
        {"config_digest", config_digest}};
    save_tensor_container(path, meta, tensor_list(p));
}

inline PromptPgParams promptpg_from_container(const TensorContainer& c) {
    try {
        PromptPgParams p = init_promptpg(std::stoi(c.meta.at("embedding_dim")),
                                         std::stoi(c.meta.at("hidden_dim")), 0);
        for (auto& [name, mat] : tensor_list(p)) {
            auto it = c.tensors.find(name);
            if (it == c.tensors.end())
                throw FormatError("parameter file is missing tensor " + name);
            if (it->second.rows() != mat->rows() || it->second.cols() != mat->cols())
                throw FormatError("tensor " + name + " has unexpected shape");
            *mat = it->second;
        }
        return p;
    } catch (const std::out_of_range&) {
        throw FormatError("parameter file lacks dimension metadata");
    } catch (const std::invalid_argument&) {
        throw FormatError("parameter file has malformed dimension metadata");
    }
}

}  // namespace kctag
