#pragma once

// Q-learning on top of the network: epsilon-greedy behavior policy,
// double-DQN targets with terminal masking, the intermediate Q-value loss
// over every valid window position, Adam, and target-network sync.

#include "dtqn/common.hpp"
#include "dtqn/model.hpp"
#include "dtqn/replay.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace dtqn {

struct Hyperparams {
    double lr = 3e-4;
    int batch_size = 32;
    int64_t buffer_capacity = 500000;
    int64_t target_update_period = 10000;
    int context_len = 50;
    int64_t total_steps = 2000000;
    int64_t prefill = 50000;
    double eps_start = 1.0;
    double eps_end = 0.1;
    double eps_anneal_fraction = 0.10;
    double gamma = 0.99;
    bool intermediate_q = true;
    // Appendix-style double-DQN action selection; switching this off
    // reproduces the plain max-over-target-network target.
    bool double_dqn = true;
    double grad_clip = 0.0;  // 0 disables

    void validate() const {
        if (lr <= 0 || batch_size < 1 || buffer_capacity < 1 || target_update_period < 1 ||
            context_len < 1 || total_steps < 1 || prefill < 0)
            throw config_error("hyperparams: counts and rates must be positive");
        if (eps_end > eps_start || eps_start > 1.0 || eps_end < 0.0)
            throw config_error("hyperparams: need 0 <= eps_end <= eps_start <= 1");
        if (eps_anneal_fraction <= 0.0 || eps_anneal_fraction > 1.0)
            throw config_error("hyperparams: eps_anneal_fraction in (0, 1]");
        if (gamma < 0.0 || gamma >= 1.0) throw config_error("hyperparams: gamma in [0, 1)");
    }
};

// Linear from eps_start at step 0 to eps_end at anneal_fraction*total_steps,
// constant afterwards.
inline double epsilon(const Hyperparams& h, int64_t step) {
    if (step < 0) throw contract_error("epsilon: negative step");
    const double anneal = h.eps_anneal_fraction * static_cast<double>(h.total_steps);
    if (static_cast<double>(step) >= anneal) return h.eps_end;
    return h.eps_start + (h.eps_end - h.eps_start) * (static_cast<double>(step) / anneal);
}

// Lowest-index argmax, fixed for reproducibility.
template <typename T>
int argmax_row(const RowX<T>& q) {
    int best = 0;
    for (int a = 1; a < q.cols(); ++a)
        if (q(a) > q(best)) best = a;
    return best;
}

// Builds the k-row model window from the most recent observations:
// history tail in rows 0..m-1, zero padding after. Returns the number of
// valid rows through last_valid.
template <typename T>
MatX<T> history_window(const std::vector<Observation>& history, int k, int features,
                       int* last_valid) {
    if (history.empty()) throw contract_error("history_window: empty history");
    const int m = static_cast<int>(std::min<size_t>(history.size(), static_cast<size_t>(k)));
    MatX<T> window = MatX<T>::Zero(k, features);
    const size_t first = history.size() - static_cast<size_t>(m);
    for (int i = 0; i < m; ++i) {
        const Observation& o = history[first + static_cast<size_t>(i)];
        for (int f = 0; f < features; ++f) window(i, f) = static_cast<T>(o[static_cast<size_t>(f)]);
    }
    if (last_valid) *last_valid = m - 1;
    return window;
}

template <typename T>
int greedy_action(const Model<T>& m, const std::vector<Observation>& history) {
    int last = 0;
    MatX<T> window =
        history_window<T>(history, m.config().context_len, m.config().obs.features(), &last);
    QOutput<T> out = dtqn_forward(m, window);
    RowX<T> q = q_last(out, last);
    return argmax_row<T>(q);
}

template <typename T>
int select_action(const Model<T>& m, const std::vector<Observation>& history, int64_t step,
                  Rng& rng, const Hyperparams& h) {
    const double eps = epsilon(h, step);
    if (rng.uniform_real() < eps) return rng.uniform_int(m.config().action_count);
    return greedy_action(m, history);
}

// Reusable buffers for td_targets; optional, avoids reallocation in the
// training loop.
template <typename T>
struct TdWork {
    ForwardTrace<T> trace;
    MatX<T> next, q_target_next, q_online_next;
};

// Per valid position i of each window: r_i if done, else
// r_i + gamma * Q_target(next window, a*) with a* from the online network
// (double DQN) or the target network's own max. Padded positions get 0.
// Targets are constants; no gradient flows through them.
template <typename T>
std::vector<T> td_targets(const ContextBatch& batch, const Model<T>& online,
                          const Model<T>& target, const Hyperparams& h,
                          TdWork<T>* work = nullptr) {
    const int n = batch.batch * batch.k;
    TdWork<T> local;
    TdWork<T>& w = work ? *work : local;
    w.next = batch.next_obs.template cast<T>();
    MatX<T>&q_target_next = w.q_target_next, &q_online_next = w.q_online_next;
    target.forward(w.next, batch.batch, w.trace, q_target_next);
    if (h.double_dqn) online.forward(w.next, batch.batch, w.trace, q_online_next);

    std::vector<T> out(static_cast<size_t>(n), T(0));
    for (int i = 0; i < n; ++i) {
        if (!batch.valid[static_cast<size_t>(i)]) continue;
        const T r = static_cast<T>(batch.rewards[static_cast<size_t>(i)]);
        if (batch.dones[static_cast<size_t>(i)]) {
            out[static_cast<size_t>(i)] = r;
            continue;
        }
        int a;
        if (h.double_dqn) {
            RowX<T> row = q_online_next.row(i);
            a = argmax_row<T>(row);
        } else {
            RowX<T> row = q_target_next.row(i);
            a = argmax_row<T>(row);
        }
        out[static_cast<size_t>(i)] = r + static_cast<T>(h.gamma) * q_target_next(i, a);
    }
    return out;
}

// Mean squared error between targets and the Q-values of the taken actions
// over masked positions. Fills dq (same shape as q) with the gradient when
// requested.
template <typename T>
double intermediate_q_loss(const MatX<T>& q, const std::vector<T>& targets,
                           const std::vector<int>& actions, const std::vector<uint8_t>& mask,
                           MatX<T>* dq = nullptr) {
    const int n = static_cast<int>(q.rows());
    if (static_cast<int>(targets.size()) != n || static_cast<int>(actions.size()) != n ||
        static_cast<int>(mask.size()) != n)
        throw config_error("intermediate_q_loss: shape mismatch");
    int valid = 0;
    for (uint8_t v : mask) valid += v ? 1 : 0;
    if (valid == 0) throw contract_error("intermediate_q_loss: no valid positions");
    if (dq) dq->setZero(q.rows(), q.cols());

    double loss = 0.0;
    const double inv = 1.0 / valid;
    for (int i = 0; i < n; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        const int a = actions[static_cast<size_t>(i)];
        const double diff = static_cast<double>(q(i, a)) -
                            static_cast<double>(targets[static_cast<size_t>(i)]);
        loss += diff * diff * inv;
        if (dq) (*dq)(i, a) = static_cast<T>(2.0 * diff * inv);
    }
    return loss;
}

// Training mask: all valid positions, or only each window's last valid
// position when intermediate Q-value prediction is disabled.
inline std::vector<uint8_t> loss_mask(const ContextBatch& batch, bool intermediate_q) {
    if (intermediate_q) return batch.valid;
    std::vector<uint8_t> mask(batch.valid.size(), 0);
    for (int b = 0; b < batch.batch; ++b) {
        int last = -1;
        for (int i = 0; i < batch.k; ++i)
            if (batch.valid[static_cast<size_t>(batch.at(b, i))]) last = i;
        if (last >= 0) mask[static_cast<size_t>(batch.at(b, last))] = 1;
    }
    return mask;
}

template <typename T>
struct AdamState {
    Model<T> m, v;
    int64_t t = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    explicit AdamState(const Model<T>& model) : m(zeros_like(model)), v(zeros_like(model)) {}
};

template <typename T>
void optimize_step(Model<T>& params, Model<T>& grads, AdamState<T>& adam, double lr) {
    auto prefs = params.param_refs();
    auto grefs = grads.param_refs();
    auto mrefs = adam.m.param_refs();
    auto vrefs = adam.v.param_refs();
    adam.t += 1;
    const double bc1 = 1.0 - std::pow(adam.beta1, static_cast<double>(adam.t));
    const double bc2 = 1.0 - std::pow(adam.beta2, static_cast<double>(adam.t));
    for (size_t i = 0; i < prefs.size(); ++i) {
        MatX<T>& p = *prefs[i].second;
        MatX<T>& g = *grefs[i].second;
        MatX<T>& m = *mrefs[i].second;
        MatX<T>& v = *vrefs[i].second;
        if (!g.allFinite())
            throw diagnostic_error("optimize_step: non-finite gradient in block " +
                                   prefs[i].first);
        m = static_cast<T>(adam.beta1) * m + static_cast<T>(1.0 - adam.beta1) * g;
        v = (static_cast<T>(adam.beta2) * v.array() +
             static_cast<T>(1.0 - adam.beta2) * g.array().square())
                .matrix();
        p.array() -= static_cast<T>(lr) * (m.array() / static_cast<T>(bc1)) /
                     ((v.array() / static_cast<T>(bc2)).sqrt() + static_cast<T>(adam.eps));
    }
}

// Global L2-norm gradient clip; no-op when max_norm <= 0.
template <typename T>
void clip_gradients(Model<T>& grads, double max_norm) {
    if (max_norm <= 0) return;
    double sq = 0.0;
    auto refs = grads.param_refs();
    for (auto& [name, g] : refs) sq += static_cast<double>(g->squaredNorm());
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const T scale = static_cast<T>(max_norm / norm);
    for (auto& [name, g] : refs) *g *= scale;
}

// Bit-exact parameter copy; the stores must be congruent.
template <typename T>
void sync_target(Model<T>& online, Model<T>& target) {
    auto src = online.param_refs();
    auto dst = target.param_refs();
    if (src.size() != dst.size()) throw config_error("sync_target: block count mismatch");
    for (size_t i = 0; i < src.size(); ++i) {
        if (src[i].second->rows() != dst[i].second->rows() ||
            src[i].second->cols() != dst[i].second->cols())
            throw config_error("sync_target: shape mismatch at " + src[i].first);
        *dst[i].second = *src[i].second;
    }
}

}  // namespace dtqn
