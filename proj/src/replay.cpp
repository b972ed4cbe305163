#include "dtqn/replay.hpp"

#include <algorithm>

namespace dtqn {

ReplayBuffer::ReplayBuffer(int64_t capacity_steps, int obs_features)
    : capacity_(capacity_steps), features_(obs_features) {
    if (capacity_ < 1) throw config_error("replay: capacity must be >= 1");
    if (features_ < 1) throw config_error("replay: need >= 1 observation feature");
}

void ReplayBuffer::record(const Transition& t) {
    if (static_cast<int>(t.obs.size()) != features_ ||
        static_cast<int>(t.next_obs.size()) != features_)
        throw config_error("replay: transition feature width mismatch");
    if (live_.actions.empty()) {
        live_.obs.assign(t.obs.begin(), t.obs.end());
        live_.terminated = false;
    }
    live_.actions.push_back(t.action);
    live_.rewards.push_back(t.reward);
    live_.obs.insert(live_.obs.end(), t.next_obs.begin(), t.next_obs.end());
    if (t.done) {
        live_.terminated = true;
        sealed_steps_ += live_.len();
        episodes_.push_back(std::move(live_));
        live_ = Episode{};
    }
    evict_to_capacity();
}

void ReplayBuffer::evict_to_capacity() {
    while (size_steps() > capacity_ && !episodes_.empty()) {
        sealed_steps_ -= episodes_.front().len();
        episodes_.pop_front();
    }
}

void ReplayBuffer::abandon_live() { live_ = Episode{}; }

ContextBatch ReplayBuffer::sample_context_batch(int k, int batch, Rng& rng) const {
    if (k < 1 || batch < 1) throw config_error("replay: k and batch must be >= 1");
    if (episodes_.empty())
        throw not_ready_error("replay: no sealed episodes to sample from");

    ContextBatch out;
    out.batch = batch;
    out.k = k;
    out.features = features_;
    out.obs.setZero(static_cast<Eigen::Index>(batch) * k, features_);
    out.next_obs.setZero(static_cast<Eigen::Index>(batch) * k, features_);
    out.actions.assign(static_cast<size_t>(batch) * k, 0);
    out.rewards.assign(static_cast<size_t>(batch) * k, 0.0f);
    out.dones.assign(static_cast<size_t>(batch) * k, 0);
    out.valid.assign(static_cast<size_t>(batch) * k, 0);

    for (int b = 0; b < batch; ++b) {
        const Episode& ep =
            episodes_[static_cast<size_t>(rng.uniform_int(static_cast<int>(episodes_.size())))];
        const int len = static_cast<int>(ep.len());
        // uniform over [0, max(1, len-1)): full-length windows can start
        // anywhere except the very last step (a 1-step window) unless the
        // episode has only one step
        const int start = rng.uniform_int(std::max(1, len - 1));
        const int valid_len = std::min(k, len - start);
        for (int i = 0; i < valid_len; ++i) {
            const int idx = out.at(b, i);
            const int step = start + i;
            for (int f = 0; f < features_; ++f) {
                out.obs(idx, f) = ep.obs[static_cast<size_t>(step) * features_ + f];
                out.next_obs(idx, f) = ep.obs[static_cast<size_t>(step + 1) * features_ + f];
            }
            out.actions[static_cast<size_t>(idx)] = ep.actions[static_cast<size_t>(step)];
            out.rewards[static_cast<size_t>(idx)] = ep.rewards[static_cast<size_t>(step)];
            out.valid[static_cast<size_t>(idx)] = 1;
            if (step == len - 1 && ep.terminated)
                out.dones[static_cast<size_t>(idx)] = 1;
        }
    }
    return out;
}

void ReplayBuffer::save(std::ostream& os) const {
    os << capacity_ << " " << features_ << " " << episodes_.size() << "\n";
    auto write_episode = [&](const Episode& ep) {
        os << ep.actions.size() << " " << ep.terminated << "\n";
        os.precision(9);
        for (float v : ep.obs) os << v << " ";
        os << "\n";
        for (int a : ep.actions) os << a << " ";
        os << "\n";
        for (float r : ep.rewards) os << r << " ";
        os << "\n";
    };
    for (const Episode& ep : episodes_) write_episode(ep);
    write_episode(live_);
}

void ReplayBuffer::load(std::istream& is) {
    size_t n_episodes = 0;
    is >> capacity_ >> features_ >> n_episodes;
    episodes_.clear();
    sealed_steps_ = 0;
    auto read_episode = [&](Episode& ep) {
        size_t len = 0;
        is >> len >> ep.terminated;
        ep.obs.resize((len ? len + 1 : 0) * static_cast<size_t>(features_));
        ep.actions.resize(len);
        ep.rewards.resize(len);
        for (float& v : ep.obs) is >> v;
        for (int& a : ep.actions) is >> a;
        for (float& r : ep.rewards) is >> r;
    };
    for (size_t i = 0; i < n_episodes; ++i) {
        Episode ep;
        read_episode(ep);
        sealed_steps_ += ep.len();
        episodes_.push_back(std::move(ep));
    }
    read_episode(live_);
}

void prefill_random(Env& env, ReplayBuffer& buffer, int64_t n_steps, Rng& rng,
                    std::vector<Observation>* live_out) {
    if (n_steps < 1) throw config_error("prefill: n_steps must be >= 1");
    std::vector<Observation> history;
    Observation obs = env.reset(rng);
    history.push_back(obs);
    for (int64_t i = 0; i < n_steps; ++i) {
        const int action = rng.uniform_int(env.action_count());
        StepResult r = env.step(action, rng);
        buffer.record({obs, action, r.reward, r.obs, r.done});
        if (r.done) {
            obs = env.reset(rng);
            history.clear();
        } else {
            obs = r.obs;
        }
        history.push_back(obs);
    }
    if (live_out) *live_out = std::move(history);
}

}  // namespace dtqn
