#pragma once

// Episode-structured replay buffer. Whole episodes are stored so that
// sampled context windows never cross an episode boundary; the oldest
// episodes are evicted wholesale when the step count would exceed
// capacity. The in-progress episode is recorded but never sampled.

#include "dtqn/common.hpp"
#include "dtqn/env.hpp"

#include <deque>
#include <istream>
#include <ostream>
#include <vector>

namespace dtqn {

struct Transition {
    Observation obs;
    int action = 0;
    float reward = 0.0f;
    Observation next_obs;
    bool done = false;
};

// B stacked windows of length k. Row b occupies rows [b*k, (b+1)*k) of the
// obs blocks and the flat per-position arrays. valid is a per-row prefix
// mask; padded positions hold the all-zeros pad observation, action 0 and
// reward 0. next_obs is the same slice shifted one step.
struct ContextBatch {
    int batch = 0;
    int k = 0;
    int features = 0;
    MatX<float> obs;             // (B*k) x F
    MatX<float> next_obs;        // (B*k) x F
    std::vector<int> actions;    // B*k
    std::vector<float> rewards;  // B*k
    std::vector<uint8_t> dones;  // B*k
    std::vector<uint8_t> valid;  // B*k

    int at(int b, int i) const { return b * k + i; }
};

class ReplayBuffer {
public:
    ReplayBuffer(int64_t capacity_steps, int obs_features);

    void record(const Transition& t);
    ContextBatch sample_context_batch(int k, int batch, Rng& rng) const;

    int64_t size_steps() const { return sealed_steps_ + live_.len(); }
    int64_t sealed_steps() const { return sealed_steps_; }
    int sealed_episodes() const { return static_cast<int>(episodes_.size()); }
    int64_t capacity() const { return capacity_; }
    int features() const { return features_; }

    // Drops the unsealed in-progress episode (used when the actor's episode
    // stream is interrupted, e.g. between prefill and a fresh reset).
    void abandon_live();

    void save(std::ostream& os) const;
    void load(std::istream& is);

    struct Episode {
        std::vector<float> obs;  // (len+1) * F, includes the final next_obs
        std::vector<int> actions;
        std::vector<float> rewards;
        bool terminated = false;

        int64_t len() const { return static_cast<int64_t>(actions.size()); }
    };
    const std::deque<Episode>& sealed() const { return episodes_; }

private:
    void evict_to_capacity();

    int64_t capacity_;
    int features_;
    std::deque<Episode> episodes_;
    Episode live_;
    int64_t sealed_steps_ = 0;
};

// Runs a uniform-random policy for exactly n_steps transitions, resetting
// at episode end. If live_out is given, the environment is left mid-episode
// and the observations of the unfinished episode are returned so the caller
// can keep acting seamlessly; otherwise the unfinished tail stays recorded
// but unsealed.
void prefill_random(Env& env, ReplayBuffer& buffer, int64_t n_steps, Rng& rng,
                    std::vector<Observation>* live_out = nullptr);

}  // namespace dtqn
