#pragma once

// Episodic POMDP environments behind one interface. Observations are
// fixed-length vectors of discrete codes (stored as floats) or reals; the
// rng is always injected. Instances are single-owner; distinct instances
// may live on distinct threads.

#include "dtqn/common.hpp"

#include <memory>
#include <string>
#include <vector>

namespace dtqn {

struct StepResult {
    Observation obs;
    float reward = 0.0f;
    bool done = false;
    bool success = false;  // meaningful only when done
};

struct EnvConfig {
    std::string id;  // memory_cards | car_flag | heaven_hell | gv_memory | pomdp_file
    int size = 0;    // gv_memory grid N (odd, >= 5); memory_cards pair count
    int step_cap = 0;  // 0 picks the per-domain default
    std::string pomdp_file;
    // pomdp_file envs have no terminal-state notion in the flat format; an
    // episode ends successfully when one step's reward reaches this value.
    double success_reward = 1.0;
};

class Env {
public:
    virtual ~Env() = default;

    virtual const std::string& id() const = 0;
    virtual const ObsSpec& obs_spec() const = 0;
    virtual int action_count() const = 0;
    virtual int step_cap() const = 0;

    virtual Observation reset(Rng& rng) = 0;
    virtual StepResult step(int action, Rng& rng) = 0;
    virtual bool done() const = 0;

    // Plain-text state dump/restore for checkpoint resume.
    virtual void save_state(std::ostream& os) const = 0;
    virtual void load_state(std::istream& is) = 0;
};

std::unique_ptr<Env> make_env(const EnvConfig& config);
std::vector<std::string> known_env_ids();

}  // namespace dtqn
