#pragma once

// Run configuration: a sectioned key=value text format (documented in
// docs/formats.md) mirroring RunConfig, plus `section.key=value` overrides.
// Unknown keys are rejected by name; values are type-checked.

#include "dtqn/agent.hpp"
#include "dtqn/env.hpp"
#include "dtqn/model.hpp"

#include <string>
#include <vector>

namespace dtqn {

struct HarnessConfig {
    uint64_t seed = 1;
    int64_t eval_period = 5000;
    int eval_episodes = 10;
    int final_eval_episodes = 100;
    // When > 0: after a periodic eval reaches this success rate, a
    // confirmation eval of final_eval_episodes decides whether to stop
    // training early (the step budget is an upper bound).
    double early_stop_success = 0.0;
    int64_t checkpoint_period = 0;  // 0: only the final checkpoint
    // When > 0: halt (with checkpoint) at this env step while keeping the
    // schedules of total_steps; used for resume testing and staged runs.
    int64_t stop_at_step = 0;
    std::string output_dir = "run_out";

    void validate() const {
        if (eval_period < 1 || eval_episodes < 1 || final_eval_episodes < 1)
            throw config_error("harness: eval cadence values must be >= 1");
    }
};

struct RunConfig {
    EnvConfig env;
    ModelConfig model;  // obs layout and action count are filled from the env
    Hyperparams agent;
    HarnessConfig harness;
};

// Parses the sectioned text; `where` names the source in error messages.
RunConfig parse_run_config(const std::string& text, const std::string& where = "<config>");

// Applies one "section.key=value" override.
void apply_override(RunConfig& cfg, const std::string& override_expr);

RunConfig load_run_config(const std::string& path,
                          const std::vector<std::string>& overrides = {});

// Canonical echo; parse_run_config(serialize_run_config(c)) reproduces c.
std::string serialize_run_config(const RunConfig& cfg);

}  // namespace dtqn
