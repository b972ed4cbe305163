#pragma once

// Parser for a subset of the `.pomdp` flat-file format (the pomdp-solve
// grammar) and a generic episodic environment over the parsed model. The
// accepted productions are documented in docs/formats.md.

#include "dtqn/common.hpp"
#include "dtqn/env.hpp"

#include <string>
#include <vector>

namespace dtqn {

struct PomdpSpec {
    double discount = 0.0;
    std::vector<std::string> states, actions, observations;
    std::vector<MatX<double>> transition;   // per action: |S| x |S|
    std::vector<MatX<double>> observation;  // per action: |S'| x |Omega|
    std::vector<double> start;              // |S|
    std::vector<double> reward;             // dense [a][s][s'][o]

    int ns() const { return static_cast<int>(states.size()); }
    int na() const { return static_cast<int>(actions.size()); }
    int no() const { return static_cast<int>(observations.size()); }

    double reward_at(int a, int s, int s2, int o) const {
        return reward[((static_cast<size_t>(a) * ns() + s) * ns() + s2) * no() + o];
    }
    double& reward_at(int a, int s, int s2, int o) {
        return reward[((static_cast<size_t>(a) * ns() + s) * ns() + s2) * no() + o];
    }

    // Stochasticity audit: every T[a][s][.] and O[a][s'][.] row and the
    // start distribution must sum to 1 within tol.
    void validate(double tol = 1e-6) const;
};

// Throws config_error with "line L[, column C]: ..." messages on syntax
// errors, unknown directives, undefined names, or non-stochastic rows.
PomdpSpec parse_pomdp(const std::string& text);
PomdpSpec parse_pomdp_file(const std::string& path);

std::unique_ptr<Env> make_pomdp_env(PomdpSpec spec, int step_cap, double success_reward);

}  // namespace dtqn
