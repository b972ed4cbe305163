#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dtqn/pomdp.hpp"

#include <cmath>
#include <string>

using namespace dtqn;

namespace {

const char* kMinimal = R"(
# two states, two actions, two observations
discount: 0.9
values: reward
states: left right
actions: stay go
observations: oleft oright

start: uniform

T: stay identity
T: go : left : right 1.0
T: go : right : left 1.0

O: * : left : oleft 0.8
O: * : left : oright 0.2
O: * : right : oright 0.8
O: * : right : oleft 0.2

R: go : left : right : * 1.0
)";

}  // namespace

TEST_CASE("minimal hand-written file parses with uniform start") {
    const PomdpSpec spec = parse_pomdp(kMinimal);
    CHECK(spec.ns() == 2);
    CHECK(spec.na() == 2);
    CHECK(spec.no() == 2);
    CHECK(spec.discount == doctest::Approx(0.9));
    CHECK(spec.start[0] == doctest::Approx(0.5));
    CHECK(spec.start[1] == doctest::Approx(0.5));
    CHECK(spec.reward_at(1, 0, 1, 0) == 1.0);
    CHECK(spec.reward_at(1, 0, 1, 1) == 1.0);
    CHECK(spec.reward_at(0, 0, 0, 0) == 0.0);
}

TEST_CASE("T identity keyword yields the identity matrix") {
    const PomdpSpec spec = parse_pomdp(kMinimal);
    CHECK((spec.transition[0] - MatX<double>::Identity(2, 2)).cwiseAbs().maxCoeff() == 0.0);
    CHECK(spec.transition[1](0, 1) == 1.0);
    CHECK(spec.transition[1](1, 0) == 1.0);
}

TEST_CASE("numeric space declarations and row/matrix/uniform forms") {
    const PomdpSpec spec = parse_pomdp(R"(
discount: 0.5
states: 3
actions: 2
observations: 2
start: s1
T: 0 : s0
0.5 0.25 0.25
T: 0 : s1 : * 0.333333333333333
T: 0 : s2
1 0 0
T: 1 uniform
O: * uniform
)");
    CHECK(spec.states == std::vector<std::string>{"s0", "s1", "s2"});
    CHECK(spec.start[1] == 1.0);
    CHECK(spec.transition[0](0, 1) == 0.25);
    CHECK(spec.transition[1](2, 0) == doctest::Approx(1.0 / 3));
    CHECK(spec.observation[1](0, 0) == 0.5);
}

TEST_CASE("the bundled hallway file parses and passes a direct row-sum audit") {
    const PomdpSpec spec = parse_pomdp_file(std::string(DTQN_DATA_DIR) + "/hallway.pomdp");
    CHECK(spec.ns() == 36);
    CHECK(spec.na() == 5);
    CHECK(spec.no() == 18);
    CHECK(spec.discount == doctest::Approx(0.95));

    // direct summation, independent of PomdpSpec::validate
    for (int a = 0; a < spec.na(); ++a)
        for (int s = 0; s < spec.ns(); ++s) {
            double tsum = 0.0, osum = 0.0;
            for (int s2 = 0; s2 < spec.ns(); ++s2) tsum += spec.transition[a](s, s2);
            for (int o = 0; o < spec.no(); ++o) osum += spec.observation[a](s, o);
            CHECK(std::abs(tsum - 1.0) <= 1e-6);
            CHECK(std::abs(osum - 1.0) <= 1e-6);
        }
    double ssum = 0.0;
    for (double p : spec.start) ssum += p;
    CHECK(std::abs(ssum - 1.0) <= 1e-6);

    // goal: entering the fourth room pays 1 from anywhere, absorbing loop pays 0
    const int goal_state = 4 * 5 + 3 * 4;  // r3_N
    CHECK(spec.reward_at(1, 0, goal_state, 0) == 1.0);
    CHECK(spec.reward_at(1, goal_state, goal_state, 0) == 0.0);
}

TEST_CASE("unknown directives are rejected with a line number") {
    try {
        parse_pomdp("discount: 0.9\nbanana: 3\n");
        FAIL("expected config_error");
    } catch (const config_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("line 2") != std::string::npos);
        CHECK(msg.find("banana") != std::string::npos);
    }
}

TEST_CASE("non-stochastic rows are rejected") {
    CHECK_THROWS_WITH_AS(parse_pomdp(R"(
discount: 0.9
states: 2
actions: 1
observations: 2
T: 0 : s0 : s1 0.5
T: 0 : s1 identity_is_not_valid_here
O: * uniform
)"),
                         doctest::Contains("expected a number"), config_error);

    try {
        parse_pomdp(R"(
discount: 0.9
states: 2
actions: 1
observations: 2
start: uniform
T: 0 : s0 : s1 0.7
T: 0 : s1 : s1 1.0
O: * uniform
)");
        FAIL("expected config_error");
    } catch (const config_error& e) {
        CHECK(std::string(e.what()).find("sums to") != std::string::npos);
    }
}

TEST_CASE("undefined names are rejected with position info") {
    try {
        parse_pomdp(R"(
discount: 0.9
states: 2
actions: 1
observations: 2
T: 0 : nowhere : s1 1.0
O: * uniform
)");
        FAIL("expected config_error");
    } catch (const config_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("nowhere") != std::string::npos);
        CHECK(msg.find("line 6") != std::string::npos);
    }
}

TEST_CASE("cost-valued files are rejected; O identity needs matching sizes") {
    CHECK_THROWS_AS(parse_pomdp("discount: 0.9\nvalues: cost\nstates: 2\nactions: 1\n"
                                "observations: 2\nT: 0 identity\nO: * uniform\n"),
                    config_error);
    CHECK_THROWS_WITH_AS(parse_pomdp("discount: 0.9\nstates: 2\nactions: 1\nobservations: 3\n"
                                     "T: 0 identity\nO: * identity\n"),
                         doctest::Contains("identity requires"), config_error);
}
