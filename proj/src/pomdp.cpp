#include "dtqn/pomdp.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace dtqn {

namespace {

struct Token {
    std::string text;
    int line = 0;
    int col = 0;
};

[[noreturn]] void fail(const Token& tok, const std::string& what) {
    throw config_error("line " + std::to_string(tok.line) + ", column " +
                       std::to_string(tok.col) + ": " + what);
}

// Whitespace-separated words with '#' comments; ':' is always its own token.
std::vector<Token> tokenize(const std::string& text) {
    std::vector<Token> out;
    int line = 1, col = 1;
    std::string cur;
    int cur_line = 0, cur_col = 0;
    auto flush = [&]() {
        if (!cur.empty()) {
            out.push_back({cur, cur_line, cur_col});
            cur.clear();
        }
    };
    for (size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (c == '#') {
            flush();
            while (i < text.size() && text[i] != '\n') ++i;
            ++line;
            col = 1;
            continue;
        }
        if (c == '\n') {
            flush();
            ++line;
            col = 1;
            continue;
        }
        if (c == ' ' || c == '\t' || c == '\r') {
            flush();
            ++col;
            continue;
        }
        if (c == ':') {
            flush();
            out.push_back({":", line, col});
            ++col;
            continue;
        }
        if (cur.empty()) {
            cur_line = line;
            cur_col = col;
        }
        cur += c;
        ++col;
    }
    flush();
    return out;
}

class Parser {
public:
    explicit Parser(const std::string& text) : tokens_(tokenize(text)) {}

    PomdpSpec parse() {
        while (!at_end()) {
            const Token& tok = peek();
            if (tok.text == "discount") {
                next();
                expect_colon();
                spec_.discount = number(next());
                if (spec_.discount < 0.0 || spec_.discount >= 1.0)
                    fail(tok, "discount must be in [0, 1)");
            } else if (tok.text == "values") {
                next();
                expect_colon();
                const Token v = next();
                if (v.text != "reward")
                    fail(v, "unsupported values kind '" + v.text + "' (only 'reward')");
            } else if (tok.text == "states") {
                next();
                expect_colon();
                spec_.states = name_list("s");
            } else if (tok.text == "actions") {
                next();
                expect_colon();
                spec_.actions = name_list("a");
            } else if (tok.text == "observations") {
                next();
                expect_colon();
                spec_.observations = name_list("o");
            } else if (tok.text == "start") {
                next();
                expect_colon();
                parse_start();
            } else if (tok.text == "T") {
                next();
                expect_colon();
                parse_transition();
            } else if (tok.text == "O") {
                next();
                expect_colon();
                parse_observation_fn();
            } else if (tok.text == "R") {
                next();
                expect_colon();
                parse_reward();
            } else {
                fail(tok, "unknown directive '" + tok.text + "'");
            }
        }
        finalize();
        return std::move(spec_);
    }

private:
    bool at_end() const { return pos_ >= tokens_.size(); }
    const Token& peek() const {
        if (at_end()) {
            static Token eof{"<end of file>", 0, 0};
            return eof;
        }
        return tokens_[pos_];
    }
    Token next() {
        if (at_end()) throw config_error("unexpected end of file in .pomdp input");
        return tokens_[pos_++];
    }
    bool peek_colon() const { return !at_end() && tokens_[pos_].text == ":"; }
    void expect_colon() {
        const Token t = next();
        if (t.text != ":") fail(t, "expected ':' after directive keyword");
    }

    static bool is_number(const std::string& s) {
        char* end = nullptr;
        std::strtod(s.c_str(), &end);
        return end != nullptr && *end == '\0' && end != s.c_str();
    }
    static double number(const Token& t) {
        char* end = nullptr;
        const double v = std::strtod(t.text.c_str(), &end);
        if (end == nullptr || *end != '\0' || end == t.text.c_str())
            fail(t, "expected a number, got '" + t.text + "'");
        return v;
    }

    // `states: 4` or `states: heaven hell limbo`
    std::vector<std::string> name_list(const std::string& prefix) {
        const Token first = next();
        std::vector<std::string> names;
        char* end = nullptr;
        const long n = std::strtol(first.text.c_str(), &end, 10);
        if (end != nullptr && *end == '\0' && n > 0) {
            for (long i = 0; i < n; ++i) names.push_back(prefix + std::to_string(i));
            return names;
        }
        names.push_back(first.text);
        while (!at_end() && !is_directive_ahead()) names.push_back(next().text);
        return names;
    }

    bool is_directive_ahead() const {
        if (at_end()) return true;
        static const char* kDirectives[] = {"discount", "values", "states", "actions",
                                            "observations", "start", "T", "O", "R"};
        const std::string& t = tokens_[pos_].text;
        for (const char* d : kDirectives)
            if (t == d && pos_ + 1 < tokens_.size() && tokens_[pos_ + 1].text == ":") return true;
        return false;
    }

    // resolves a name or index; '*' yields -1 (wildcard)
    int resolve(const Token& tok, const std::vector<std::string>& names, const char* kind) {
        if (tok.text == "*") return -1;
        for (size_t i = 0; i < names.size(); ++i)
            if (names[i] == tok.text) return static_cast<int>(i);
        char* end = nullptr;
        const long idx = std::strtol(tok.text.c_str(), &end, 10);
        if (end != nullptr && *end == '\0' && end != tok.text.c_str()) {
            if (idx < 0 || idx >= static_cast<long>(names.size()))
                fail(tok, std::string(kind) + " index " + tok.text + " out of range");
            return static_cast<int>(idx);
        }
        fail(tok, std::string("undefined ") + kind + " name '" + tok.text + "'");
    }

    void require_spaces(const Token& at) {
        if (spec_.states.empty() || spec_.actions.empty() || spec_.observations.empty())
            fail(at, "states, actions and observations must be declared before matrix entries");
        if (spec_.transition.empty()) {
            spec_.transition.assign(static_cast<size_t>(spec_.na()),
                                    MatX<double>::Zero(spec_.ns(), spec_.ns()));
            spec_.observation.assign(static_cast<size_t>(spec_.na()),
                                     MatX<double>::Zero(spec_.ns(), spec_.no()));
            spec_.reward.assign(static_cast<size_t>(spec_.na()) * spec_.ns() * spec_.ns() *
                                    spec_.no(),
                                0.0);
        }
    }

    void parse_start() {
        const Token first = peek();
        require_spaces(first);
        spec_.start.assign(static_cast<size_t>(spec_.ns()), 0.0);
        if (first.text == "uniform") {
            next();
            for (double& p : spec_.start) p = 1.0 / spec_.ns();
            return;
        }
        if (!is_number(first.text)) {
            const int s = resolve(next(), spec_.states, "state");
            spec_.start[static_cast<size_t>(s)] = 1.0;
            return;
        }
        for (int s = 0; s < spec_.ns(); ++s) spec_.start[static_cast<size_t>(s)] = number(next());
    }

    template <typename Fn>
    void for_wildcard(int idx, int count, Fn&& fn) {
        if (idx >= 0) {
            fn(idx);
            return;
        }
        for (int i = 0; i < count; ++i) fn(i);
    }

    // T: a [: s [: s' prob]] with row, matrix, identity and uniform forms
    void parse_transition() {
        const Token at = peek();
        require_spaces(at);
        const int a = resolve(next(), spec_.actions, "action");
        if (peek_colon()) {
            next();
            const int s = resolve(next(), spec_.states, "state");
            if (peek_colon()) {
                next();
                const Token s2tok = next();
                const int s2 = resolve(s2tok, spec_.states, "state");
                const double p = number(next());
                for_wildcard(a, spec_.na(), [&](int ai) {
                    for_wildcard(s, spec_.ns(), [&](int si) {
                        for_wildcard(s2, spec_.ns(), [&](int s2i) {
                            spec_.transition[static_cast<size_t>(ai)](si, s2i) = p;
                        });
                    });
                });
            } else {
                for (int s2 = 0; s2 < spec_.ns(); ++s2) {
                    const double p = number(next());
                    for_wildcard(a, spec_.na(), [&](int ai) {
                        for_wildcard(s, spec_.ns(), [&](int si) {
                            spec_.transition[static_cast<size_t>(ai)](si, s2) = p;
                        });
                    });
                }
            }
            return;
        }
        const Token form = peek();
        if (form.text == "identity") {
            next();
            for_wildcard(a, spec_.na(), [&](int ai) {
                spec_.transition[static_cast<size_t>(ai)] =
                    MatX<double>::Identity(spec_.ns(), spec_.ns());
            });
            return;
        }
        if (form.text == "uniform") {
            next();
            for_wildcard(a, spec_.na(), [&](int ai) {
                spec_.transition[static_cast<size_t>(ai)].setConstant(1.0 / spec_.ns());
            });
            return;
        }
        for (int s = 0; s < spec_.ns(); ++s)
            for (int s2 = 0; s2 < spec_.ns(); ++s2) {
                const double p = number(next());
                for_wildcard(a, spec_.na(), [&](int ai) {
                    spec_.transition[static_cast<size_t>(ai)](s, s2) = p;
                });
            }
    }

    // O: a [: s' [: o prob]] with row, matrix, identity and uniform forms
    void parse_observation_fn() {
        const Token at = peek();
        require_spaces(at);
        const int a = resolve(next(), spec_.actions, "action");
        if (peek_colon()) {
            next();
            const int s2 = resolve(next(), spec_.states, "state");
            if (peek_colon()) {
                next();
                const int o = resolve(next(), spec_.observations, "observation");
                const double p = number(next());
                for_wildcard(a, spec_.na(), [&](int ai) {
                    for_wildcard(s2, spec_.ns(), [&](int si) {
                        for_wildcard(o, spec_.no(), [&](int oi) {
                            spec_.observation[static_cast<size_t>(ai)](si, oi) = p;
                        });
                    });
                });
            } else {
                for (int o = 0; o < spec_.no(); ++o) {
                    const double p = number(next());
                    for_wildcard(a, spec_.na(), [&](int ai) {
                        for_wildcard(s2, spec_.ns(), [&](int si) {
                            spec_.observation[static_cast<size_t>(ai)](si, o) = p;
                        });
                    });
                }
            }
            return;
        }
        const Token form = peek();
        if (form.text == "identity") {
            if (spec_.ns() != spec_.no())
                fail(form, "O identity requires |S| == |Omega|");
            next();
            for_wildcard(a, spec_.na(), [&](int ai) {
                spec_.observation[static_cast<size_t>(ai)] =
                    MatX<double>::Identity(spec_.ns(), spec_.no());
            });
            return;
        }
        if (form.text == "uniform") {
            next();
            for_wildcard(a, spec_.na(), [&](int ai) {
                spec_.observation[static_cast<size_t>(ai)].setConstant(1.0 / spec_.no());
            });
            return;
        }
        for (int s2 = 0; s2 < spec_.ns(); ++s2)
            for (int o = 0; o < spec_.no(); ++o) {
                const double p = number(next());
                for_wildcard(a, spec_.na(), [&](int ai) {
                    spec_.observation[static_cast<size_t>(ai)](s2, o) = p;
                });
            }
    }

    // R: a : s : s' : o value  (scalar form) or R: a : s : s' followed by
    // |Omega| values (row form). Any identifier may be '*'.
    void parse_reward() {
        const Token at = peek();
        require_spaces(at);
        const int a = resolve(next(), spec_.actions, "action");
        Token t = next();
        if (t.text != ":") fail(t, "expected ':' in R entry");
        const int s = resolve(next(), spec_.states, "state");
        t = next();
        if (t.text != ":") fail(t, "expected ':' in R entry");
        const int s2 = resolve(next(), spec_.states, "state");
        if (peek_colon()) {
            next();
            const int o = resolve(next(), spec_.observations, "observation");
            const double v = number(next());
            assign_reward(a, s, s2, o, v);
        } else {
            for (int o = 0; o < spec_.no(); ++o) assign_reward(a, s, s2, o, number(next()));
        }
    }

    void assign_reward(int a, int s, int s2, int o, double v) {
        for_wildcard(a, spec_.na(), [&](int ai) {
            for_wildcard(s, spec_.ns(), [&](int si) {
                for_wildcard(s2, spec_.ns(), [&](int s2i) {
                    for_wildcard(o, spec_.no(), [&](int oi) {
                        spec_.reward_at(ai, si, s2i, oi) = v;
                    });
                });
            });
        });
    }

    void finalize() {
        if (spec_.states.empty()) throw config_error("missing 'states:' directive");
        if (spec_.actions.empty()) throw config_error("missing 'actions:' directive");
        if (spec_.observations.empty()) throw config_error("missing 'observations:' directive");
        if (spec_.transition.empty())
            throw config_error("no T:/O:/R: entries found");
        if (spec_.start.empty()) {
            spec_.start.assign(static_cast<size_t>(spec_.ns()), 1.0 / spec_.ns());
        }
        spec_.validate();
    }

    std::vector<Token> tokens_;
    size_t pos_ = 0;
    PomdpSpec spec_;
};

class PomdpEnv final : public Env {
public:
    PomdpEnv(PomdpSpec spec, int step_cap, double success_reward)
        : spec_(std::move(spec)), step_cap_(step_cap), success_reward_(success_reward),
          id_("pomdp_file") {
        obs_spec_.vocab = {spec_.no()};
    }

    const std::string& id() const override { return id_; }
    const ObsSpec& obs_spec() const override { return obs_spec_; }
    int action_count() const override { return spec_.na(); }
    int step_cap() const override { return step_cap_; }
    bool done() const override { return done_; }
    const PomdpSpec& spec() const { return spec_; }
    int state() const { return state_; }

    Observation reset(Rng& rng) override {
        steps_ = 0;
        done_ = false;
        state_ = sample(spec_.start.data(), spec_.ns(), rng);
        // The flat format defines observations only after an action; the
        // first emission reuses action 0's observation row.
        const int o = sample_row(spec_.observation[0], state_, rng);
        return {static_cast<float>(o)};
    }

    StepResult step(int action, Rng& rng) override {
        if (done_) throw contract_error("pomdp_file: step called after episode end");
        if (action < 0 || action >= spec_.na())
            throw contract_error("pomdp_file: action out of range");
        const int s = state_;
        const int s2 = sample_row(spec_.transition[static_cast<size_t>(action)], s, rng);
        const int o = sample_row(spec_.observation[static_cast<size_t>(action)], s2, rng);
        state_ = s2;
        ++steps_;
        StepResult r;
        r.reward = static_cast<float>(spec_.reward_at(action, s, s2, o));
        r.obs = {static_cast<float>(o)};
        if (r.reward >= success_reward_) {
            r.done = true;
            r.success = true;
        } else if (steps_ >= step_cap_) {
            r.done = true;
            r.success = false;
        }
        done_ = r.done;
        return r;
    }

    void save_state(std::ostream& os) const override {
        os << steps_ << " " << done_ << " " << state_ << "\n";
    }
    void load_state(std::istream& is) override { is >> steps_ >> done_ >> state_; }

private:
    static int sample(const double* p, int n, Rng& rng) {
        const double u = rng.uniform_real();
        double acc = 0;
        for (int i = 0; i < n; ++i) {
            acc += p[i];
            if (u < acc) return i;
        }
        return n - 1;
    }
    static int sample_row(const MatX<double>& m, int row, Rng& rng) {
        const double u = rng.uniform_real();
        double acc = 0;
        for (int i = 0; i < m.cols(); ++i) {
            acc += m(row, i);
            if (u < acc) return i;
        }
        return static_cast<int>(m.cols()) - 1;
    }

    PomdpSpec spec_;
    int step_cap_;
    double success_reward_;
    std::string id_;
    ObsSpec obs_spec_;
    int state_ = 0;
    int steps_ = 0;
    bool done_ = false;
};

}  // namespace

void PomdpSpec::validate(double tol) const {
    auto check_rows = [&](const std::vector<MatX<double>>& mats, const char* what) {
        for (size_t a = 0; a < mats.size(); ++a)
            for (int r = 0; r < mats[a].rows(); ++r) {
                double sum = 0;
                for (int c = 0; c < mats[a].cols(); ++c) {
                    const double v = mats[a](r, c);
                    if (!std::isfinite(v) || v < -tol || v > 1 + tol)
                        throw config_error(std::string(what) + " entry out of [0,1] for action " +
                                           actions[a] + ", row " + std::to_string(r));
                    sum += v;
                }
                if (std::abs(sum - 1.0) > tol)
                    throw config_error(std::string(what) + " row for action " + actions[a] +
                                       ", state " + std::to_string(r) + " sums to " +
                                       std::to_string(sum) + ", expected 1");
            }
    };
    check_rows(transition, "T");
    check_rows(observation, "O");
    double ssum = 0;
    for (double p : start) ssum += p;
    if (std::abs(ssum - 1.0) > tol)
        throw config_error("start distribution sums to " + std::to_string(ssum));
}

PomdpSpec parse_pomdp(const std::string& text) { return Parser(text).parse(); }

PomdpSpec parse_pomdp_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open .pomdp file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_pomdp(ss.str());
}

std::unique_ptr<Env> make_pomdp_env(PomdpSpec spec, int step_cap, double success_reward) {
    return std::make_unique<PomdpEnv>(std::move(spec), step_cap, success_reward);
}

}  // namespace dtqn
