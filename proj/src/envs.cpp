#include "dtqn/env.hpp"
#include "dtqn/pomdp.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dtqn {

namespace {

// Shared step-cap and contract handling. Subclasses implement do_reset and
// do_step; the wrapper enforces "no stepping a finished episode" and forces
// done (without success) when the cap is hit.
class BaseEnv : public Env {
public:
    BaseEnv(std::string id, int step_cap) : id_(std::move(id)), step_cap_(step_cap) {}

    const std::string& id() const final { return id_; }
    int step_cap() const final { return step_cap_; }
    bool done() const final { return done_; }

    Observation reset(Rng& rng) final {
        steps_ = 0;
        done_ = false;
        return do_reset(rng);
    }

    StepResult step(int action, Rng& rng) final {
        if (done_) throw contract_error(id_ + ": step called after episode end");
        if (action < 0 || action >= action_count())
            throw contract_error(id_ + ": action " + std::to_string(action) + " out of range");
        StepResult r = do_step(action, rng);
        ++steps_;
        if (!r.done && steps_ >= step_cap_) {
            r.done = true;
            r.success = false;
        }
        done_ = r.done;
        return r;
    }

    void save_state(std::ostream& os) const final {
        os << steps_ << " " << done_ << "\n";
        save_domain_state(os);
    }
    void load_state(std::istream& is) final {
        is >> steps_ >> done_;
        load_domain_state(is);
    }

protected:
    virtual Observation do_reset(Rng& rng) = 0;
    virtual StepResult do_step(int action, Rng& rng) = 0;
    virtual void save_domain_state(std::ostream& os) const = 0;
    virtual void load_domain_state(std::istream& is) = 0;

    int steps_ = 0;

private:
    std::string id_;
    int step_cap_;
    bool done_ = false;
};

// ---------------------------------------------------------------------------
// Memory Cards: `pairs` pairs of cards on 2*pairs positions. Each step one
// hidden card is face-up and the agent guesses where its pair lies. Correct
// guesses remove the pair (reward 0), wrong ones flip the card back
// (reward -1) and a new random hidden card is revealed. Success = all pairs
// removed before the cap.
//
// Observation coding per position: 0 hidden, 1..pairs face-up value,
// pairs+1 removed.

class MemoryCardsEnv final : public BaseEnv {
public:
    MemoryCardsEnv(int pairs, int step_cap)
        : BaseEnv("memory_cards", step_cap), pairs_(pairs) {
        spec_.vocab.assign(static_cast<size_t>(2 * pairs_), pairs_ + 2);
        values_.assign(static_cast<size_t>(2 * pairs_), 0);
        removed_.assign(static_cast<size_t>(2 * pairs_), 0);
    }

    const ObsSpec& obs_spec() const override { return spec_; }
    int action_count() const override { return 2 * pairs_; }

    int revealed_position() const { return revealed_; }
    int removed_count() const {
        return static_cast<int>(std::count(removed_.begin(), removed_.end(), 1));
    }

protected:
    Observation do_reset(Rng& rng) override {
        const int n = 2 * pairs_;
        for (int i = 0; i < n; ++i) values_[static_cast<size_t>(i)] = i / 2 + 1;
        for (int i = n - 1; i > 0; --i)
            std::swap(values_[static_cast<size_t>(i)],
                      values_[static_cast<size_t>(rng.uniform_int(i + 1))]);
        std::fill(removed_.begin(), removed_.end(), 0);
        revealed_ = rng.uniform_int(n);
        return observe();
    }

    StepResult do_step(int guess, Rng& rng) override {
        StepResult r;
        const bool correct = guess != revealed_ && !removed_[static_cast<size_t>(guess)] &&
                             values_[static_cast<size_t>(guess)] ==
                                 values_[static_cast<size_t>(revealed_)];
        if (correct) {
            removed_[static_cast<size_t>(guess)] = 1;
            removed_[static_cast<size_t>(revealed_)] = 1;
            r.reward = 0.0f;
        } else {
            r.reward = -1.0f;
        }
        if (removed_count() == 2 * pairs_) {
            revealed_ = -1;
            r.done = true;
            r.success = true;
        } else {
            reveal_random(rng);
        }
        r.obs = observe();
        return r;
    }

    void save_domain_state(std::ostream& os) const override {
        os << pairs_ << " " << revealed_;
        for (int v : values_) os << " " << v;
        for (int v : removed_) os << " " << static_cast<int>(v);
        os << "\n";
    }
    void load_domain_state(std::istream& is) override {
        int pairs = 0;
        is >> pairs >> revealed_;
        if (pairs != pairs_) throw config_error("memory_cards: state has different pair count");
        for (auto& v : values_) is >> v;
        for (auto& v : removed_) {
            int x;
            is >> x;
            v = static_cast<uint8_t>(x);
        }
    }

private:
    void reveal_random(Rng& rng) {
        std::vector<int> hidden;
        for (int i = 0; i < 2 * pairs_; ++i)
            if (!removed_[static_cast<size_t>(i)]) hidden.push_back(i);
        revealed_ = hidden[static_cast<size_t>(rng.uniform_int(static_cast<int>(hidden.size())))];
    }

    Observation observe() const {
        Observation o(static_cast<size_t>(2 * pairs_), 0.0f);
        for (int i = 0; i < 2 * pairs_; ++i) {
            if (removed_[static_cast<size_t>(i)])
                o[static_cast<size_t>(i)] = static_cast<float>(pairs_ + 1);
            else if (i == revealed_)
                o[static_cast<size_t>(i)] = static_cast<float>(values_[static_cast<size_t>(i)]);
        }
        return o;
    }

    int pairs_;
    ObsSpec spec_;
    std::vector<int> values_;
    std::vector<uint8_t> removed_;
    int revealed_ = -1;
};

// ---------------------------------------------------------------------------
// Car Flag: a car on the segment [-1.2, 1.2] with goal flags at +-1.0. The
// oracle zone |x - 0.5| <= 0.1 reveals which flag pays +1; the other pays
// -1. Actions accelerate left / coast / accelerate right by 0.0015 with
// velocity clamped to +-0.07. Observation: [position, velocity, oracle].

class CarFlagEnv final : public BaseEnv {
public:
    explicit CarFlagEnv(int step_cap) : BaseEnv("car_flag", step_cap) {
        spec_.vocab = {0, 0, 0};
    }

    const ObsSpec& obs_spec() const override { return spec_; }
    int action_count() const override { return 3; }

    double position() const { return x_; }
    int goal_side() const { return goal_; }

protected:
    Observation do_reset(Rng& rng) override {
        x_ = rng.uniform_real(-0.2, 0.2);
        v_ = 0.0;
        goal_ = rng.bernoulli(0.5) ? 1 : -1;
        return observe();
    }

    StepResult do_step(int action, Rng&) override {
        v_ = std::clamp(v_ + (action - 1) * 0.0015, -0.07, 0.07);
        x_ = std::clamp(x_ + v_, -1.2, 1.2);
        StepResult r;
        if (x_ >= 1.0 || x_ <= -1.0) {
            const int side = x_ >= 1.0 ? 1 : -1;
            r.done = true;
            r.success = side == goal_;
            r.reward = r.success ? 1.0f : -1.0f;
        }
        r.obs = observe();
        return r;
    }

    void save_domain_state(std::ostream& os) const override {
        os.precision(17);
        os << x_ << " " << v_ << " " << goal_ << "\n";
    }
    void load_domain_state(std::istream& is) override { is >> x_ >> v_ >> goal_; }

private:
    Observation observe() const {
        const float oracle =
            std::abs(x_ - 0.5) <= 0.1 ? static_cast<float>(goal_) : 0.0f;
        return {static_cast<float>(x_), static_cast<float>(v_), oracle};
    }

    ObsSpec spec_;
    double x_ = 0.0, v_ = 0.0;
    int goal_ = 1;
};

// ---------------------------------------------------------------------------
// Heaven/Hell: a T-shaped grid. Fork arms of two cells east and west of the
// junction; a three-cell stem runs south to the priest. Heaven sits at one
// arm end (swapped at random each episode) and pays +1, hell pays -1. The
// observation is the cell index except at the priest, which emits a
// heaven-is-left / heaven-is-right indicator.
//
// cells: 0 junction, 1..2 stem, 3 priest, 4..5 west arm, 6..7 east arm
// (5 and 7 are the terminal ends); actions: 0 N, 1 S, 2 E, 3 W.

class HeavenHellEnv final : public BaseEnv {
public:
    explicit HeavenHellEnv(int step_cap) : BaseEnv("heaven_hell", step_cap) {
        spec_.vocab = {10};  // 8 cells + 2 priest indicators
    }

    const ObsSpec& obs_spec() const override { return spec_; }
    int action_count() const override { return 4; }

    bool heaven_is_left() const { return heaven_left_; }
    int cell() const { return cell_; }
    static constexpr int kPriestObsLeft = 8;
    static constexpr int kPriestObsRight = 9;

protected:
    Observation do_reset(Rng& rng) override {
        cell_ = 0;
        heaven_left_ = rng.bernoulli(0.5);
        return observe();
    }

    StepResult do_step(int action, Rng&) override {
        static constexpr int kWall = -1;
        // moves[cell][action] for N,S,E,W
        static constexpr int moves[8][4] = {
            {kWall, 1, 6, 4},      // junction
            {0, 2, kWall, kWall},  // stem 1
            {1, 3, kWall, kWall},  // stem 2
            {2, kWall, kWall, kWall},  // priest
            {kWall, kWall, 0, 5},  // west arm inner
            {kWall, kWall, 4, kWall},  // west end (terminal)
            {kWall, kWall, 7, 0},  // east arm inner
            {kWall, kWall, kWall, 6},  // east end (terminal)
        };
        const int dest = moves[cell_][action];
        if (dest != kWall) cell_ = dest;
        StepResult r;
        if (cell_ == 5 || cell_ == 7) {
            const bool heaven = (cell_ == 5) == heaven_left_;
            r.done = true;
            r.success = heaven;
            r.reward = heaven ? 1.0f : -1.0f;
        }
        r.obs = observe();
        return r;
    }

    void save_domain_state(std::ostream& os) const override {
        os << cell_ << " " << heaven_left_ << "\n";
    }
    void load_domain_state(std::istream& is) override { is >> cell_ >> heaven_left_; }

private:
    Observation observe() const {
        if (cell_ == 3)
            return {static_cast<float>(heaven_left_ ? kPriestObsLeft : kPriestObsRight)};
        return {static_cast<float>(cell_)};
    }

    ObsSpec spec_;
    int cell_ = 0;
    bool heaven_left_ = true;
};

// ---------------------------------------------------------------------------
// Gridverse-style Memory NxN: a walled grid with two same-colored beacons
// at the south end and one flag of each color in the north corners. The
// agent sees the 2x3 patch around/ahead of itself as cell-type codes and
// must reach the flag matching the beacon color. Colors are redrawn each
// reset.
//
// cell codes: 0 floor, 1 wall, 2 beacon-green, 3 beacon-blue, 4 flag-green,
// 5 flag-blue. actions: 0 forward, 1 backward, 2 strafe left,
// 3 strafe right, 4 turn left, 5 turn right.

class GvMemoryEnv final : public BaseEnv {
public:
    GvMemoryEnv(int n, int step_cap) : BaseEnv("gv_memory", step_cap), n_(n) {
        spec_.vocab.assign(6, 6);
    }

    const ObsSpec& obs_spec() const override { return spec_; }
    int action_count() const override { return 6; }

    int grid_size() const { return n_; }
    int goal_color() const { return goal_color_; }  // 0 green, 1 blue
    int agent_row() const { return row_; }
    int agent_col() const { return col_; }
    int agent_dir() const { return dir_; }  // 0 N, 1 E, 2 S, 3 W
    // flag cells: west corner (1,1), east corner (1, n-2)
    int west_flag_color() const { return west_flag_color_; }

protected:
    Observation do_reset(Rng& rng) override {
        row_ = (n_ - 1) / 2;
        col_ = (n_ - 1) / 2;
        dir_ = rng.uniform_int(4);
        goal_color_ = rng.uniform_int(2);
        west_flag_color_ = rng.uniform_int(2);
        return observe();
    }

    StepResult do_step(int action, Rng&) override {
        StepResult r;
        if (action >= 4) {
            dir_ = (dir_ + (action == 4 ? 3 : 1)) % 4;
            r.obs = observe();
            return r;
        }
        static constexpr int dr[4] = {-1, 0, 1, 0};
        static constexpr int dc[4] = {0, 1, 0, -1};
        int move_dir = dir_;
        if (action == 1) move_dir = (dir_ + 2) % 4;        // backward
        else if (action == 2) move_dir = (dir_ + 3) % 4;   // strafe left
        else if (action == 3) move_dir = (dir_ + 1) % 4;   // strafe right
        const int nr = row_ + dr[move_dir];
        const int nc = col_ + dc[move_dir];
        const int cell = cell_type(nr, nc);
        if (cell == 0) {
            row_ = nr;
            col_ = nc;
        } else if (cell == 4 || cell == 5) {
            row_ = nr;
            col_ = nc;
            const int flag_color = cell - 4;
            r.done = true;
            r.success = flag_color == goal_color_;
            r.reward = r.success ? 1.0f : -1.0f;
        }
        r.obs = observe();
        return r;
    }

    void save_domain_state(std::ostream& os) const override {
        os << n_ << " " << row_ << " " << col_ << " " << dir_ << " " << goal_color_ << " "
           << west_flag_color_ << "\n";
    }
    void load_domain_state(std::istream& is) override {
        int n = 0;
        is >> n >> row_ >> col_ >> dir_ >> goal_color_ >> west_flag_color_;
        if (n != n_) throw config_error("gv_memory: state has different grid size");
    }

private:
    int cell_type(int r, int c) const {
        if (r <= 0 || c <= 0 || r >= n_ - 1 || c >= n_ - 1) return 1;  // border wall
        if (r == 1 && c == 1) return 4 + west_flag_color_;
        if (r == 1 && c == n_ - 2) return 4 + (1 - west_flag_color_);
        const int bc = (n_ - 1) / 2;
        if (r == n_ - 2 && (c == bc || c == bc + 1)) return 2 + goal_color_;
        return 0;
    }

    Observation observe() const {
        static constexpr int dr[4] = {-1, 0, 1, 0};
        static constexpr int dc[4] = {0, 1, 0, -1};
        const int fr = dr[dir_], fc = dc[dir_];          // forward
        const int lr = dr[(dir_ + 3) % 4], lc = dc[(dir_ + 3) % 4];  // left
        Observation o(6, 0.0f);
        // own row: left, center (own cell reads floor), right
        o[0] = static_cast<float>(cell_type(row_ + lr, col_ + lc));
        o[1] = 0.0f;
        o[2] = static_cast<float>(cell_type(row_ - lr, col_ - lc));
        // row ahead: left, center, right
        o[3] = static_cast<float>(cell_type(row_ + fr + lr, col_ + fc + lc));
        o[4] = static_cast<float>(cell_type(row_ + fr, col_ + fc));
        o[5] = static_cast<float>(cell_type(row_ + fr - lr, col_ + fc - lc));
        return o;
    }

    int n_;
    ObsSpec spec_;
    int row_ = 0, col_ = 0, dir_ = 0;
    int goal_color_ = 0;
    int west_flag_color_ = 0;
};

}  // namespace

std::unique_ptr<Env> make_env(const EnvConfig& config) {
    const int cap = config.step_cap;
    if (config.id == "memory_cards") {
        const int pairs = config.size > 0 ? config.size : 5;
        if (pairs < 1 || pairs > 12)
            throw config_error("memory_cards: pair count must be in [1, 12]");
        return std::make_unique<MemoryCardsEnv>(pairs, cap > 0 ? cap : 50);
    }
    if (config.id == "car_flag") return std::make_unique<CarFlagEnv>(cap > 0 ? cap : 200);
    if (config.id == "heaven_hell") return std::make_unique<HeavenHellEnv>(cap > 0 ? cap : 40);
    if (config.id == "gv_memory") {
        const int n = config.size > 0 ? config.size : 7;
        if (n < 5 || n % 2 == 0)
            throw config_error("gv_memory: grid size must be odd and >= 5");
        return std::make_unique<GvMemoryEnv>(n, cap > 0 ? cap : 4 * n * n);
    }
    if (config.id == "pomdp_file") {
        if (config.pomdp_file.empty())
            throw config_error("pomdp_file: missing pomdp_file path");
        PomdpSpec spec = parse_pomdp_file(config.pomdp_file);
        return make_pomdp_env(std::move(spec), cap > 0 ? cap : 200, config.success_reward);
    }
    throw config_error("unknown env id '" + config.id +
                       "' (known: memory_cards, car_flag, heaven_hell, gv_memory, pomdp_file)");
}

std::vector<std::string> known_env_ids() {
    return {"memory_cards", "car_flag", "heaven_hell", "gv_memory", "pomdp_file"};
}

}  // namespace dtqn
