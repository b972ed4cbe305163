#include "dtqn/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace dtqn {

namespace {

std::string trim(const std::string& s) {
    const size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

int64_t parse_i64(const std::string& v, const std::string& key) {
    char* end = nullptr;
    const long long x = std::strtoll(v.c_str(), &end, 10);
    if (end == nullptr || *end != '\0' || end == v.c_str())
        throw config_error(key + ": expected an integer, got '" + v + "'");
    return x;
}

double parse_f64(const std::string& v, const std::string& key) {
    char* end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (end == nullptr || *end != '\0' || end == v.c_str())
        throw config_error(key + ": expected a number, got '" + v + "'");
    return x;
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw config_error(key + ": expected true/false, got '" + v + "'");
}

struct Field {
    std::string key;  // "section.name"
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename T>
std::string num_str(T v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = [] {
        std::vector<Field> f;
        auto add = [&](std::string key, auto set, auto get) {
            f.push_back({std::move(key), set, get});
        };
        // env
        add("env.id", [](RunConfig& c, const std::string& v) { c.env.id = v; },
            [](const RunConfig& c) { return c.env.id; });
        add("env.size",
            [](RunConfig& c, const std::string& v) {
                c.env.size = static_cast<int>(parse_i64(v, "env.size"));
            },
            [](const RunConfig& c) { return num_str(c.env.size); });
        add("env.step_cap",
            [](RunConfig& c, const std::string& v) {
                c.env.step_cap = static_cast<int>(parse_i64(v, "env.step_cap"));
            },
            [](const RunConfig& c) { return num_str(c.env.step_cap); });
        add("env.pomdp_file", [](RunConfig& c, const std::string& v) { c.env.pomdp_file = v; },
            [](const RunConfig& c) { return c.env.pomdp_file; });
        add("env.success_reward",
            [](RunConfig& c, const std::string& v) {
                c.env.success_reward = parse_f64(v, "env.success_reward");
            },
            [](const RunConfig& c) { return num_str(c.env.success_reward); });
        // model
        add("model.kind",
            [](RunConfig& c, const std::string& v) {
                if (v == "dtqn") c.model.kind = ModelKind::dtqn;
                else if (v == "attn") c.model.kind = ModelKind::attn;
                else if (v == "dqn_mlp") c.model.kind = ModelKind::dqn_mlp;
                else throw config_error("model.kind: unknown kind '" + v + "'");
            },
            [](const RunConfig& c) { return to_string(c.model.kind); });
        add("model.d_model",
            [](RunConfig& c, const std::string& v) {
                c.model.d_model = static_cast<int>(parse_i64(v, "model.d_model"));
            },
            [](const RunConfig& c) { return num_str(c.model.d_model); });
        add("model.n_heads",
            [](RunConfig& c, const std::string& v) {
                c.model.n_heads = static_cast<int>(parse_i64(v, "model.n_heads"));
            },
            [](const RunConfig& c) { return num_str(c.model.n_heads); });
        add("model.n_layers",
            [](RunConfig& c, const std::string& v) {
                c.model.n_layers = static_cast<int>(parse_i64(v, "model.n_layers"));
            },
            [](const RunConfig& c) { return num_str(c.model.n_layers); });
        add("model.embed_per_feature",
            [](RunConfig& c, const std::string& v) {
                c.model.embed_per_feature =
                    static_cast<int>(parse_i64(v, "model.embed_per_feature"));
            },
            [](const RunConfig& c) { return num_str(c.model.embed_per_feature); });
        add("model.pos",
            [](RunConfig& c, const std::string& v) {
                if (v == "learned") c.model.pos_kind = PosKind::learned;
                else if (v == "sinusoidal") c.model.pos_kind = PosKind::sinusoidal;
                else if (v == "none") c.model.pos_kind = PosKind::none;
                else throw config_error("model.pos: unknown positional encoding '" + v + "'");
            },
            [](const RunConfig& c) { return to_string(c.model.pos_kind); });
        add("model.combine",
            [](RunConfig& c, const std::string& v) {
                if (v == "residual") c.model.combine_kind = CombineKind::residual;
                else if (v == "gru_gate") c.model.combine_kind = CombineKind::gru_gate;
                else throw config_error("model.combine: unknown combine kind '" + v + "'");
            },
            [](const RunConfig& c) { return to_string(c.model.combine_kind); });
        add("model.norm",
            [](RunConfig& c, const std::string& v) {
                if (v == "post") c.model.norm_placement = NormPlacement::post;
                else if (v == "identity_map") c.model.norm_placement = NormPlacement::identity_map;
                else throw config_error("model.norm: unknown norm placement '" + v + "'");
            },
            [](const RunConfig& c) { return to_string(c.model.norm_placement); });
        // agent
        add("agent.lr",
            [](RunConfig& c, const std::string& v) { c.agent.lr = parse_f64(v, "agent.lr"); },
            [](const RunConfig& c) { return num_str(c.agent.lr); });
        add("agent.batch_size",
            [](RunConfig& c, const std::string& v) {
                c.agent.batch_size = static_cast<int>(parse_i64(v, "agent.batch_size"));
            },
            [](const RunConfig& c) { return num_str(c.agent.batch_size); });
        add("agent.buffer_capacity",
            [](RunConfig& c, const std::string& v) {
                c.agent.buffer_capacity = parse_i64(v, "agent.buffer_capacity");
            },
            [](const RunConfig& c) { return num_str(c.agent.buffer_capacity); });
        add("agent.target_update_period",
            [](RunConfig& c, const std::string& v) {
                c.agent.target_update_period = parse_i64(v, "agent.target_update_period");
            },
            [](const RunConfig& c) { return num_str(c.agent.target_update_period); });
        add("agent.context_len",
            [](RunConfig& c, const std::string& v) {
                c.agent.context_len = static_cast<int>(parse_i64(v, "agent.context_len"));
            },
            [](const RunConfig& c) { return num_str(c.agent.context_len); });
        add("agent.total_steps",
            [](RunConfig& c, const std::string& v) {
                c.agent.total_steps = parse_i64(v, "agent.total_steps");
            },
            [](const RunConfig& c) { return num_str(c.agent.total_steps); });
        add("agent.prefill",
            [](RunConfig& c, const std::string& v) {
                c.agent.prefill = parse_i64(v, "agent.prefill");
            },
            [](const RunConfig& c) { return num_str(c.agent.prefill); });
        add("agent.eps_start",
            [](RunConfig& c, const std::string& v) {
                c.agent.eps_start = parse_f64(v, "agent.eps_start");
            },
            [](const RunConfig& c) { return num_str(c.agent.eps_start); });
        add("agent.eps_end",
            [](RunConfig& c, const std::string& v) {
                c.agent.eps_end = parse_f64(v, "agent.eps_end");
            },
            [](const RunConfig& c) { return num_str(c.agent.eps_end); });
        add("agent.eps_anneal_fraction",
            [](RunConfig& c, const std::string& v) {
                c.agent.eps_anneal_fraction = parse_f64(v, "agent.eps_anneal_fraction");
            },
            [](const RunConfig& c) { return num_str(c.agent.eps_anneal_fraction); });
        add("agent.gamma",
            [](RunConfig& c, const std::string& v) {
                c.agent.gamma = parse_f64(v, "agent.gamma");
            },
            [](const RunConfig& c) { return num_str(c.agent.gamma); });
        add("agent.intermediate_q",
            [](RunConfig& c, const std::string& v) {
                c.agent.intermediate_q = parse_bool(v, "agent.intermediate_q");
            },
            [](const RunConfig& c) { return c.agent.intermediate_q ? "true" : "false"; });
        add("agent.double_dqn",
            [](RunConfig& c, const std::string& v) {
                c.agent.double_dqn = parse_bool(v, "agent.double_dqn");
            },
            [](const RunConfig& c) { return c.agent.double_dqn ? "true" : "false"; });
        add("agent.grad_clip",
            [](RunConfig& c, const std::string& v) {
                c.agent.grad_clip = parse_f64(v, "agent.grad_clip");
            },
            [](const RunConfig& c) { return num_str(c.agent.grad_clip); });
        // harness
        add("harness.seed",
            [](RunConfig& c, const std::string& v) {
                c.harness.seed = static_cast<uint64_t>(parse_i64(v, "harness.seed"));
            },
            [](const RunConfig& c) { return num_str(c.harness.seed); });
        add("harness.eval_period",
            [](RunConfig& c, const std::string& v) {
                c.harness.eval_period = parse_i64(v, "harness.eval_period");
            },
            [](const RunConfig& c) { return num_str(c.harness.eval_period); });
        add("harness.eval_episodes",
            [](RunConfig& c, const std::string& v) {
                c.harness.eval_episodes = static_cast<int>(parse_i64(v, "harness.eval_episodes"));
            },
            [](const RunConfig& c) { return num_str(c.harness.eval_episodes); });
        add("harness.final_eval_episodes",
            [](RunConfig& c, const std::string& v) {
                c.harness.final_eval_episodes =
                    static_cast<int>(parse_i64(v, "harness.final_eval_episodes"));
            },
            [](const RunConfig& c) { return num_str(c.harness.final_eval_episodes); });
        add("harness.early_stop_success",
            [](RunConfig& c, const std::string& v) {
                c.harness.early_stop_success = parse_f64(v, "harness.early_stop_success");
            },
            [](const RunConfig& c) { return num_str(c.harness.early_stop_success); });
        add("harness.checkpoint_period",
            [](RunConfig& c, const std::string& v) {
                c.harness.checkpoint_period = parse_i64(v, "harness.checkpoint_period");
            },
            [](const RunConfig& c) { return num_str(c.harness.checkpoint_period); });
        add("harness.stop_at_step",
            [](RunConfig& c, const std::string& v) {
                c.harness.stop_at_step = parse_i64(v, "harness.stop_at_step");
            },
            [](const RunConfig& c) { return num_str(c.harness.stop_at_step); });
        add("harness.output_dir",
            [](RunConfig& c, const std::string& v) { c.harness.output_dir = v; },
            [](const RunConfig& c) { return c.harness.output_dir; });
        return f;
    }();
    return table;
}

const Field* find_field(const std::string& key) {
    for (const Field& f : fields())
        if (f.key == key) return &f;
    return nullptr;
}

void set_key(RunConfig& cfg, const std::string& key, const std::string& value,
             const std::string& where) {
    const Field* f = find_field(key);
    if (f == nullptr) throw config_error(where + ": unknown key '" + key + "'");
    f->set(cfg, value);
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::string& where) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string at = where + ":" + std::to_string(line_no);
        if (line.front() == '[') {
            if (line.back() != ']') throw config_error(at + ": unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section != "env" && section != "model" && section != "agent" &&
                section != "harness")
                throw config_error(at + ": unknown section '" + section + "'");
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error(at + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty())
            throw config_error(at + ": key '" + key + "' appears before any [section]");
        set_key(cfg, section + "." + key, value, at);
    }
    return cfg;
}

void apply_override(RunConfig& cfg, const std::string& override_expr) {
    const size_t eq = override_expr.find('=');
    if (eq == std::string::npos)
        throw config_error("override '" + override_expr + "': expected section.key=value");
    const std::string key = trim(override_expr.substr(0, eq));
    const std::string value = trim(override_expr.substr(eq + 1));
    if (key.find('.') == std::string::npos)
        throw config_error("override '" + override_expr + "': key must be section.key");
    set_key(cfg, key, value, "override");
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    RunConfig cfg = parse_run_config(ss.str(), path);
    for (const std::string& o : overrides) apply_override(cfg, o);
    return cfg;
}

std::string serialize_run_config(const RunConfig& cfg) {
    std::ostringstream out;
    std::string section;
    for (const Field& f : fields()) {
        const std::string sec = f.key.substr(0, f.key.find('.'));
        const std::string name = f.key.substr(f.key.find('.') + 1);
        if (sec != section) {
            if (!section.empty()) out << "\n";
            out << "[" << sec << "]\n";
            section = sec;
        }
        out << name << " = " << f.get(cfg) << "\n";
    }
    return out.str();
}

}  // namespace dtqn
