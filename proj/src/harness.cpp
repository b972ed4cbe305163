#include "dtqn/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace dtqn {

namespace {

constexpr char kCheckpointMagic[8] = {'D', 'T', 'Q', 'N', 'C', 'K', 'P', '1'};
constexpr uint32_t kCheckpointVersion = 1;

// rng stream tags hanging off the run seed
constexpr uint64_t kTagInit = 0xA001;
constexpr uint64_t kTagTrain = 0xA002;
constexpr uint64_t kTagEvalBase = 0xE000000000000000ULL;
constexpr uint64_t kTagFinalEval = 0xF000000000000000ULL;

// ---------------------------------------------------------------------------
// little-endian byte buffer helpers

void put_bytes(std::string& out, const void* p, size_t n) {
    out.append(static_cast<const char*>(p), n);
}
void put_u32(std::string& out, uint32_t v) { put_bytes(out, &v, 4); }
void put_u64(std::string& out, uint64_t v) { put_bytes(out, &v, 8); }
void put_f64(std::string& out, double v) { put_bytes(out, &v, 8); }
void put_str(std::string& out, const std::string& s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    out.append(s);
}

struct Cursor {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > buf.size()) throw config_error("checkpoint truncated");
    }
    void read(void* p, size_t n) {
        need(n);
        std::memcpy(p, buf.data() + pos, n);
        pos += n;
    }
    uint32_t u32() {
        uint32_t v;
        read(&v, 4);
        return v;
    }
    uint64_t u64() {
        uint64_t v;
        read(&v, 8);
        return v;
    }
    double f64() {
        double v;
        read(&v, 8);
        return v;
    }
    std::string str() {
        const uint32_t n = u32();
        need(n);
        std::string s(buf.data() + pos, n);
        pos += n;
        return s;
    }
};

std::string section_text(const RunConfig& cfg, const char* section) {
    // extract one [section] block from the canonical echo
    const std::string echo = serialize_run_config(cfg);
    const std::string header = std::string("[") + section + "]";
    const size_t begin = echo.find(header);
    if (begin == std::string::npos) return "";
    size_t end = echo.find("\n[", begin);
    if (end == std::string::npos) end = echo.size();
    return echo.substr(begin, end - begin);
}

std::string metrics_header() {
    return "env_step,episodes,train_loss,eval_success_rate,eval_mean_return,epsilon\n";
}

std::string format_metrics_row(int64_t env_step, int64_t episodes, double train_loss,
                               double success, double mean_return, double eps) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%lld,%lld,%.10g,%.10g,%.10g,%.10g\n",
                  static_cast<long long>(env_step), static_cast<long long>(episodes),
                  train_loss, success, mean_return, eps);
    return buf;
}

}  // namespace

ModelConfig complete_model_config(const RunConfig& cfg, const Env& env) {
    ModelConfig mc = cfg.model;
    mc.context_len = cfg.agent.context_len;
    mc.action_count = env.action_count();
    mc.obs = env.obs_spec();
    mc.apply_kind();
    mc.validate();
    return mc;
}

TrainState::TrainState(RunConfig cfg_full, std::unique_ptr<Env> env_in, const ModelConfig& mc)
    : cfg(std::move(cfg_full)),
      env(std::move(env_in)),
      online(mc),
      target(mc),
      adam(online),
      buffer(cfg.agent.buffer_capacity, mc.obs.features()),
      rng(Rng(cfg.harness.seed).derive(kTagTrain)) {}

TrainState TrainState::fresh(const RunConfig& cfg_in) {
    RunConfig cfg = cfg_in;
    cfg.agent.validate();
    cfg.harness.validate();
    std::unique_ptr<Env> env = make_env(cfg.env);
    const ModelConfig mc = complete_model_config(cfg, *env);
    cfg.model = mc;
    TrainState st(std::move(cfg), std::move(env), mc);
    Rng init_rng = Rng(st.cfg.harness.seed).derive(kTagInit);
    st.online.init(init_rng);
    sync_target(st.online, st.target);
    return st;
}

EvalResult evaluate_policy(Env& env, int episodes, Rng& rng, const HistoryPolicy& policy) {
    if (episodes < 1) throw config_error("evaluate: episodes must be >= 1");
    int successes = 0;
    double return_sum = 0.0;
    std::vector<Observation> history;
    for (int ep = 0; ep < episodes; ++ep) {
        history.clear();
        history.push_back(env.reset(rng));
        while (!env.done()) {
            StepResult r = env.step(policy(history), rng);
            return_sum += r.reward;
            history.push_back(r.obs);
            if (r.done && r.success) ++successes;
        }
    }
    return {static_cast<double>(successes) / episodes, return_sum / episodes};
}

EvalResult evaluate(const Model<real>& m, Env& env, int episodes, Rng& rng) {
    return evaluate_policy(env, episodes, rng, [&m](const std::vector<Observation>& history) {
        return greedy_action(m, history);
    });
}

// ---------------------------------------------------------------------------
// checkpoints

void save_checkpoint(const TrainState& state, const std::string& path) {
    std::string body;
    put_u32(body, kCheckpointVersion);
    put_str(body, serialize_run_config(state.cfg));
    put_u64(body, static_cast<uint64_t>(state.env_step));
    put_u64(body, static_cast<uint64_t>(state.episodes));
    put_f64(body, state.loss_accum);
    put_u64(body, static_cast<uint64_t>(state.loss_count));

    std::ostringstream rng_ss;
    state.rng.save(rng_ss);
    put_str(body, rng_ss.str());

    std::ostringstream env_ss;
    state.env->save_state(env_ss);
    put_str(body, env_ss.str());

    const int features = state.online.config().obs.features();
    put_u32(body, static_cast<uint32_t>(state.history.size()));
    put_u32(body, static_cast<uint32_t>(features));
    for (const Observation& o : state.history)
        put_bytes(body, o.data(), sizeof(float) * o.size());

    put_u64(body, static_cast<uint64_t>(state.adam.t));
    put_f64(body, state.adam.beta1);
    put_f64(body, state.adam.beta2);
    put_f64(body, state.adam.eps);

    // named parameter blocks, little-endian f32
    auto append_blocks = [&body](const char* prefix, Model<real>& m) {
        for (auto& [name, mat] : m.param_refs()) {
            put_str(body, std::string(prefix) + name);
            put_u32(body, static_cast<uint32_t>(mat->rows()));
            put_u32(body, static_cast<uint32_t>(mat->cols()));
            put_bytes(body, mat->data(), sizeof(real) * static_cast<size_t>(mat->size()));
        }
    };
    auto& st = const_cast<TrainState&>(state);  // param_refs is non-const
    const uint32_t blocks = static_cast<uint32_t>(st.online.param_refs().size());
    put_u32(body, 4 * blocks);
    append_blocks("online/", st.online);
    append_blocks("target/", st.target);
    append_blocks("adam_m/", st.adam.m);
    append_blocks("adam_v/", st.adam.v);

    std::ostringstream buf_ss;
    state.buffer.save(buf_ss);
    put_str(body, buf_ss.str());

    std::string file(kCheckpointMagic, sizeof(kCheckpointMagic));
    file += body;
    const uint64_t checksum = fnv1a64(body.data(), body.size());
    put_u64(file, checksum);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw config_error("cannot write checkpoint: " + path);
    out.write(file.data(), static_cast<std::streamsize>(file.size()));
    if (!out) throw config_error("checkpoint write failed: " + path);
}

TrainState load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw config_error("cannot open checkpoint: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string file = ss.str();

    if (file.size() < sizeof(kCheckpointMagic) + 8 ||
        std::memcmp(file.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
        throw config_error("not a checkpoint file: " + path);
    const std::string body = file.substr(sizeof(kCheckpointMagic), file.size() - 16);
    uint64_t stored = 0;
    std::memcpy(&stored, file.data() + file.size() - 8, 8);
    if (fnv1a64(body.data(), body.size()) != stored)
        throw config_error("checkpoint checksum mismatch (truncated or corrupt): " + path);

    Cursor cur{body};
    const uint32_t version = cur.u32();
    if (version != kCheckpointVersion)
        throw config_error("unsupported checkpoint version " + std::to_string(version));

    RunConfig cfg = parse_run_config(cur.str(), path + "(config echo)");
    std::unique_ptr<Env> env = make_env(cfg.env);
    const ModelConfig mc = complete_model_config(cfg, *env);
    TrainState st(std::move(cfg), std::move(env), mc);

    st.env_step = static_cast<int64_t>(cur.u64());
    st.episodes = static_cast<int64_t>(cur.u64());
    st.loss_accum = cur.f64();
    st.loss_count = static_cast<int64_t>(cur.u64());

    std::istringstream rng_ss(cur.str());
    st.rng.load(rng_ss);

    std::istringstream env_ss(cur.str());
    st.env->load_state(env_ss);

    const uint32_t hist = cur.u32();
    const uint32_t features = cur.u32();
    if (static_cast<int>(features) != mc.obs.features())
        throw config_error("checkpoint feature width mismatch vs. config");
    st.history.assign(hist, Observation(features, 0.0f));
    for (auto& o : st.history) cur.read(o.data(), sizeof(float) * features);

    st.adam.t = static_cast<int64_t>(cur.u64());
    st.adam.beta1 = cur.f64();
    st.adam.beta2 = cur.f64();
    st.adam.eps = cur.f64();

    const uint32_t block_count = cur.u32();
    auto load_blocks = [&](const char* prefix, Model<real>& m) {
        for (auto& [name, mat] : m.param_refs()) {
            const std::string stored_name = cur.str();
            if (stored_name != std::string(prefix) + name)
                throw config_error("checkpoint block order mismatch: expected " +
                                   std::string(prefix) + name + ", found " + stored_name);
            const uint32_t rows = cur.u32(), cols = cur.u32();
            if (rows != static_cast<uint32_t>(mat->rows()) ||
                cols != static_cast<uint32_t>(mat->cols()))
                throw config_error("checkpoint shape mismatch vs. config at " + stored_name);
            cur.read(mat->data(), sizeof(real) * static_cast<size_t>(mat->size()));
        }
    };
    if (block_count != 4 * st.online.param_refs().size())
        throw config_error("checkpoint block count mismatch vs. config");
    load_blocks("online/", st.online);
    load_blocks("target/", st.target);
    load_blocks("adam_m/", st.adam.m);
    load_blocks("adam_v/", st.adam.v);

    std::istringstream buf_ss(cur.str());
    st.buffer.load(buf_ss);
    return st;
}

// ---------------------------------------------------------------------------
// training loop

RunArtifacts train(const RunConfig& cfg_in, const std::string& resume_checkpoint) {
    const bool resuming = !resume_checkpoint.empty();
    RunConfig cfg = cfg_in;
    TrainState st = resuming ? load_checkpoint(resume_checkpoint) : TrainState::fresh(cfg);
    if (resuming) {
        // only harness-section settings may change across a resume; the
        // echo serializes just the user-settable model fields, so wholesale
        // section comparison is exact
        RunConfig probe = st.cfg;
        probe.env = cfg_in.env;
        probe.model = cfg_in.model;
        probe.model.apply_kind();
        probe.agent = cfg_in.agent;
        for (const char* sec : {"env", "model", "agent"})
            if (section_text(st.cfg, sec) != section_text(probe, sec))
                throw config_error(std::string("resume: [") + sec +
                                   "] section differs from the checkpoint");
        st.cfg.harness = cfg.harness;
    }
    const Hyperparams& h = st.cfg.agent;
    const HarnessConfig& hc = st.cfg.harness;

    namespace fs = std::filesystem;
    fs::create_directories(hc.output_dir);
    const std::string metrics_path = hc.output_dir + "/metrics.csv";
    const std::string checkpoint_path = hc.output_dir + "/checkpoint.bin";
    {
        std::ofstream echo(hc.output_dir + "/config.cfg", std::ios::trunc);
        echo << serialize_run_config(st.cfg);
    }
    const bool append_metrics = resuming && fs::exists(metrics_path);
    std::ofstream metrics(metrics_path,
                          append_metrics ? std::ios::app : std::ios::trunc);
    if (!metrics) throw config_error("cannot open metrics file: " + metrics_path);
    if (!append_metrics) metrics << metrics_header() << std::flush;
    std::ofstream timing(hc.output_dir + "/timing.log", std::ios::app);
    const auto wall_start = std::chrono::steady_clock::now();

    RunArtifacts artifacts;
    artifacts.metrics_path = metrics_path;
    artifacts.checkpoint_path = checkpoint_path;

    if (!resuming) {
        if (h.prefill > 0) {
            prefill_random(*st.env, st.buffer, h.prefill, st.rng, &st.history);
        } else {
            st.history.clear();
            st.history.push_back(st.env->reset(st.rng));
        }
    }

    const Model<real>& online = st.online;
    ForwardTrace<real> loss_trace;
    TdWork<real> td_work;
    Model<real> grads = zeros_like(st.online);
    MatX<real> q, dq, obs_cast;

    const int64_t stop_at =
        hc.stop_at_step > 0 ? std::min(hc.stop_at_step, h.total_steps) : h.total_steps;

    while (st.env_step < stop_at) {
        // one environment step under the epsilon-greedy behavior policy
        const int action = select_action(online, st.history, st.env_step, st.rng, h);
        const Observation obs_before = st.history.back();
        StepResult r = st.env->step(action, st.rng);
        st.buffer.record({obs_before, action, r.reward, r.obs, r.done});
        if (r.done) {
            ++st.episodes;
            st.history.clear();
            st.history.push_back(st.env->reset(st.rng));
        } else {
            st.history.push_back(r.obs);
        }

        // one gradient update per environment step
        ContextBatch batch = st.buffer.sample_context_batch(h.context_len, h.batch_size, st.rng);
        const std::vector<real> targets = td_targets(batch, st.online, st.target, h, &td_work);
        obs_cast = batch.obs;
        st.online.forward(obs_cast, batch.batch, loss_trace, q);
        const auto mask = loss_mask(batch, h.intermediate_q);
        const double loss = intermediate_q_loss<real>(q, targets, batch.actions, mask, &dq);
        if (!std::isfinite(loss)) {
            metrics << format_metrics_row(st.env_step + 1, st.episodes, loss, -1.0, 0.0,
                                          epsilon(h, st.env_step + 1))
                    << std::flush;
            throw diagnostic_error("train: non-finite loss at step " +
                                   std::to_string(st.env_step + 1));
        }
        grads.set_zero();
        st.online.backward(dq, loss_trace, grads);
        clip_gradients(grads, h.grad_clip);
        optimize_step(st.online, grads, st.adam, h.lr);
        ++artifacts.updates;

        st.env_step += 1;
        st.loss_accum += loss;
        st.loss_count += 1;

        if (st.env_step % h.target_update_period == 0) {
            sync_target(st.online, st.target);
            artifacts.sync_steps.push_back(st.env_step);
        }

        if (st.env_step % hc.eval_period == 0) {
            std::unique_ptr<Env> eval_env = make_env(st.cfg.env);
            Rng eval_rng = Rng(hc.seed).derive(kTagEvalBase + static_cast<uint64_t>(st.env_step));
            const EvalResult ev = evaluate(online, *eval_env, hc.eval_episodes, eval_rng);
            const double mean_loss =
                st.loss_count > 0 ? st.loss_accum / static_cast<double>(st.loss_count) : 0.0;
            metrics << format_metrics_row(st.env_step, st.episodes, mean_loss, ev.success_rate,
                                          ev.mean_return, epsilon(h, st.env_step))
                    << std::flush;
            const double wall =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start)
                    .count();
            timing << st.env_step << " " << wall << "\n" << std::flush;
            st.loss_accum = 0.0;
            st.loss_count = 0;

            if (hc.early_stop_success > 0.0 && ev.success_rate >= hc.early_stop_success) {
                Rng confirm_rng =
                    Rng(hc.seed).derive(kTagEvalBase + 0x1000000 + static_cast<uint64_t>(st.env_step));
                std::unique_ptr<Env> confirm_env = make_env(st.cfg.env);
                const EvalResult confirm =
                    evaluate(online, *confirm_env, hc.final_eval_episodes, confirm_rng);
                if (confirm.success_rate >= hc.early_stop_success) {
                    artifacts.stopped_early = true;
                    break;
                }
            }
        }

        if (hc.checkpoint_period > 0 && st.env_step % hc.checkpoint_period == 0)
            save_checkpoint(st, checkpoint_path);
    }

    save_checkpoint(st, checkpoint_path);

    Rng final_rng = Rng(hc.seed).derive(kTagFinalEval + static_cast<uint64_t>(st.env_step));
    std::unique_ptr<Env> final_env = make_env(st.cfg.env);
    artifacts.final_eval = evaluate(online, *final_env, hc.final_eval_episodes, final_rng);
    artifacts.env_steps = st.env_step;
    artifacts.episodes = st.episodes;
    return artifacts;
}

// ---------------------------------------------------------------------------
// exports

void export_attention(const Model<real>& m, Env& env, uint64_t seed, const std::string& path) {
    if (m.config().kind == ModelKind::dqn_mlp)
        throw not_ready_error("export_attention: model has no attention weights");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw config_error("cannot write attention export: " + path);

    const int k = m.config().context_len;
    Rng rng(seed);
    std::vector<Observation> history{env.reset(rng)};
    std::ostringstream body;
    int64_t steps = 0;
    while (!env.done()) {
        int last = 0;
        MatX<real> window =
            history_window<real>(history, k, m.config().obs.features(), &last);
        const QOutput<real> qo = dtqn_forward(m, window, true);
        for (size_t l = 0; l < qo.attention.size(); ++l)
            for (size_t hd = 0; hd < qo.attention[l].size(); ++hd) {
                const MatX<real>& a = qo.attention[l][hd];
                for (int i = 0; i < k; ++i) {
                    // renormalize the prefix in double so written rows sum
                    // to 1 beyond single-precision drift
                    double sum = 0.0;
                    for (int j = 0; j <= i; ++j) sum += static_cast<double>(a(i, j));
                    for (int j = 0; j <= i; ++j) {
                        char buf[96];
                        std::snprintf(buf, sizeof(buf), "%lld %zu %zu %d %d %.10g\n",
                                      static_cast<long long>(steps), l, hd, i, j,
                                      static_cast<double>(a(i, j)) / sum);
                        body << buf;
                    }
                }
            }
        const int action = argmax_row<real>(RowX<real>(q_last(qo, last)));
        StepResult r = env.step(action, rng);
        history.push_back(r.obs);
        ++steps;
    }
    out << "# dtqn-attn v1\n";
    out << "# env=" << env.id() << " seed=" << seed << " k=" << k
        << " layers=" << m.config().n_layers << " heads=" << m.config().n_heads
        << " steps=" << steps << "\n";
    out << "# columns: step layer head row col weight\n";
    out << "# raw weights; any display threshold (e.g. 0.2) is reader-side\n";
    out << body.str();
}

AttentionExportInfo validate_attention_export(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open attention export: " + path);
    std::string line;
    if (!std::getline(in, line) || line != "# dtqn-attn v1")
        throw config_error("attention export: bad or missing version header");
    AttentionExportInfo info;
    if (!std::getline(in, line) ||
        std::sscanf(line.c_str(), "# env=%*s seed=%*s k=%d layers=%d heads=%d steps=%lld",
                    &info.k, &info.layers, &info.heads,
                    reinterpret_cast<long long*>(&info.decision_steps)) != 4)
        throw config_error("attention export: bad metadata header");
    std::getline(in, line);  // columns
    std::getline(in, line);  // threshold note

    // group sums over (step, layer, head, row)
    int64_t prev_step = -1;
    int prev_layer = -1, prev_head = -1, prev_row = -1;
    double row_sum = 0.0;
    auto check_row = [&]() {
        if (prev_row >= 0 && std::abs(row_sum - 1.0) > 1e-6)
            throw config_error("attention export: row sum " + std::to_string(row_sum) +
                               " != 1 at step " + std::to_string(prev_step));
    };
    while (std::getline(in, line)) {
        long long step;
        int layer, head, row, col;
        double w;
        if (std::sscanf(line.c_str(), "%lld %d %d %d %d %lf", &step, &layer, &head, &row, &col,
                        &w) != 6)
            throw config_error("attention export: malformed line: " + line);
        if (col > row) throw config_error("attention export: entry above the diagonal");
        if (row >= info.k || layer >= info.layers || head >= info.heads)
            throw config_error("attention export: index out of declared bounds");
        if (step != prev_step || layer != prev_layer || head != prev_head || row != prev_row) {
            check_row();
            prev_step = step;
            prev_layer = layer;
            prev_head = head;
            prev_row = row;
            row_sum = 0.0;
        }
        row_sum += w;
        ++info.entries;
    }
    check_row();
    if (info.entries == 0) throw config_error("attention export: no entries");
    return info;
}

void export_posenc_similarity(const Model<real>& m, const std::string& path) {
    const MatX<real>& table = m.positional_table();  // throws for pos=none
    const int k = static_cast<int>(table.rows());
    MatX<double> sim(k, k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
            double dot = 0, ni = 0, nj = 0;
            for (int c = 0; c < table.cols(); ++c) {
                dot += static_cast<double>(table(i, c)) * table(j, c);
                ni += static_cast<double>(table(i, c)) * table(i, c);
                nj += static_cast<double>(table(j, c)) * table(j, c);
            }
            sim(i, j) = (ni < 1e-24 || nj < 1e-24) ? 0.0 : dot / std::sqrt(ni * nj);
        }

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw config_error("cannot write posenc export: " + path);
    out << "# dtqn-posenc v1\n";
    out << "# k=" << k << " d_model=" << m.config().d_model
        << " kind=" << to_string(m.config().pos_kind) << "\n";
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
            char buf[48];
            std::snprintf(buf, sizeof(buf), "%.9g%c", sim(i, j), j + 1 == k ? '\n' : ' ');
            out << buf;
        }
    }
}

MatX<double> read_posenc_similarity(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open posenc export: " + path);
    std::string line;
    if (!std::getline(in, line) || line != "# dtqn-posenc v1")
        throw config_error("posenc export: bad or missing version header");
    int k = 0;
    if (!std::getline(in, line) || std::sscanf(line.c_str(), "# k=%d", &k) != 1 || k < 1)
        throw config_error("posenc export: bad metadata header");
    MatX<double> sim(k, k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j)
            if (!(in >> sim(i, j))) throw config_error("posenc export: truncated matrix");
    return sim;
}

}  // namespace dtqn
