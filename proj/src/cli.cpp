#include "dtqn/cli.hpp"

#include "dtqn/config.hpp"
#include "dtqn/harness.hpp"
#include "dtqn/pomdp.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace dtqn {

namespace {

RunConfig load_with_overrides(const std::string& config_path,
                              const std::vector<std::string>& overrides,
                              const std::string& out_dir, int64_t seed) {
    RunConfig cfg = load_run_config(config_path, overrides);
    if (!out_dir.empty()) cfg.harness.output_dir = out_dir;
    if (seed >= 0) cfg.harness.seed = static_cast<uint64_t>(seed);
    return cfg;
}

int do_train(const std::string& config_path, const std::vector<std::string>& overrides,
             const std::string& out_dir, int64_t seed, const std::string& resume) {
    const RunConfig cfg = load_with_overrides(config_path, overrides, out_dir, seed);
    const RunArtifacts art = train(cfg, resume);
    std::printf("steps %lld  episodes %lld  final_success %.4f  final_return %.4f%s\n",
                static_cast<long long>(art.env_steps), static_cast<long long>(art.episodes),
                art.final_eval.success_rate, art.final_eval.mean_return,
                art.stopped_early ? "  (stopped early)" : "");
    std::printf("metrics: %s\ncheckpoint: %s\n", art.metrics_path.c_str(),
                art.checkpoint_path.c_str());
    return 0;
}

int do_eval(const std::string& checkpoint, int episodes, int64_t seed) {
    TrainState st = load_checkpoint(checkpoint);
    const int n = episodes > 0 ? episodes : st.cfg.harness.final_eval_episodes;
    const uint64_t s = seed >= 0 ? static_cast<uint64_t>(seed) : st.cfg.harness.seed + 1;
    Rng rng(s);
    std::unique_ptr<Env> env = make_env(st.cfg.env);
    const EvalResult ev = evaluate(st.online, *env, n, rng);
    std::printf("episodes %d  success_rate %.4f  mean_return %.4f\n", n, ev.success_rate,
                ev.mean_return);
    return 0;
}

int do_export_attention(const std::string& checkpoint, const std::string& out, int64_t seed) {
    TrainState st = load_checkpoint(checkpoint);
    std::unique_ptr<Env> env = make_env(st.cfg.env);
    const uint64_t s = seed >= 0 ? static_cast<uint64_t>(seed) : st.cfg.harness.seed + 2;
    export_attention(st.online, *env, s, out);
    const AttentionExportInfo info = validate_attention_export(out);
    std::printf("wrote %s: %lld decision steps, %lld entries\n", out.c_str(),
                static_cast<long long>(info.decision_steps),
                static_cast<long long>(info.entries));
    return 0;
}

int do_export_posenc(const std::string& checkpoint, const std::string& out) {
    TrainState st = load_checkpoint(checkpoint);
    export_posenc_similarity(st.online, out);
    std::printf("wrote %s\n", out.c_str());
    return 0;
}

int do_pomdp_check(const std::string& path) {
    const PomdpSpec spec = parse_pomdp_file(path);  // includes the stochasticity audit
    std::printf("%s: ok\n", path.c_str());
    std::printf("states %d  actions %d  observations %d  discount %.6g\n", spec.ns(), spec.na(),
                spec.no(), spec.discount);
    std::printf("stochasticity audit passed: all T/O rows and start sum to 1 (tol 1e-6)\n");
    return 0;
}

int do_list_envs() {
    for (const std::string& id : known_env_ids()) std::printf("%s\n", id.c_str());
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& argv) {
    CLI::App app{"transformer Q-network training for small POMDP benchmarks"};
    app.require_subcommand(1);

    std::string config_path, out_dir, resume, checkpoint, out_file, pomdp_path;
    std::vector<std::string> overrides;
    int64_t seed = -1;
    int episodes = 0;

    CLI::App* train_cmd = app.add_subcommand("train", "train a model from a config file");
    train_cmd->add_option("--config", config_path, "run config file")->required();
    train_cmd->add_option("-O,--override", overrides, "override: section.key=value");
    train_cmd->add_option("--out", out_dir, "output directory (overrides harness.output_dir)");
    train_cmd->add_option("--seed", seed, "seed (overrides harness.seed)");
    train_cmd->add_option("--resume", resume, "checkpoint to resume from");

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint greedily");
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("--episodes", episodes, "number of episodes");
    eval_cmd->add_option("--seed", seed, "evaluation seed");

    CLI::App* exa = app.add_subcommand("export-attention",
                                       "greedy episode attention-weight export");
    exa->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    exa->add_option("--out", out_file, "output file")->required();
    exa->add_option("--seed", seed, "episode seed");

    CLI::App* exp = app.add_subcommand("export-posenc",
                                       "positional-encoding cosine-similarity export");
    exp->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    exp->add_option("--out", out_file, "output file")->required();

    CLI::App* chk = app.add_subcommand("pomdp-check", "parse and audit a .pomdp file");
    chk->add_option("file", pomdp_path, ".pomdp file")->required();

    app.add_subcommand("list-envs", "list built-in environment ids");

    std::vector<char*> cargs;
    cargs.reserve(argv.size());
    for (const std::string& a : argv) cargs.push_back(const_cast<char*>(a.c_str()));

    try {
        app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (app.got_subcommand("train"))
            return do_train(config_path, overrides, out_dir, seed, resume);
        if (app.got_subcommand("eval")) return do_eval(checkpoint, episodes, seed);
        if (app.got_subcommand("export-attention"))
            return do_export_attention(checkpoint, out_file, seed);
        if (app.got_subcommand("export-posenc")) return do_export_posenc(checkpoint, out_file);
        if (app.got_subcommand("pomdp-check")) return do_pomdp_check(pomdp_path);
        if (app.got_subcommand("list-envs")) return do_list_envs();
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

}  // namespace dtqn
