#pragma once

// Off-policy training loop, greedy evaluation, metrics logging, versioned
// checkpoints with bit-exact resume, and the attention / positional-encoding
// similarity exports. File formats are documented in docs/formats.md.

#include "dtqn/agent.hpp"
#include "dtqn/config.hpp"
#include "dtqn/env.hpp"
#include "dtqn/model.hpp"
#include "dtqn/replay.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace dtqn {

struct EvalResult {
    double success_rate = 0.0;
    double mean_return = 0.0;
};

struct RunArtifacts {
    std::string metrics_path;
    std::string checkpoint_path;
    EvalResult final_eval;
    int64_t env_steps = 0;        // training steps completed
    int64_t updates = 0;          // gradient updates performed
    int64_t episodes = 0;         // training episodes finished
    std::vector<int64_t> sync_steps;
    bool stopped_early = false;
};

// Rolls `episodes` fresh episodes under an arbitrary policy over the
// observation history; returns the success fraction and mean undiscounted
// return.
using HistoryPolicy = std::function<int(const std::vector<Observation>&)>;
EvalResult evaluate_policy(Env& env, int episodes, Rng& rng, const HistoryPolicy& policy);

// Greedy policy over fresh episodes with an independent rng.
EvalResult evaluate(const Model<real>& m, Env& env, int episodes, Rng& rng);

// Complete resumable training state.
struct TrainState {
    RunConfig cfg;
    std::unique_ptr<Env> env;
    Model<real> online, target;
    AdamState<real> adam;
    ReplayBuffer buffer;
    Rng rng;  // the training stream: env dynamics, exploration, sampling
    int64_t env_step = 0;
    int64_t episodes = 0;
    double loss_accum = 0.0;
    int64_t loss_count = 0;
    std::vector<Observation> history;  // live episode observations

    static TrainState fresh(const RunConfig& cfg);

private:
    TrainState(RunConfig cfg_full, std::unique_ptr<Env> env_in, const ModelConfig& mc);
    friend TrainState load_checkpoint(const std::string& path);
};

// Fills model config fields that come from the environment and mirrors
// agent.context_len into the model.
ModelConfig complete_model_config(const RunConfig& cfg, const Env& env);

void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

// Runs (or resumes) training per the config schedule. Resume requires the
// checkpoint's env/model/agent sections to match cfg textually.
RunArtifacts train(const RunConfig& cfg, const std::string& resume_checkpoint = "");

// Rolls one greedy episode and writes every captured attention row
// (raw weights; readers apply any display threshold).
void export_attention(const Model<real>& m, Env& env, uint64_t seed, const std::string& path);

// Writes the k x k cosine-similarity matrix of the positional encodings.
void export_posenc_similarity(const Model<real>& m, const std::string& path);

// Export readers / schema validators.
struct AttentionExportInfo {
    int k = 0, layers = 0, heads = 0;
    int64_t decision_steps = 0;
    int64_t entries = 0;
};
AttentionExportInfo validate_attention_export(const std::string& path);
MatX<double> read_posenc_similarity(const std::string& path);

}  // namespace dtqn
