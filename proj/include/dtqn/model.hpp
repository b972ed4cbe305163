#pragma once

// The Q-network: per-feature observation embedding, positional encoding,
// a stack of causally masked transformer layers with configurable combine
// step and LayerNorm placement, and an affine head producing one Q row per
// history position. The attention-only and MLP baselines are degenerate
// configurations of the same structure.

#include "dtqn/common.hpp"
#include "dtqn/numerics.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dtqn {

enum class PosKind { learned, sinusoidal, none };
enum class NormPlacement { post, identity_map, off };
enum class ModelKind { dtqn, attn, dqn_mlp };

inline const char* to_string(PosKind k) {
    switch (k) {
        case PosKind::learned: return "learned";
        case PosKind::sinusoidal: return "sinusoidal";
        case PosKind::none: return "none";
    }
    return "?";
}
inline const char* to_string(NormPlacement k) {
    switch (k) {
        case NormPlacement::post: return "post";
        case NormPlacement::identity_map: return "identity_map";
        case NormPlacement::off: return "off";
    }
    return "?";
}
inline const char* to_string(ModelKind k) {
    switch (k) {
        case ModelKind::dtqn: return "dtqn";
        case ModelKind::attn: return "attn";
        case ModelKind::dqn_mlp: return "dqn_mlp";
    }
    return "?";
}

struct ModelConfig {
    ModelKind kind = ModelKind::dtqn;
    int d_model = 128;
    int n_heads = 8;
    int n_layers = 2;
    int context_len = 50;
    int embed_per_feature = 8;
    PosKind pos_kind = PosKind::learned;
    CombineKind combine_kind = CombineKind::residual;
    NormPlacement norm_placement = NormPlacement::post;
    int action_count = 0;
    ObsSpec obs;

    int ffn_hidden() const { return 4 * d_model; }

    // The attention baseline is a single block with no LayerNorm and no
    // skip connection; fold that into the variant axes once.
    void apply_kind() {
        if (kind == ModelKind::attn) {
            n_layers = 1;
            norm_placement = NormPlacement::off;
            combine_kind = CombineKind::pass;
        }
    }

    void validate() const {
        if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
            throw config_error("model: d_model must be positive and divisible by n_heads");
        if (n_layers < 1) throw config_error("model: n_layers must be >= 1");
        if (context_len < 1) throw config_error("model: context_len must be >= 1");
        if (embed_per_feature < 1) throw config_error("model: embed_per_feature must be >= 1");
        if (action_count < 1) throw config_error("model: action_count must be >= 1");
        if (obs.features() < 1) throw config_error("model: observation needs >= 1 feature");
        if (kind != ModelKind::attn && combine_kind == CombineKind::pass)
            throw config_error("model: pass combine is reserved for the attn baseline");
    }
};

template <typename T>
struct LayerParams {
    MhaParams<T> mha;
    LayerNormParams<T> ln1, ln2;
    FfnParams<T> ffn;
    GruGateParams<T> gate1, gate2;
};

template <typename T>
struct ForwardTrace {
    MatX<T> obs;    // (B*k) x features, kept for the embedding-table scatter
    MatX<T> feats;  // (B*k) x embed_width
    MatX<T> e0;     // (B*k) x d, embeddings + positional encodings
    struct Layer {
        MatX<T> in, sub1_in, mha_out, c1, e1, sub2_in, ffn_out, c2, out;
        LayerNormCache<T> lnc1, lnc2;
        MhaCache<T> mha;
        FfnCache<T> ffn;
        GruCache<T> gru1, gru2;
    };
    std::vector<Layer> layers;
    MatX<T> head_in;
    MatX<T> mlp_h1, mlp_h2;  // dqn_mlp only (post-ReLU)
    int batch = 0;
};

template <typename T>
struct QOutput {
    MatX<T> q;  // k x |A|
    // attention[layer][head] is k x k; rows are stochastic over the causal
    // prefix, entries above the diagonal are exactly zero. Empty unless
    // capture was requested.
    std::vector<std::vector<MatX<T>>> attention;
};

template <typename T>
class Model {
public:
    Model() = default;
    explicit Model(const ModelConfig& config) : cfg_(config) {
        cfg_.apply_kind();
        cfg_.validate();
        allocate();
    }

    const ModelConfig& config() const { return cfg_; }

    // Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) for embeddings and affine
    // weights; LayerNorm gain 1 / bias 0; learned positional table zeros so
    // pos=learned starts identical to pos=none; GRU update-gate bias +2.
    void init(Rng& rng) {
        for (auto& tbl : embed_tables_) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(tbl.cols()));
            for (Eigen::Index i = 0; i < tbl.size(); ++i)
                tbl.data()[i] = static_cast<T>(rng.uniform_real(-bound, bound));
        }
        input_proj_.init_uniform(rng);
        if (cfg_.kind == ModelKind::dqn_mlp) {
            mlp2_.init_uniform(rng);
        } else {
            pos_learned_.setZero();
            for (auto& layer : layers_) {
                layer.mha.init_uniform(rng);
                layer.ln1.resize(cfg_.d_model);
                layer.ln2.resize(cfg_.d_model);
                layer.ffn.init_uniform(rng);
                if (cfg_.combine_kind == CombineKind::gru_gate) {
                    layer.gate1.init_uniform(rng);
                    layer.gate2.init_uniform(rng);
                }
            }
        }
        head_.init_uniform(rng);
    }

    ParamRefs<T> param_refs() {
        ParamRefs<T> refs;
        for (size_t f = 0; f < embed_tables_.size(); ++f)
            collect(refs, "embed.f" + std::to_string(f), embed_tables_[f]);
        input_proj_.visit(refs, "input_proj");
        if (cfg_.kind == ModelKind::dqn_mlp) {
            mlp2_.visit(refs, "mlp2");
        } else {
            if (cfg_.pos_kind == PosKind::learned) collect(refs, "pos", pos_learned_);
            for (size_t l = 0; l < layers_.size(); ++l) {
                const std::string p = "layer" + std::to_string(l);
                layers_[l].mha.visit(refs, p + ".mha");
                if (cfg_.norm_placement != NormPlacement::off) {
                    layers_[l].ln1.visit(refs, p + ".ln1");
                    layers_[l].ln2.visit(refs, p + ".ln2");
                }
                layers_[l].ffn.visit(refs, p + ".ffn");
                if (cfg_.combine_kind == CombineKind::gru_gate) {
                    layers_[l].gate1.visit(refs, p + ".gate1");
                    layers_[l].gate2.visit(refs, p + ".gate2");
                }
            }
        }
        head_.visit(refs, "head");
        return refs;
    }

    int64_t param_count() {
        int64_t n = 0;
        for (auto& [name, m] : param_refs()) n += static_cast<int64_t>(m->size());
        return n;
    }

    void set_zero() {
        for (auto& [name, m] : param_refs()) m->setZero();
    }

    // obs is (batch*k) x features, discrete codes stored as their numeric
    // value. Fills q with (batch*k) x |A|.
    void forward(const MatX<T>& obs, int batch, ForwardTrace<T>& trace, MatX<T>& q) const {
        const int k = cfg_.context_len;
        if (obs.rows() != static_cast<Eigen::Index>(batch) * k ||
            obs.cols() != cfg_.obs.features())
            throw config_error("model: observation block shape mismatch");
        trace.batch = batch;
        trace.obs = obs;
        gather_features(obs, trace.feats);

        if (cfg_.kind == ModelKind::dqn_mlp) {
            affine_forward(trace.feats, input_proj_, trace.mlp_h1);
            trace.mlp_h1 = trace.mlp_h1.cwiseMax(T(0));
            affine_forward(trace.mlp_h1, mlp2_, trace.mlp_h2);
            trace.mlp_h2 = trace.mlp_h2.cwiseMax(T(0));
            trace.head_in = trace.mlp_h2;
            affine_forward(trace.head_in, head_, q);
            return;
        }

        affine_forward(trace.feats, input_proj_, trace.e0);
        if (cfg_.pos_kind != PosKind::none) {
            const MatX<T>& pos =
                cfg_.pos_kind == PosKind::learned ? pos_learned_ : pos_sinusoidal_;
            for (int b = 0; b < batch; ++b)
                trace.e0.middleRows(static_cast<Eigen::Index>(b) * k, k) += pos;
        }

        trace.layers.resize(static_cast<size_t>(cfg_.n_layers));
        const MatX<T>* x = &trace.e0;
        const bool pre_norm = cfg_.norm_placement == NormPlacement::identity_map;
        const bool post_norm = cfg_.norm_placement == NormPlacement::post;
        for (int l = 0; l < cfg_.n_layers; ++l) {
            auto& lt = trace.layers[static_cast<size_t>(l)];
            const auto& lp = layers_[static_cast<size_t>(l)];
            lt.in = *x;

            if (pre_norm)
                layer_norm_forward(lt.in, lp.ln1, lt.sub1_in, &lt.lnc1);
            else
                lt.sub1_in = lt.in;
            causal_mha_forward(lt.sub1_in, lp.mha, cfg_.n_heads, k, lt.mha_out, lt.mha);
            combine_forward(lt.mha_out, lt.in, lp.gate1, lt.gru1, lt.c1);
            if (post_norm)
                layer_norm_forward(lt.c1, lp.ln1, lt.e1, &lt.lnc1);
            else
                lt.e1 = lt.c1;

            if (pre_norm)
                layer_norm_forward(lt.e1, lp.ln2, lt.sub2_in, &lt.lnc2);
            else
                lt.sub2_in = lt.e1;
            ffn_forward(lt.sub2_in, lp.ffn, lt.ffn_out, lt.ffn);
            combine_forward(lt.ffn_out, lt.e1, lp.gate2, lt.gru2, lt.c2);
            if (post_norm)
                layer_norm_forward(lt.c2, lp.ln2, lt.out, &lt.lnc2);
            else
                lt.out = lt.c2;
            x = &lt.out;
        }
        trace.head_in = *x;
        affine_forward(trace.head_in, head_, q);
    }

    // Accumulates into `grads`, a zeroed (or running) mirror Model.
    void backward(const MatX<T>& dq, ForwardTrace<T>& trace, Model<T>& grads) const {
        const int k = cfg_.context_len;
        MatX<T> dx;
        affine_backward(trace.head_in, head_, dq, grads.head_, &dx);

        if (cfg_.kind == ModelKind::dqn_mlp) {
            dx = (trace.mlp_h2.array() > T(0)).template cast<T>() * dx.array();
            MatX<T> dh1;
            affine_backward(trace.mlp_h1, mlp2_, dx, grads.mlp2_, &dh1);
            dh1 = (trace.mlp_h1.array() > T(0)).template cast<T>() * dh1.array();
            MatX<T> dfeats;
            affine_backward(trace.feats, input_proj_, dh1, grads.input_proj_, &dfeats);
            scatter_features(trace, dfeats, grads);
            return;
        }

        const bool pre_norm = cfg_.norm_placement == NormPlacement::identity_map;
        const bool post_norm = cfg_.norm_placement == NormPlacement::post;
        MatX<T> d_sub, d_res, tmp;
        for (int l = cfg_.n_layers - 1; l >= 0; --l) {
            auto& lt = trace.layers[static_cast<size_t>(l)];
            const auto& lp = layers_[static_cast<size_t>(l)];
            auto& lg = grads.layers_[static_cast<size_t>(l)];

            MatX<T> dc2;
            if (post_norm)
                layer_norm_backward(lt.lnc2, lp.ln2, dx, lg.ln2, dc2);
            else
                dc2 = dx;
            combine_backward(dc2, lp.gate2, lt.gru2, lg.gate2, d_sub, d_res);
            MatX<T> dsub2_in;
            ffn_backward(lt.ffn, lp.ffn, d_sub, lg.ffn, dsub2_in);
            MatX<T> de1;
            if (pre_norm) {
                layer_norm_backward(lt.lnc2, lp.ln2, dsub2_in, lg.ln2, de1);
                de1 += d_res;
            } else {
                de1 = d_res + dsub2_in;
            }

            MatX<T> dc1;
            if (post_norm)
                layer_norm_backward(lt.lnc1, lp.ln1, de1, lg.ln1, dc1);
            else
                dc1 = de1;
            combine_backward(dc1, lp.gate1, lt.gru1, lg.gate1, d_sub, d_res);
            MatX<T> dsub1_in;
            causal_mha_backward(lt.mha, lp.mha, d_sub, lg.mha, dsub1_in);
            if (pre_norm) {
                layer_norm_backward(lt.lnc1, lp.ln1, dsub1_in, lg.ln1, dx);
                dx += d_res;
            } else {
                dx = d_res + dsub1_in;
            }
        }

        if (cfg_.pos_kind == PosKind::learned) {
            for (int b = 0; b < trace.batch; ++b)
                grads.pos_learned_ += dx.middleRows(static_cast<Eigen::Index>(b) * k, k);
        }
        MatX<T> dfeats;
        affine_backward(trace.feats, input_proj_, dx, grads.input_proj_, &dfeats);
        scatter_features(trace, dfeats, grads);
    }

    // Spec surface: embed one k-row window (E0 of the forward pass).
    MatX<T> embed_history(const MatX<T>& window) const {
        if (window.rows() != cfg_.context_len)
            throw contract_error("embed_history: window must have context_len rows");
        ForwardTrace<T> trace;
        gather_features(window, trace.feats);
        MatX<T> e0;
        affine_forward(trace.feats, input_proj_, e0);
        if (cfg_.kind != ModelKind::dqn_mlp && cfg_.pos_kind != PosKind::none)
            e0 += cfg_.pos_kind == PosKind::learned ? pos_learned_ : pos_sinusoidal_;
        return e0;
    }

    const MatX<T>& positional_table() const {
        if (cfg_.pos_kind == PosKind::learned) return pos_learned_;
        if (cfg_.pos_kind == PosKind::sinusoidal) return pos_sinusoidal_;
        throw not_ready_error("positional_table: pos_kind is none");
    }

private:
    void allocate() {
        const int w = cfg_.obs.embed_width(cfg_.embed_per_feature);
        embed_tables_.clear();
        for (int f = 0; f < cfg_.obs.features(); ++f)
            if (cfg_.obs.discrete(f))
                embed_tables_.emplace_back(
                    MatX<T>::Zero(cfg_.obs.vocab[static_cast<size_t>(f)], cfg_.embed_per_feature));
        input_proj_.resize(w, cfg_.d_model);
        if (cfg_.kind == ModelKind::dqn_mlp) {
            mlp2_.resize(cfg_.d_model, cfg_.d_model);
        } else {
            pos_learned_.setZero(cfg_.context_len, cfg_.d_model);
            if (cfg_.pos_kind == PosKind::sinusoidal) build_sinusoidal();
            layers_.resize(static_cast<size_t>(cfg_.n_layers));
            for (auto& layer : layers_) {
                layer.mha.resize(cfg_.d_model);
                layer.ln1.resize(cfg_.d_model);
                layer.ln2.resize(cfg_.d_model);
                layer.ffn.resize(cfg_.d_model, cfg_.ffn_hidden());
                if (cfg_.combine_kind == CombineKind::gru_gate) {
                    layer.gate1.resize(cfg_.d_model);
                    layer.gate2.resize(cfg_.d_model);
                }
            }
        }
        head_.resize(cfg_.d_model, cfg_.action_count);
    }

    void build_sinusoidal() {
        pos_sinusoidal_.setZero(cfg_.context_len, cfg_.d_model);
        for (int i = 0; i < cfg_.context_len; ++i) {
            for (int j = 0; j < cfg_.d_model; j += 2) {
                const double rate = std::pow(10000.0, static_cast<double>(j) / cfg_.d_model);
                pos_sinusoidal_(i, j) = static_cast<T>(std::sin(i / rate));
                if (j + 1 < cfg_.d_model)
                    pos_sinusoidal_(i, j + 1) = static_cast<T>(std::cos(i / rate));
            }
        }
    }

    // Per-feature embedding lookup for discrete features, raw value for
    // real ones, concatenated.
    void gather_features(const MatX<T>& obs, MatX<T>& feats) const {
        const int w = cfg_.obs.embed_width(cfg_.embed_per_feature);
        feats.resize(obs.rows(), w);
        for (Eigen::Index r = 0; r < obs.rows(); ++r) {
            int col = 0, tbl = 0;
            for (int f = 0; f < cfg_.obs.features(); ++f) {
                if (cfg_.obs.discrete(f)) {
                    const int code = static_cast<int>(obs(r, f));
                    if (code < 0 || code >= cfg_.obs.vocab[static_cast<size_t>(f)])
                        throw contract_error("embed: feature " + std::to_string(f) + " code " +
                                             std::to_string(code) + " outside vocabulary");
                    feats.row(r).segment(col, cfg_.embed_per_feature) =
                        embed_tables_[static_cast<size_t>(tbl)].row(code);
                    col += cfg_.embed_per_feature;
                    ++tbl;
                } else {
                    feats(r, col++) = obs(r, f);
                }
            }
        }
    }

    void scatter_features(const ForwardTrace<T>& trace, const MatX<T>& dfeats,
                          Model<T>& grads) const {
        if (embed_tables_.empty()) return;
        const MatX<T>& obs = trace.obs;
        for (Eigen::Index r = 0; r < dfeats.rows(); ++r) {
            int col = 0, tbl = 0;
            for (int f = 0; f < cfg_.obs.features(); ++f) {
                if (cfg_.obs.discrete(f)) {
                    const int code = static_cast<int>(obs(r, f));
                    grads.embed_tables_[static_cast<size_t>(tbl)].row(code) +=
                        dfeats.row(r).segment(col, cfg_.embed_per_feature);
                    col += cfg_.embed_per_feature;
                    ++tbl;
                } else {
                    ++col;
                }
            }
        }
    }

    ModelConfig cfg_;
    std::vector<MatX<T>> embed_tables_;
    Affine<T> input_proj_;
    MatX<T> pos_learned_;
    MatX<T> pos_sinusoidal_;
    std::vector<LayerParams<T>> layers_;
    Affine<T> head_;
    Affine<T> mlp2_;

    void combine_forward(const MatX<T>& sub, const MatX<T>& res, const GruGateParams<T>& gate,
                         GruCache<T>& cache, MatX<T>& out) const {
        switch (cfg_.combine_kind) {
            case CombineKind::residual: out = sub + res; break;
            case CombineKind::pass: out = sub; break;
            case CombineKind::gru_gate: gru_gate_forward(sub, res, gate, out, cache); break;
        }
    }
    void combine_backward(const MatX<T>& dout, const GruGateParams<T>& gate,
                          const GruCache<T>& cache, GruGateParams<T>& ggrad, MatX<T>& dsub,
                          MatX<T>& dres) const {
        switch (cfg_.combine_kind) {
            case CombineKind::residual:
                dsub = dout;
                dres = dout;
                break;
            case CombineKind::pass:
                dsub = dout;
                dres.setZero(dout.rows(), dout.cols());
                break;
            case CombineKind::gru_gate:
                gru_gate_backward(cache, gate, dout, ggrad, dsub, dres);
                break;
        }
    }
};

// Gradient accumulator shaped like `m`, all blocks zeroed.
template <typename T>
Model<T> zeros_like(const Model<T>& m) {
    Model<T> g(m.config());
    g.set_zero();
    return g;
}

// One k-row window through the network; captures per-layer per-head
// attention weights on request.
template <typename T>
QOutput<T> dtqn_forward(const Model<T>& m, const MatX<T>& window, bool capture_attention = false) {
    ForwardTrace<T> trace;
    QOutput<T> out;
    m.forward(window, 1, trace, out.q);
    if (capture_attention && m.config().kind != ModelKind::dqn_mlp) {
        out.attention.resize(trace.layers.size());
        for (size_t l = 0; l < trace.layers.size(); ++l) {
            out.attention[l].resize(static_cast<size_t>(m.config().n_heads));
            for (int h = 0; h < m.config().n_heads; ++h)
                out.attention[l][static_cast<size_t>(h)] = trace.layers[l].mha.attn_at(0, h);
        }
    }
    return out;
}

// Q row at the last valid (non-padded) position of the window.
template <typename T>
RowX<T> q_last(const QOutput<T>& out, int last_valid_index) {
    if (last_valid_index < 0 || last_valid_index >= out.q.rows())
        throw contract_error("q_last: no valid position at index " +
                             std::to_string(last_valid_index));
    return out.q.row(last_valid_index);
}

// Baseline presets. attn keeps the embedding/attention/FFN pipeline but
// drops LayerNorm, skip connections and extra layers; dqn_mlp is a
// two-hidden-layer MLP over the newest observation only.
inline ModelConfig make_baseline(ModelKind kind, ModelConfig base) {
    base.kind = kind;
    base.apply_kind();
    return base;
}

}  // namespace dtqn
