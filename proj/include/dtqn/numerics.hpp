#pragma once

// Differentiable primitives for the Q-network: affine maps, softmax,
// LayerNorm, causally masked multi-head attention, the position-wise
// feed-forward block, and the GRU-style gate used by the gated combine
// variant. Every op comes as a forward that fills an explicit cache and a
// backward that consumes it. Row-major matrices throughout; a history
// window is k rows of d features, and batched calls stack B windows into
// (B*k) rows.

#include "dtqn/common.hpp"

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace dtqn {

template <typename T>
using ParamRefs = std::vector<std::pair<std::string, MatX<T>*>>;

template <typename T>
inline void collect(ParamRefs<T>& out, const std::string& name, MatX<T>& m) {
    out.emplace_back(name, &m);
}

inline constexpr double kLayerNormEps = 1e-5;

// ---------------------------------------------------------------------------
// affine

template <typename T>
struct Affine {
    MatX<T> w;  // in x out
    MatX<T> b;  // 1 x out

    void resize(int in, int out) {
        w.setZero(in, out);
        b.setZero(1, out);
    }
    void init_uniform(Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(w.rows()));
        for (Eigen::Index i = 0; i < w.size(); ++i)
            w.data()[i] = static_cast<T>(rng.uniform_real(-bound, bound));
        b.setZero();
    }
    void visit(ParamRefs<T>& out, const std::string& prefix) {
        collect(out, prefix + ".w", w);
        collect(out, prefix + ".b", b);
    }
};

template <typename T>
void affine_forward(const MatX<T>& x, const Affine<T>& p, MatX<T>& y) {
    if (x.cols() != p.w.rows())
        throw config_error("affine: input width " + std::to_string(x.cols()) +
                           " != weight rows " + std::to_string(p.w.rows()));
    y.noalias() = x * p.w;
    y.rowwise() += p.b.row(0);
}

// dx may alias nothing; pass nullptr to skip input gradient.
template <typename T>
void affine_backward(const MatX<T>& x, const Affine<T>& p, const MatX<T>& dy,
                     Affine<T>& grad, MatX<T>* dx) {
    grad.w.noalias() += x.transpose() * dy;
    grad.b.row(0) += dy.colwise().sum();
    if (dx) dx->noalias() = dy * p.w.transpose();
}

// ---------------------------------------------------------------------------
// softmax

template <typename T>
inline void softmax_inplace(T* p, int n) {
    T mx = p[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, p[i]);
    T sum = T(0);
    for (int i = 0; i < n; ++i) {
        p[i] = std::exp(p[i] - mx);
        sum += p[i];
    }
    const T inv = T(1) / sum;
    for (int i = 0; i < n; ++i) p[i] *= inv;
}

template <typename T>
std::vector<T> softmax(const std::vector<T>& x) {
    if (x.empty()) throw std::invalid_argument("softmax: empty input");
    std::vector<T> y = x;
    softmax_inplace(y.data(), static_cast<int>(y.size()));
    return y;
}

// ---------------------------------------------------------------------------
// LayerNorm (normalizes each row over the feature dimension)

template <typename T>
struct LayerNormParams {
    MatX<T> gain;  // 1 x d
    MatX<T> bias;  // 1 x d

    void resize(int d) {
        gain.setOnes(1, d);
        bias.setZero(1, d);
    }
    void visit(ParamRefs<T>& out, const std::string& prefix) {
        collect(out, prefix + ".gain", gain);
        collect(out, prefix + ".bias", bias);
    }
};

template <typename T>
struct LayerNormCache {
    MatX<T> xhat;     // rows x d, normalized input
    MatX<T> inv_std;  // rows x 1
};

template <typename T>
void layer_norm_forward(const MatX<T>& x, const LayerNormParams<T>& p, MatX<T>& y,
                        LayerNormCache<T>* cache) {
    if (x.cols() != p.gain.cols())
        throw std::invalid_argument("layer_norm: feature width mismatch");
    const Eigen::Index rows = x.rows(), d = x.cols();
    if (cache) {
        cache->xhat.resize(rows, d);
        cache->inv_std.resize(rows, 1);
    }
    y.resize(rows, d);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const T mean = x.row(r).mean();
        const T var = (x.row(r).array() - mean).square().mean();
        const T s = T(1) / std::sqrt(var + T(kLayerNormEps));
        if (cache) {
            cache->xhat.row(r) = ((x.row(r).array() - mean) * s).matrix();
            cache->inv_std(r, 0) = s;
            y.row(r) = (cache->xhat.row(r).array() * p.gain.row(0).array()).matrix() +
                       p.bias.row(0);
        } else {
            y.row(r) = (((x.row(r).array() - mean) * s) * p.gain.row(0).array()).matrix() +
                       p.bias.row(0);
        }
    }
}

template <typename T>
void layer_norm_backward(const LayerNormCache<T>& cache, const LayerNormParams<T>& p,
                         const MatX<T>& dy, LayerNormParams<T>& grad, MatX<T>& dx) {
    const Eigen::Index rows = dy.rows(), d = dy.cols();
    dx.resize(rows, d);
    for (Eigen::Index r = 0; r < rows; ++r) {
        auto xhat = cache.xhat.row(r).array();
        auto dxhat = (dy.row(r).array() * p.gain.row(0).array()).eval();
        const T m1 = dxhat.mean();
        const T m2 = (dxhat * xhat).mean();
        dx.row(r) = (cache.inv_std(r, 0) * (dxhat - m1 - xhat * m2)).matrix();
        grad.gain.row(0).array() += dy.row(r).array() * xhat;
        grad.bias.row(0) += dy.row(r);
    }
}

// Spec surface: single vector with explicit gain/bias.
template <typename T>
std::vector<T> layer_norm(const std::vector<T>& x, const std::vector<T>& gain,
                          const std::vector<T>& bias) {
    if (x.size() != gain.size() || x.size() != bias.size())
        throw std::invalid_argument("layer_norm: length mismatch");
    LayerNormParams<T> p;
    p.resize(static_cast<int>(x.size()));
    for (size_t i = 0; i < x.size(); ++i) {
        p.gain(0, static_cast<Eigen::Index>(i)) = gain[i];
        p.bias(0, static_cast<Eigen::Index>(i)) = bias[i];
    }
    MatX<T> xm(1, static_cast<Eigen::Index>(x.size()));
    for (size_t i = 0; i < x.size(); ++i) xm(0, static_cast<Eigen::Index>(i)) = x[i];
    MatX<T> y;
    layer_norm_forward(xm, p, y, static_cast<LayerNormCache<T>*>(nullptr));
    return std::vector<T>(y.data(), y.data() + y.size());
}

// ---------------------------------------------------------------------------
// causal multi-head self-attention

template <typename T>
struct MhaParams {
    Affine<T> q, k, v, o;

    void resize(int d) {
        q.resize(d, d);
        k.resize(d, d);
        v.resize(d, d);
        o.resize(d, d);
    }
    void init_uniform(Rng& rng) {
        q.init_uniform(rng);
        k.init_uniform(rng);
        v.init_uniform(rng);
        o.init_uniform(rng);
    }
    void visit(ParamRefs<T>& out, const std::string& prefix) {
        q.visit(out, prefix + ".q");
        k.visit(out, prefix + ".k");
        v.visit(out, prefix + ".v");
        o.visit(out, prefix + ".o");
    }
};

template <typename T>
struct MhaCache {
    MatX<T> in, q, k, v, concat;   // (B*k) x d
    std::vector<MatX<T>> attn;     // batch*heads entries, each klen x klen
    int batch = 0, klen = 0, heads = 0;

    const MatX<T>& attn_at(int b, int h) const { return attn[static_cast<size_t>(b) * heads + h]; }
};

// H is (batch*klen) x d. Attention is restricted to each window's causal
// prefix; rows of different windows never interact.
template <typename T>
void causal_mha_forward(const MatX<T>& h, const MhaParams<T>& p, int n_heads, int klen,
                        MatX<T>& y, MhaCache<T>& cache) {
    const int d = static_cast<int>(h.cols());
    if (n_heads <= 0 || d % n_heads != 0)
        throw config_error("causal_mha: d_model " + std::to_string(d) +
                           " not divisible by n_heads " + std::to_string(n_heads));
    if (klen <= 0 || h.rows() % klen != 0)
        throw config_error("causal_mha: row count not a multiple of window length");
    const int batch = static_cast<int>(h.rows()) / klen;
    const int dk = d / n_heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dk));

    cache.in = h;
    affine_forward(h, p.q, cache.q);
    affine_forward(h, p.k, cache.k);
    affine_forward(h, p.v, cache.v);
    cache.batch = batch;
    cache.klen = klen;
    cache.heads = n_heads;
    cache.attn.resize(static_cast<size_t>(batch) * n_heads);
    cache.concat.resize(h.rows(), d);

    for (int b = 0; b < batch; ++b) {
        for (int hd = 0; hd < n_heads; ++hd) {
            auto qb = cache.q.block(b * klen, hd * dk, klen, dk);
            auto kb = cache.k.block(b * klen, hd * dk, klen, dk);
            auto vb = cache.v.block(b * klen, hd * dk, klen, dk);
            MatX<T>& a = cache.attn[static_cast<size_t>(b) * n_heads + hd];
            a.resize(klen, klen);
            a.noalias() = qb * kb.transpose();
            a *= scale;
            // softmax over the causal prefix only: the exact -inf mask limit.
            // Masked weights read 0 afterwards.
            for (int i = 0; i < klen; ++i) {
                softmax_inplace(a.row(i).data(), i + 1);
                for (int j = i + 1; j < klen; ++j) a(i, j) = T(0);
            }
            cache.concat.block(b * klen, hd * dk, klen, dk).noalias() = a * vb;
        }
    }
    affine_forward(cache.concat, p.o, y);
}

template <typename T>
void causal_mha_backward(const MhaCache<T>& cache, const MhaParams<T>& p, const MatX<T>& dy,
                         MhaParams<T>& grad, MatX<T>& dh) {
    const int d = static_cast<int>(cache.in.cols());
    const int dk = d / cache.heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dk));

    MatX<T> dconcat;
    affine_backward(cache.concat, p.o, dy, grad.o, &dconcat);

    MatX<T> dq = MatX<T>::Zero(cache.in.rows(), d);
    MatX<T> dkm = MatX<T>::Zero(cache.in.rows(), d);
    MatX<T> dv = MatX<T>::Zero(cache.in.rows(), d);

    MatX<T> dattn, dscores;
    for (int b = 0; b < cache.batch; ++b) {
        for (int hd = 0; hd < cache.heads; ++hd) {
            const MatX<T>& a = cache.attn_at(b, hd);
            auto qb = cache.q.block(b * cache.klen, hd * dk, cache.klen, dk);
            auto kb = cache.k.block(b * cache.klen, hd * dk, cache.klen, dk);
            auto vb = cache.v.block(b * cache.klen, hd * dk, cache.klen, dk);
            auto dout = dconcat.block(b * cache.klen, hd * dk, cache.klen, dk);

            dattn.noalias() = dout * vb.transpose();
            dv.block(b * cache.klen, hd * dk, cache.klen, dk).noalias() +=
                a.transpose() * dout;

            // softmax jacobian per row, restricted to the causal prefix
            dscores.setZero(cache.klen, cache.klen);
            for (int i = 0; i < cache.klen; ++i) {
                T dot = T(0);
                for (int j = 0; j <= i; ++j) dot += dattn(i, j) * a(i, j);
                for (int j = 0; j <= i; ++j)
                    dscores(i, j) = a(i, j) * (dattn(i, j) - dot) * scale;
            }
            dq.block(b * cache.klen, hd * dk, cache.klen, dk).noalias() += dscores * kb;
            dkm.block(b * cache.klen, hd * dk, cache.klen, dk).noalias() +=
                dscores.transpose() * qb;
        }
    }

    MatX<T> tmp;
    affine_backward(cache.in, p.q, dq, grad.q, &dh);
    affine_backward(cache.in, p.k, dkm, grad.k, &tmp);
    dh += tmp;
    affine_backward(cache.in, p.v, dv, grad.v, &tmp);
    dh += tmp;
}

// Spec surface: one window, no cache kept by the caller.
template <typename T>
MatX<T> causal_mha(const MatX<T>& h, const MhaParams<T>& p, int n_heads) {
    MatX<T> y;
    MhaCache<T> cache;
    causal_mha_forward(h, p, n_heads, static_cast<int>(h.rows()), y, cache);
    return y;
}

// ---------------------------------------------------------------------------
// position-wise feed-forward (affine, ReLU, affine)

template <typename T>
struct FfnParams {
    Affine<T> a1, a2;

    void resize(int d, int hidden) {
        a1.resize(d, hidden);
        a2.resize(hidden, d);
    }
    void init_uniform(Rng& rng) {
        a1.init_uniform(rng);
        a2.init_uniform(rng);
    }
    void visit(ParamRefs<T>& out, const std::string& prefix) {
        a1.visit(out, prefix + ".a1");
        a2.visit(out, prefix + ".a2");
    }
};

template <typename T>
struct FfnCache {
    MatX<T> in, h1;  // h1 is post-ReLU
};

template <typename T>
void ffn_forward(const MatX<T>& x, const FfnParams<T>& p, MatX<T>& y, FfnCache<T>& cache) {
    cache.in = x;
    affine_forward(x, p.a1, cache.h1);
    cache.h1 = cache.h1.cwiseMax(T(0));
    affine_forward(cache.h1, p.a2, y);
}

template <typename T>
void ffn_backward(const FfnCache<T>& cache, const FfnParams<T>& p, const MatX<T>& dy,
                  FfnParams<T>& grad, MatX<T>& dx) {
    MatX<T> dh1;
    affine_backward(cache.h1, p.a2, dy, grad.a2, &dh1);
    dh1 = (cache.h1.array() > T(0)).template cast<T>() * dh1.array();
    affine_backward(cache.in, p.a1, dh1, grad.a1, &dx);
}

template <typename T>
MatX<T> ffn(const MatX<T>& x, const FfnParams<T>& p) {
    MatX<T> y;
    FfnCache<T> cache;
    ffn_forward(x, p, y, cache);
    return y;
}

// ---------------------------------------------------------------------------
// combine step: residual sum, GRU-style gate, or pass-through

enum class CombineKind { residual, gru_gate, pass };

inline const char* to_string(CombineKind k) {
    switch (k) {
        case CombineKind::residual: return "residual";
        case CombineKind::gru_gate: return "gru_gate";
        case CombineKind::pass: return "pass";
    }
    return "?";
}

// GRU equations applied rowwise, with the sublayer output as the input x
// and the residual stream as the hidden state h. The z gate keeps the
// residual path; its bias starts positive so the block opens near the
// identity.
template <typename T>
struct GruGateParams {
    static constexpr double kInitUpdateBias = 2.0;

    MatX<T> wx_r, wh_r, wx_z, wh_z, wx_c, wh_c;  // d x d each
    MatX<T> b_r, b_z, b_c;                       // 1 x d

    void resize(int d) {
        wx_r.setZero(d, d); wh_r.setZero(d, d);
        wx_z.setZero(d, d); wh_z.setZero(d, d);
        wx_c.setZero(d, d); wh_c.setZero(d, d);
        b_r.setZero(1, d); b_z.setZero(1, d); b_c.setZero(1, d);
    }
    void init_uniform(Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(wx_r.rows()));
        for (MatX<T>* m : {&wx_r, &wh_r, &wx_z, &wh_z, &wx_c, &wh_c})
            for (Eigen::Index i = 0; i < m->size(); ++i)
                m->data()[i] = static_cast<T>(rng.uniform_real(-bound, bound));
        b_r.setZero();
        b_z.setConstant(T(kInitUpdateBias));
        b_c.setZero();
    }
    void visit(ParamRefs<T>& out, const std::string& prefix) {
        collect(out, prefix + ".wx_r", wx_r); collect(out, prefix + ".wh_r", wh_r);
        collect(out, prefix + ".wx_z", wx_z); collect(out, prefix + ".wh_z", wh_z);
        collect(out, prefix + ".wx_c", wx_c); collect(out, prefix + ".wh_c", wh_c);
        collect(out, prefix + ".b_r", b_r); collect(out, prefix + ".b_z", b_z);
        collect(out, prefix + ".b_c", b_c);
    }
};

template <typename T>
struct GruCache {
    MatX<T> x, h, r, z, c, rh;
};

template <typename T>
inline MatX<T> sigmoid(const MatX<T>& x) {
    return ((-x.array()).exp() + T(1)).inverse().matrix();
}

template <typename T>
void gru_gate_forward(const MatX<T>& x, const MatX<T>& h, const GruGateParams<T>& p,
                      MatX<T>& y, GruCache<T>& cache) {
    cache.x = x;
    cache.h = h;
    MatX<T> pre = x * p.wx_r + h * p.wh_r;
    pre.rowwise() += p.b_r.row(0);
    cache.r = sigmoid(pre);
    pre.noalias() = x * p.wx_z + h * p.wh_z;
    pre.rowwise() += p.b_z.row(0);
    cache.z = sigmoid(pre);
    cache.rh = cache.r.cwiseProduct(h);
    pre.noalias() = x * p.wx_c + cache.rh * p.wh_c;
    pre.rowwise() += p.b_c.row(0);
    cache.c = pre.array().tanh().matrix();
    y = cache.z.cwiseProduct(h) + (MatX<T>::Ones(h.rows(), h.cols()) - cache.z).cwiseProduct(cache.c);
}

template <typename T>
void gru_gate_backward(const GruCache<T>& cache, const GruGateParams<T>& p, const MatX<T>& dy,
                       GruGateParams<T>& grad, MatX<T>& dx, MatX<T>& dh) {
    const auto& z = cache.z;
    const auto& c = cache.c;
    const auto& r = cache.r;
    const auto& h = cache.h;
    const auto& x = cache.x;

    MatX<T> dz = dy.cwiseProduct(h - c);
    MatX<T> dc = dy.cwiseProduct(MatX<T>::Ones(z.rows(), z.cols()) - z);
    dh = dy.cwiseProduct(z);

    MatX<T> dc_pre = dc.array() * (T(1) - c.array().square());
    dx.noalias() = dc_pre * p.wx_c.transpose();
    MatX<T> drh = dc_pre * p.wh_c.transpose();
    MatX<T> dr = drh.cwiseProduct(h);
    dh += drh.cwiseProduct(r);
    grad.wx_c.noalias() += x.transpose() * dc_pre;
    grad.wh_c.noalias() += cache.rh.transpose() * dc_pre;
    grad.b_c.row(0) += dc_pre.colwise().sum();

    MatX<T> dz_pre = dz.array() * z.array() * (T(1) - z.array());
    dx.noalias() += dz_pre * p.wx_z.transpose();
    dh.noalias() += dz_pre * p.wh_z.transpose();
    grad.wx_z.noalias() += x.transpose() * dz_pre;
    grad.wh_z.noalias() += h.transpose() * dz_pre;
    grad.b_z.row(0) += dz_pre.colwise().sum();

    MatX<T> dr_pre = dr.array() * r.array() * (T(1) - r.array());
    dx.noalias() += dr_pre * p.wx_r.transpose();
    dh.noalias() += dr_pre * p.wh_r.transpose();
    grad.wx_r.noalias() += x.transpose() * dr_pre;
    grad.wh_r.noalias() += h.transpose() * dr_pre;
    grad.b_r.row(0) += dr_pre.colwise().sum();
}

template <typename T>
MatX<T> combine(const MatX<T>& sub_out, const MatX<T>& residual_in, CombineKind kind,
                const GruGateParams<T>* gate) {
    if (sub_out.rows() != residual_in.rows() || sub_out.cols() != residual_in.cols())
        throw config_error("combine: shape mismatch");
    switch (kind) {
        case CombineKind::residual: return sub_out + residual_in;
        case CombineKind::pass: return sub_out;
        case CombineKind::gru_gate: {
            if (!gate) throw config_error("combine: gru_gate requires gate weights");
            MatX<T> y;
            GruCache<T> cache;
            gru_gate_forward(sub_out, residual_in, *gate, y, cache);
            return y;
        }
    }
    throw config_error("combine: unknown kind");
}

// ---------------------------------------------------------------------------
// finite-difference gradient checking

struct GradCheckOptions {
    double eps = 1e-6;
    int max_coords_per_block = 24;  // sampled when a block is larger
    uint64_t seed = 7;
};

// f evaluates the scalar objective from the current parameter values.
// Returns the max over sampled coordinates of
// |analytic - numeric| / max(1, |analytic|, |numeric|).
template <typename T>
double grad_check(const std::function<double()>& f, const ParamRefs<T>& params,
                  const ParamRefs<T>& analytic, GradCheckOptions opt = {}) {
    if (params.size() != analytic.size())
        throw config_error("grad_check: param/grad block count mismatch");
    Rng rng(opt.seed);
    double worst = 0.0;
    for (size_t bi = 0; bi < params.size(); ++bi) {
        MatX<T>& block = *params[bi].second;
        const MatX<T>& gblock = *analytic[bi].second;
        if (block.size() != gblock.size())
            throw config_error("grad_check: block shape mismatch at " + params[bi].first);
        const int n = static_cast<int>(block.size());
        std::vector<int> coords;
        if (n <= opt.max_coords_per_block) {
            coords.resize(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
        } else {
            for (int i = 0; i < opt.max_coords_per_block; ++i)
                coords.push_back(rng.uniform_int(n));
        }
        for (int idx : coords) {
            const T orig = block.data()[idx];
            block.data()[idx] = orig + static_cast<T>(opt.eps);
            const double fp = f();
            block.data()[idx] = orig - static_cast<T>(opt.eps);
            const double fm = f();
            block.data()[idx] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw diagnostic_error("grad_check: non-finite objective at " + params[bi].first);
            const double numeric = (fp - fm) / (2.0 * opt.eps);
            const double an = static_cast<double>(gblock.data()[idx]);
            const double err =
                std::abs(an - numeric) / std::max({1.0, std::abs(an), std::abs(numeric)});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace dtqn
