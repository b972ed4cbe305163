#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dtqn/agent.hpp"
#include "dtqn/model.hpp"
#include "dtqn/numerics.hpp"

#include <cmath>
#include <vector>

using namespace dtqn;

namespace {

MatX<double> random_mat(Rng& rng, int r, int c, double scale = 1.0) {
    MatX<double> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i)
        m.data()[i] = rng.uniform_real(-scale, scale);
    return m;
}

// Naive exp/sum evaluation, no stabilization: the direct formula.
std::vector<double> naive_softmax(const std::vector<double>& x) {
    std::vector<double> y(x.size());
    double sum = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        y[i] = std::exp(x[i]);
        sum += y[i];
    }
    for (double& v : y) v /= sum;
    return y;
}

// Independent per-row attention oracle: scalar loops only.
MatX<double> naive_causal_mha(const MatX<double>& h, const MhaParams<double>& p, int heads) {
    const int k = static_cast<int>(h.rows());
    const int d = static_cast<int>(h.cols());
    const int dk = d / heads;
    auto project = [&](const Affine<double>& a, int row, int col) {
        double acc = a.b(0, col);
        for (int j = 0; j < d; ++j) acc += h(row, j) * a.w(j, col);
        return acc;
    };
    MatX<double> concat = MatX<double>::Zero(k, d);
    for (int hd = 0; hd < heads; ++hd) {
        for (int i = 0; i < k; ++i) {
            std::vector<double> scores(static_cast<size_t>(i) + 1);
            for (int j = 0; j <= i; ++j) {
                double dot = 0;
                for (int c = 0; c < dk; ++c)
                    dot += project(p.q, i, hd * dk + c) * project(p.k, j, hd * dk + c);
                scores[static_cast<size_t>(j)] = dot / std::sqrt(static_cast<double>(dk));
            }
            const std::vector<double> w = naive_softmax(scores);
            for (int c = 0; c < dk; ++c) {
                double acc = 0;
                for (int j = 0; j <= i; ++j)
                    acc += w[static_cast<size_t>(j)] * project(p.v, j, hd * dk + c);
                concat(i, hd * dk + c) = acc;
            }
        }
    }
    MatX<double> out(k, d);
    for (int i = 0; i < k; ++i)
        for (int c = 0; c < d; ++c) {
            double acc = p.o.b(0, c);
            for (int j = 0; j < d; ++j) acc += concat(i, j) * p.o.w(j, c);
            out(i, c) = acc;
        }
    return out;
}

MatX<double> naive_ffn(const MatX<double>& x, const FfnParams<double>& p) {
    const int k = static_cast<int>(x.rows());
    const int d = static_cast<int>(x.cols());
    const int hd = static_cast<int>(p.a1.w.cols());
    MatX<double> out(k, d);
    for (int r = 0; r < k; ++r) {
        std::vector<double> h1(static_cast<size_t>(hd));
        for (int c = 0; c < hd; ++c) {
            double acc = p.a1.b(0, c);
            for (int j = 0; j < d; ++j) acc += x(r, j) * p.a1.w(j, c);
            h1[static_cast<size_t>(c)] = acc > 0 ? acc : 0;
        }
        for (int c = 0; c < d; ++c) {
            double acc = p.a2.b(0, c);
            for (int j = 0; j < hd; ++j) acc += h1[static_cast<size_t>(j)] * p.a2.w(j, c);
            out(r, c) = acc;
        }
    }
    return out;
}

double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Scalar GRU-equation loop, one row at a time.
MatX<double> naive_gru_gate(const MatX<double>& x, const MatX<double>& h,
                            const GruGateParams<double>& p) {
    const int rows = static_cast<int>(x.rows());
    const int d = static_cast<int>(x.cols());
    MatX<double> out(rows, d);
    auto mix = [&](const MatX<double>& a, const MatX<double>& wa, const MatX<double>& b,
                   const MatX<double>& wb, const MatX<double>& bias, int r, int c) {
        double acc = bias(0, c);
        for (int j = 0; j < d; ++j) acc += a(r, j) * wa(j, c) + b(r, j) * wb(j, c);
        return acc;
    };
    for (int r = 0; r < rows; ++r) {
        std::vector<double> rr(static_cast<size_t>(d)), zz(static_cast<size_t>(d));
        for (int c = 0; c < d; ++c) {
            rr[static_cast<size_t>(c)] = sigmoid_scalar(mix(x, p.wx_r, h, p.wh_r, p.b_r, r, c));
            zz[static_cast<size_t>(c)] = sigmoid_scalar(mix(x, p.wx_z, h, p.wh_z, p.b_z, r, c));
        }
        for (int c = 0; c < d; ++c) {
            double acc = p.b_c(0, c);
            for (int j = 0; j < d; ++j)
                acc += x(r, j) * p.wx_c(j, c) + rr[static_cast<size_t>(j)] * h(r, j) * p.wh_c(j, c);
            const double cand = std::tanh(acc);
            out(r, c) = zz[static_cast<size_t>(c)] * h(r, c) +
                        (1.0 - zz[static_cast<size_t>(c)]) * cand;
        }
    }
    return out;
}

}  // namespace

TEST_CASE("softmax basics") {
    auto y = softmax(std::vector<double>{0, 0, 0});
    for (double v : y) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));

    y = softmax(std::vector<double>{0.0, std::log(2.0)});
    CHECK(y[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
    CHECK(y[1] == doctest::Approx(2.0 / 3).epsilon(1e-12));

    CHECK_THROWS_AS(softmax(std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("softmax matches naive formula and is shift invariant") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> x(5);
        for (double& v : x) v = rng.uniform_real(-10, 10);
        const auto got = softmax(x);
        const auto want = naive_softmax(x);
        double sum = 0;
        for (size_t i = 0; i < x.size(); ++i) {
            CHECK(std::abs(got[i] - want[i]) <= 1e-12);
            CHECK(got[i] >= 0.0);
            sum += got[i];
        }
        CHECK(std::abs(sum - 1.0) <= 1e-9);

        std::vector<double> shifted = x;
        for (double& v : shifted) v += 123.0;
        const auto got2 = softmax(shifted);
        for (size_t i = 0; i < x.size(); ++i) CHECK(std::abs(got2[i] - got[i]) <= 1e-9);
    }
}

TEST_CASE("layer_norm basics") {
    const std::vector<double> ones{1, 1, 1, 1};
    const std::vector<double> zeros{0, 0, 0, 0};
    auto y = layer_norm(std::vector<double>{3, 3, 3, 3}, ones, zeros);
    for (double v : y) CHECK(v == doctest::Approx(0.0));

    y = layer_norm(std::vector<double>{1, -1}, {1, 1}, {0, 0});
    CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(y[1] == doctest::Approx(-1.0).epsilon(1e-4));

    CHECK_THROWS_AS(layer_norm(std::vector<double>{1, 2}, {1}, {0}), std::invalid_argument);
}

TEST_CASE("layer_norm affine identity and output statistics") {
    Rng rng(12);
    for (int trial = 0; trial < 30; ++trial) {
        const int n = 8 + rng.uniform_int(8);
        std::vector<double> x(static_cast<size_t>(n)), g(static_cast<size_t>(n)),
            b(static_cast<size_t>(n)), ones(static_cast<size_t>(n), 1.0),
            zeros(static_cast<size_t>(n), 0.0);
        // spread the inputs so the 1e-5 variance epsilon is negligible
        for (auto& v : x) v = rng.uniform_real(-20, 20);
        for (auto& v : g) v = rng.uniform_real(-2, 2);
        for (auto& v : b) v = rng.uniform_real(-2, 2);

        const auto base = layer_norm(x, ones, zeros);
        const auto full = layer_norm(x, g, b);
        for (int i = 0; i < n; ++i)
            CHECK(full[static_cast<size_t>(i)] ==
                  g[static_cast<size_t>(i)] * base[static_cast<size_t>(i)] +
                      b[static_cast<size_t>(i)]);

        double mean = 0, var = 0;
        for (double v : base) mean += v / n;
        for (double v : base) var += (v - mean) * (v - mean) / n;
        CHECK(std::abs(mean) <= 1e-6);
        CHECK(std::abs(var - 1.0) <= 1e-6);
    }
}

TEST_CASE("causal_mha single token and identical keys") {
    Rng rng(13);
    const int d = 8, heads = 2;
    MhaParams<double> p;
    p.resize(d);
    p.init_uniform(rng);

    // k = 1: the only attention weight is exactly 1
    MatX<double> h1 = random_mat(rng, 1, d);
    MhaCache<double> cache;
    MatX<double> y;
    causal_mha_forward(h1, p, heads, 1, y, cache);
    for (int hd = 0; hd < heads; ++hd) CHECK(cache.attn_at(0, hd)(0, 0) == 1.0);
    MatX<double> v;
    affine_forward(h1, p.v, v);
    MatX<double> want;
    affine_forward(v, p.o, want);
    CHECK((y - want).cwiseAbs().maxCoeff() <= 1e-14);

    // zero key projection makes all keys identical: second row splits 50/50
    p.k.w.setZero();
    p.k.b.setZero();
    MatX<double> h2 = random_mat(rng, 2, d);
    causal_mha_forward(h2, p, heads, 2, y, cache);
    for (int hd = 0; hd < heads; ++hd) {
        CHECK(cache.attn_at(0, hd)(1, 0) == 0.5);
        CHECK(cache.attn_at(0, hd)(1, 1) == 0.5);
    }
}

TEST_CASE("causal_mha matches the naive per-row oracle") {
    Rng rng(14);
    for (int trial = 0; trial < 20; ++trial) {
        const int heads = (trial % 2) ? 2 : 4;
        const int d = heads * (2 + trial % 3);
        const int k = 3 + trial % 4;
        MhaParams<double> p;
        p.resize(d);
        p.init_uniform(rng);
        MatX<double> h = random_mat(rng, k, d);
        const MatX<double> got = causal_mha(h, p, heads);
        const MatX<double> want = naive_causal_mha(h, p, heads);
        CHECK((got - want).cwiseAbs().maxCoeff() <= 1e-10);
    }
}

TEST_CASE("causal_mha attention rows are stochastic over the prefix, masked entries zero") {
    Rng rng(15);
    const int d = 12, heads = 3, k = 7;
    MhaParams<double> p;
    p.resize(d);
    p.init_uniform(rng);
    MatX<double> h = random_mat(rng, k, d);
    MhaCache<double> cache;
    MatX<double> y;
    causal_mha_forward(h, p, heads, k, y, cache);
    for (int hd = 0; hd < heads; ++hd) {
        const MatX<double>& a = cache.attn_at(0, hd);
        for (int i = 0; i < k; ++i) {
            CHECK(std::abs(a.row(i).head(i + 1).sum() - 1.0) <= 1e-9);
            for (int j = i + 1; j < k; ++j) CHECK(a(i, j) == 0.0);
        }
    }
}

TEST_CASE("causality: perturbing row j never changes rows before j") {
    Rng rng(16);
    for (int trial = 0; trial < 50; ++trial) {
        const int heads = 2, d = 8, k = 6;
        MhaParams<double> p;
        p.resize(d);
        p.init_uniform(rng);
        MatX<double> h = random_mat(rng, k, d);
        const MatX<double> base = causal_mha(h, p, heads);
        const int j = 1 + rng.uniform_int(k - 1);
        MatX<double> hp = h;
        hp.row(j) += random_mat(rng, 1, d, 3.0);
        const MatX<double> pert = causal_mha(hp, p, heads);
        CHECK((pert.topRows(j) - base.topRows(j)).cwiseAbs().maxCoeff() <= 1e-12);
    }
}

TEST_CASE("causal_mha rejects indivisible head count") {
    MhaParams<double> p;
    p.resize(10);
    MatX<double> h = MatX<double>::Zero(2, 10);
    CHECK_THROWS_AS(causal_mha(h, p, 3), config_error);
}

TEST_CASE("ffn basics") {
    Rng rng(17);
    FfnParams<double> p;
    p.resize(6, 24);
    MatX<double> x = random_mat(rng, 4, 6);
    CHECK(ffn(x, p).cwiseAbs().maxCoeff() == 0.0);  // zero weights, zero biases

    p.init_uniform(rng);
    const MatX<double> y = ffn(x, p);
    CHECK((y - naive_ffn(x, p)).cwiseAbs().maxCoeff() <= 1e-12);

    // position-wise: permuting rows permutes outputs identically
    std::vector<int> perm{2, 0, 3, 1};
    MatX<double> xp(4, 6), yp_want(4, 6);
    for (int r = 0; r < 4; ++r) {
        xp.row(r) = x.row(perm[static_cast<size_t>(r)]);
        yp_want.row(r) = y.row(perm[static_cast<size_t>(r)]);
    }
    CHECK((ffn(xp, p) - yp_want).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("combine: residual, saturated gate, gru oracle, unknown kind") {
    Rng rng(18);
    const int d = 6, rows = 5;
    MatX<double> a = random_mat(rng, rows, d);
    MatX<double> b = random_mat(rng, rows, d);
    CHECK(((combine<double>(a, b, CombineKind::residual, nullptr)) - (a + b))
              .cwiseAbs()
              .maxCoeff() == 0.0);

    GruGateParams<double> gate;
    gate.resize(d);
    gate.init_uniform(rng);
    gate.b_z.setConstant(10.0);
    const MatX<double> near_id = combine(a, b, CombineKind::gru_gate, &gate);
    CHECK((near_id - b).cwiseAbs().maxCoeff() <= 1e-3);

    gate.init_uniform(rng);
    const MatX<double> got = combine(a, b, CombineKind::gru_gate, &gate);
    CHECK((got - naive_gru_gate(a, b, gate)).cwiseAbs().maxCoeff() <= 1e-12);

    CHECK_THROWS_AS(combine<double>(a, b, static_cast<CombineKind>(99), nullptr), config_error);
    CHECK_THROWS_AS(combine<double>(a, random_mat(rng, rows + 1, d), CombineKind::residual,
                                    nullptr),
                    config_error);
}

TEST_CASE("grad_check on closed forms") {
    // f(x) = x^2 at x = 1
    MatX<double> x(1, 1);
    x(0, 0) = 1.0;
    MatX<double> g(1, 1);
    g(0, 0) = 2.0;
    ParamRefs<double> params{{"x", &x}}, grads{{"g", &g}};
    const double err =
        grad_check<double>([&]() { return x(0, 0) * x(0, 0); }, params, grads, {1e-6});
    CHECK(err <= 1e-8);

    // f = softmax(x) . c with the analytic softmax jacobian
    Rng rng(19);
    MatX<double> xv = random_mat(rng, 1, 6);
    MatX<double> c = random_mat(rng, 1, 6);
    auto f = [&]() {
        std::vector<double> v(xv.data(), xv.data() + 6);
        const auto s = softmax(v);
        double acc = 0;
        for (int i = 0; i < 6; ++i) acc += s[static_cast<size_t>(i)] * c(0, i);
        return acc;
    };
    std::vector<double> s0 = softmax(std::vector<double>(xv.data(), xv.data() + 6));
    double dot = 0;
    for (int i = 0; i < 6; ++i) dot += c(0, i) * s0[static_cast<size_t>(i)];
    MatX<double> ga(1, 6);
    for (int i = 0; i < 6; ++i) ga(0, i) = s0[static_cast<size_t>(i)] * (c(0, i) - dot);
    ParamRefs<double> p2{{"x", &xv}}, g2{{"g", &ga}};
    CHECK(grad_check<double>(f, p2, g2, {1e-6}) <= 1e-5);
}

TEST_CASE("grad_check on the full loss, 2-step context") {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.context_len = 2;
    cfg.embed_per_feature = 4;
    cfg.action_count = 3;
    cfg.obs.vocab = {5};
    Model<double> m(cfg);
    Rng rng(21);
    m.init(rng);

    MatX<double> obs(2, 1);
    obs << 1, 3;
    const std::vector<double> targets{0.7, -0.3};
    const std::vector<int> actions{2, 0};
    const std::vector<uint8_t> mask{1, 1};

    auto objective = [&]() {
        ForwardTrace<double> trace;
        MatX<double> q;
        m.forward(obs, 1, trace, q);
        return intermediate_q_loss<double>(q, targets, actions, mask);
    };
    ForwardTrace<double> trace;
    MatX<double> q, dq;
    m.forward(obs, 1, trace, q);
    intermediate_q_loss<double>(q, targets, actions, mask, &dq);
    Model<double> grads = zeros_like(m);
    m.backward(dq, trace, grads);

    GradCheckOptions opt;
    opt.eps = 1e-6;
    opt.max_coords_per_block = 32;
    CHECK(grad_check<double>(objective, m.param_refs(), grads.param_refs(), opt) <= 1e-4);
}

namespace {

// Shared scaffolding: objective = sum(out .* w_obj), analytic grads from the
// op's backward with dy = w_obj.
template <typename Forward, typename Backward>
double check_op_gradients(Rng& rng, ParamRefs<double> params, Forward fwd, Backward bwd) {
    const MatX<double> probe = fwd();
    MatX<double> w_obj = random_mat(rng, static_cast<int>(probe.rows()),
                                    static_cast<int>(probe.cols()));
    auto objective = [&]() { return (fwd().array() * w_obj.array()).sum(); };
    const auto grads_owned = bwd(w_obj);
    ParamRefs<double> grefs;
    for (auto& [name, mat] : grads_owned) grefs.emplace_back(name, mat);
    GradCheckOptions opt;
    opt.eps = 1e-6;
    opt.seed = rng.next_u64();
    return grad_check<double>(objective, params, grefs, opt);
}

}  // namespace

TEST_CASE("per-op gradients pass finite-difference checks on 20+ random configs") {
    Rng rng(20);
    for (int trial = 0; trial < 20; ++trial) {
        const int heads = (trial % 3) + 1;
        const int dk = 2 + (trial % 2);
        const int d = heads * dk;
        const int k = 2 + (trial % 4);

        {
            // causal MHA
            MhaParams<double> p;
            p.resize(d);
            p.init_uniform(rng);
            MatX<double> h = random_mat(rng, k, d);
            ParamRefs<double> params;
            p.visit(params, "mha");
            collect<double>(params, "input", h);
            MhaParams<double> g;
            g.resize(d);
            MatX<double> dh;
            const double err = check_op_gradients(
                rng, params,
                [&]() { return causal_mha(h, p, heads); },
                [&](const MatX<double>& dy) {
                    MhaCache<double> cache;
                    MatX<double> y;
                    causal_mha_forward(h, p, heads, k, y, cache);
                    g.q.w.setZero(); g.q.b.setZero(); g.k.w.setZero(); g.k.b.setZero();
                    g.v.w.setZero(); g.v.b.setZero(); g.o.w.setZero(); g.o.b.setZero();
                    causal_mha_backward(cache, p, dy, g, dh);
                    ParamRefs<double> out;
                    g.visit(out, "g");
                    out.emplace_back("dh", &dh);
                    return out;
                });
            CHECK(err <= 1e-6);
        }
        {
            // LayerNorm
            LayerNormParams<double> p;
            p.resize(d);
            MatX<double> x = random_mat(rng, k, d, 2.0);
            for (Eigen::Index i = 0; i < p.gain.size(); ++i)
                p.gain.data()[i] = rng.uniform_real(0.5, 1.5);
            ParamRefs<double> params;
            p.visit(params, "ln");
            collect<double>(params, "x", x);
            LayerNormParams<double> g;
            g.resize(d);
            MatX<double> dx;
            const double err = check_op_gradients(
                rng, params,
                [&]() {
                    MatX<double> y;
                    layer_norm_forward(x, p, y, static_cast<LayerNormCache<double>*>(nullptr));
                    return y;
                },
                [&](const MatX<double>& dy) {
                    LayerNormCache<double> cache;
                    MatX<double> y;
                    layer_norm_forward(x, p, y, &cache);
                    g.gain.setZero();
                    g.bias.setZero();
                    layer_norm_backward(cache, p, dy, g, dx);
                    ParamRefs<double> out;
                    g.visit(out, "g");
                    out.emplace_back("dx", &dx);
                    return out;
                });
            CHECK(err <= 1e-6);
        }
        {
            // FFN
            FfnParams<double> p;
            p.resize(d, 3 * d);
            p.init_uniform(rng);
            MatX<double> x = random_mat(rng, k, d);
            ParamRefs<double> params;
            p.visit(params, "ffn");
            collect<double>(params, "x", x);
            FfnParams<double> g;
            g.resize(d, 3 * d);
            MatX<double> dx;
            const double err = check_op_gradients(
                rng, params,
                [&]() { return ffn(x, p); },
                [&](const MatX<double>& dy) {
                    FfnCache<double> cache;
                    MatX<double> y;
                    ffn_forward(x, p, y, cache);
                    g.a1.w.setZero(); g.a1.b.setZero(); g.a2.w.setZero(); g.a2.b.setZero();
                    ffn_backward(cache, p, dy, g, dx);
                    ParamRefs<double> out;
                    g.visit(out, "g");
                    out.emplace_back("dx", &dx);
                    return out;
                });
            CHECK(err <= 1e-6);
        }
        {
            // GRU gate
            GruGateParams<double> p;
            p.resize(d);
            p.init_uniform(rng);
            MatX<double> x = random_mat(rng, k, d);
            MatX<double> hh = random_mat(rng, k, d);
            ParamRefs<double> params;
            p.visit(params, "gate");
            collect<double>(params, "x", x);
            collect<double>(params, "h", hh);
            GruGateParams<double> g;
            g.resize(d);
            MatX<double> dx, dh;
            const double err = check_op_gradients(
                rng, params,
                [&]() {
                    MatX<double> y;
                    GruCache<double> cache;
                    gru_gate_forward(x, hh, p, y, cache);
                    return y;
                },
                [&](const MatX<double>& dy) {
                    GruCache<double> cache;
                    MatX<double> y;
                    gru_gate_forward(x, hh, p, y, cache);
                    g.resize(d);
                    gru_gate_backward(cache, p, dy, g, dx, dh);
                    ParamRefs<double> out;
                    g.visit(out, "g");
                    out.emplace_back("dx", &dx);
                    out.emplace_back("dh", &dh);
                    return out;
                });
            CHECK(err <= 1e-6);
        }
    }
}
