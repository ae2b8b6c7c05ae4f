#include "doctest.h"

#include <cmath>

#include "moviekit/denoiser.hpp"
#include "moviekit/synthdata.hpp"

using namespace moviekit;

namespace {

DenoiserConfig toy_config(bool guidance = false) {
    DenoiserConfig cfg;
    cfg.guidance_conditioned = guidance;
    return cfg;  // defaults are the reference toy shape
}

Tensor toy_input(Rng& rng, const DenoiserConfig& cfg, int hw = 8) {
    return rng.normal_tensor({cfg.in_channels(), hw, hw});
}

Conditioning toy_cond(Rng& rng, float s_i = 1.f, float s_t = 1.f) {
    Conditioning c;
    c.c_image = rng.normal_tensor({4, 8, 8});
    c.c_text = encode_instruction(3);
    c.s_image = s_i;
    c.s_text = s_t;
    return c;
}

// independent parameter-count formula from the config alone
int64_t expected_param_count(const DenoiserConfig& cfg) {
    auto conv = [](int cout, int cin, int k) { return static_cast<int64_t>(cout) * cin * k * k + cout; };
    auto lin = [](int out, int in) { return static_cast<int64_t>(out) * in + out; };
    auto gn = [](int c) { return static_cast<int64_t>(2) * c; };
    auto rb = [&](int cin, int cout) {
        int64_t n = gn(cin) + conv(cout, cin, 3) + lin(cout, cfg.embed_dim) + gn(cout) +
                    conv(cout, cout, 3);
        if (cfg.guidance_conditioned) n += 2 * lin(cout, cfg.embed_dim);
        if (cin != cout) n += conv(cout, cin, 1);
        return n;
    };
    auto attn = [&](int c) {
        return gn(c) + 4 * lin(c, c) + gn(c) + 2 * lin(c, c) + 2 * lin(c, cfg.token_dim);
    };
    int L = cfg.levels();
    int64_t total = conv(cfg.channels(0), cfg.in_channels(), 3) +
                    2 * lin(cfg.embed_dim, cfg.embed_dim);
    for (int l = 0; l < L; ++l) {
        total += rb(cfg.channels(l), cfg.channels(l));
        if (cfg.attention_levels.count(l)) total += attn(cfg.channels(l));
        if (l + 1 < L) total += conv(cfg.channels(l + 1), cfg.channels(l), 3);
    }
    total += rb(cfg.channels(L - 1), cfg.channels(L - 1));
    for (int l = L - 1; l >= 0; --l) {
        total += rb(2 * cfg.channels(l), cfg.channels(l));
        if (cfg.attention_levels.count(l)) total += attn(cfg.channels(l));
        if (l > 0) total += conv(cfg.channels(l - 1), cfg.channels(l), 3);
    }
    total += gn(cfg.channels(0)) + conv(cfg.latent_channels, cfg.channels(0), 3);
    return total;
}

}  // namespace

TEST_SUITE_BEGIN("denoiser");

TEST_CASE("sinusoidal embedding closed forms") {
    Tensor z = sinusoidal_embed(0.f, 8);
    for (int i = 0; i < 4; ++i) {
        CHECK(z.data[i] == 0.f);
        CHECK(z.data[4 + i] == 1.f);
    }

    Tensor e = sinusoidal_embed(1.f, 4);
    CHECK(e.data[0] == doctest::Approx(std::sin(1.0)));
    CHECK(e.data[1] == doctest::Approx(std::sin(1e-4)));
    CHECK(e.data[2] == doctest::Approx(std::cos(1.0)));
    CHECK(e.data[3] == doctest::Approx(1.0).epsilon(1e-6));

    Tensor a = sinusoidal_embed(123.45f, 64);
    Tensor b = sinusoidal_embed(123.45f, 64);
    CHECK(max_abs_diff(a, b) == 0.f);
    CHECK(a.data.abs().maxCoeff() <= 1.f);

    CHECK_THROWS_AS(sinusoidal_embed(1.f, 5), std::invalid_argument);
    CHECK_THROWS_AS(sinusoidal_embed(1.f, 0), std::invalid_argument);
}

TEST_CASE("build is seeded and reproducible") {
    Rng a(99), b(99), c(100);
    Denoiser m1 = build_denoiser(toy_config(), a);
    Denoiser m2 = build_denoiser(toy_config(), b);
    Denoiser m3 = build_denoiser(toy_config(), c);
    CHECK(m1.params.checksum() == m2.params.checksum());
    CHECK(m1.params.checksum() != m3.params.checksum());
}

TEST_CASE("toy config parameter count matches the shape-sum oracle") {
    Rng rng(1);
    Denoiser m = build_denoiser(toy_config(), rng);
    CHECK(m.params.param_count() == expected_param_count(toy_config()));

    Denoiser g = build_denoiser(toy_config(true), rng);
    CHECK(g.params.param_count() == expected_param_count(toy_config(true)));
}

TEST_CASE("pruning level-0 attention strictly lowers flops and parameters") {
    DenoiserConfig full = toy_config();
    DenoiserConfig pruned = toy_config();
    pruned.attention_levels = {1};
    Rng rng(2);
    Denoiser mf = build_denoiser(full, rng);
    Denoiser mp = build_denoiser(pruned, rng);
    CHECK(mp.params.param_count() < mf.params.param_count());
    CHECK(flops_of(denoiser_catalog(pruned, 8, 8)) < flops_of(denoiser_catalog(full, 8, 8)));

    DenoiserConfig bad = toy_config();
    bad.attention_levels = {5};
    CHECK_THROWS_AS(build_denoiser(bad, rng), std::invalid_argument);
}

TEST_CASE("forward output shape and determinism") {
    Rng rng(3);
    Denoiser m = build_denoiser(toy_config(), rng);
    Tensor x = toy_input(rng, m.cfg);
    Conditioning cond = toy_cond(rng);
    Tensor y1 = denoiser_forward(m, x, 10.f, cond);
    Tensor y2 = denoiser_forward(m, x, 10.f, cond);
    CHECK(y1.shape == std::vector<int>{4, 8, 8});
    CHECK(max_abs_diff(y1, y2) == 0.f);

    Tensor bad = rng.normal_tensor({3, 8, 8});
    CHECK_THROWS_AS(denoiser_forward(m, bad, 10.f, cond), std::invalid_argument);
}

TEST_CASE("guidance scales on a non-conditioned model are rejected") {
    Rng rng(4);
    Denoiser m = build_denoiser(toy_config(), rng);
    Tensor x = toy_input(rng, m.cfg);
    Conditioning cond = toy_cond(rng, 2.f, 7.5f);
    CHECK_THROWS_AS(denoiser_forward(m, x, 10.f, cond), std::invalid_argument);
}

TEST_CASE("zeroed guidance pathways reproduce the unconditioned model bitwise") {
    Rng rng(5);
    Denoiser teacher = build_denoiser(toy_config(), rng);
    Denoiser student = make_guidance_student(teacher);

    Tensor x = toy_input(rng, teacher.cfg);
    Conditioning plain = toy_cond(rng);
    Conditioning scaled = plain;
    scaled.s_image = 2.4f;
    scaled.s_text = 9.5f;

    Tensor yt = denoiser_forward(teacher, x, 440.f, plain);
    Tensor ys = denoiser_forward(student, x, 440.f, scaled);
    CHECK(max_abs_diff(yt, ys) == 0.f);

    // any nonzero projection breaks the equivalence (sanity of the test)
    student.params.get("mid.rb.gT.w").value.data[0] = 0.5f;
    Tensor ys2 = denoiser_forward(student, x, 440.f, scaled);
    CHECK(max_abs_diff(yt, ys2) > 0.f);
}

TEST_CASE("denoiser gradient wrt input matches finite differences") {
    Rng rng(6);
    Denoiser m = build_denoiser(toy_config(), rng);
    Tensor x0 = toy_input(rng, m.cfg);
    Conditioning cond = toy_cond(rng);

    Graph g;
    Var x = g.leaf(x0, true);
    AttentionContext ctx;
    Var out = denoiser_forward_graph(g, m, x, 17.f, cond, ctx);
    Var loss = mean_all(g, out);
    g.backward(loss);
    Tensor analytic = g.grad(x);
    double gmax = analytic.data.abs().maxCoeff();

    Rng pick(7);
    double worst = 0.0;
    const float h = 2e-2f;
    for (int rep = 0; rep < 24; ++rep) {
        int64_t i = pick.uniform_int(static_cast<int>(x0.size()));
        Tensor xp = x0, xm = x0;
        xp.data[i] += h;
        xm.data[i] -= h;
        AttentionContext c1, c2;
        Graph gp, gm;
        double fp = gp.val(mean_all(gp, denoiser_forward_graph(gp, m, gp.constant(xp), 17.f, cond, c1))).data[0];
        double fm = gm.val(mean_all(gm, denoiser_forward_graph(gm, m, gm.constant(xm), 17.f, cond, c2))).data[0];
        double fd = (fp - fm) / (2.0 * h);
        worst = std::max(worst, std::abs(fd - analytic.data[i]) / gmax);
    }
    CHECK(worst < 1e-3);
}

TEST_CASE("gradient wrt the guidance embedding input matches finite differences") {
    Rng rng(8);
    Denoiser m = build_denoiser(toy_config(true), rng);
    Tensor x0 = toy_input(rng, m.cfg);
    Conditioning cond = toy_cond(rng, 2.f, 8.f);
    Tensor gi = sinusoidal_embed(cond.s_image, m.cfg.embed_dim);
    Tensor gt0 = sinusoidal_embed(cond.s_text, m.cfg.embed_dim);

    auto forward_with = [&](Graph& g, Var gt) {
        GuidanceEmbedOverride ovr{g.constant(gi), gt};
        AttentionContext ctx;
        Var out = denoiser_forward_graph(g, m, g.constant(x0), 17.f, cond, ctx, &ovr);
        return mean_all(g, out);
    };

    Graph g;
    Var gt = g.leaf(gt0, true);
    Var loss = forward_with(g, gt);
    g.backward(loss);
    Tensor analytic = g.grad(gt);
    double gmax = analytic.data.abs().maxCoeff();

    double worst = 0.0;
    const float h = 2e-2f;
    for (int64_t i = 0; i < gt0.size(); i += 5) {
        Tensor gp = gt0, gmn = gt0;
        gp.data[i] += h;
        gmn.data[i] -= h;
        Graph g1, g2;
        double fp = g1.val(forward_with(g1, g1.constant(gp))).data[0];
        double fm = g2.val(forward_with(g2, g2.constant(gmn))).data[0];
        double fd = (fp - fm) / (2.0 * h);
        worst = std::max(worst, std::abs(fd - analytic.data[i]) / gmax);
    }
    CHECK(worst < 1e-3);
}

TEST_CASE("cross_frame_attention reduces to self-attention for a single self anchor") {
    Rng rng(9);
    int n = 6, d = 4;
    Tensor q = rng.normal_tensor({n, d});
    Tensor k = rng.normal_tensor({n, d});
    Tensor v = rng.normal_tensor({n, d});

    Tensor self_out = cross_frame_attention(q, {{k, v}});

    // brute-force softmax oracle
    Tensor expect({n, d});
    for (int i = 0; i < n; ++i) {
        std::vector<double> scores(n);
        double mx = -1e30;
        for (int j = 0; j < n; ++j) {
            double s = 0;
            for (int c = 0; c < d; ++c) s += q.mat(n, d)(i, c) * k.mat(n, d)(j, c);
            scores[j] = s / std::sqrt(static_cast<double>(d));
            mx = std::max(mx, scores[j]);
        }
        double z = 0;
        for (double& s : scores) {
            s = std::exp(s - mx);
            z += s;
        }
        for (int c = 0; c < d; ++c) {
            double acc = 0;
            for (int j = 0; j < n; ++j) acc += scores[j] / z * v.mat(n, d)(j, c);
            expect.mat(n, d)(i, c) = static_cast<float>(acc);
        }
    }
    CHECK(max_abs_diff(self_out, expect) < 1e-5);
}

TEST_CASE("cross_frame_attention with constant values returns that constant") {
    Rng rng(10);
    int n = 5, d = 3;
    Tensor q = rng.normal_tensor({n, d});
    Tensor k1 = rng.normal_tensor({n, d});
    Tensor k2 = rng.normal_tensor({2, d});
    Tensor v1 = Tensor::full({n, d}, 0.7f);
    Tensor v2 = Tensor::full({2, d}, 0.7f);
    Tensor out = cross_frame_attention(q, {{k1, v1}, {k2, v2}});
    for (int64_t i = 0; i < out.size(); ++i) CHECK(out.data[i] == doctest::Approx(0.7f).epsilon(1e-5));
}

TEST_CASE("cross_frame_attention two-anchor toy matches dense evaluation") {
    // 2x2 identity-like toy
    Tensor q = Tensor::from({2, 2}, {1.f, 0.f, 0.f, 1.f});
    Tensor k1 = Tensor::from({2, 2}, {1.f, 0.f, 0.f, 1.f});
    Tensor v1 = Tensor::from({2, 2}, {1.f, 2.f, 3.f, 4.f});
    Tensor k2 = Tensor::from({1, 2}, {1.f, 1.f});
    Tensor v2 = Tensor::from({1, 2}, {5.f, 6.f});
    Tensor out = cross_frame_attention(q, {{k1, v1}, {k2, v2}});

    // dense oracle over the concatenated keys
    float inv = 1.f / std::sqrt(2.f);
    for (int row = 0; row < 2; ++row) {
        float s[3] = {q.mat(2, 2)(row, 0) * inv, q.mat(2, 2)(row, 1) * inv,
                      (q.mat(2, 2)(row, 0) + q.mat(2, 2)(row, 1)) * inv};
        float mx = std::max({s[0], s[1], s[2]});
        float e[3], z = 0.f;
        for (int j = 0; j < 3; ++j) {
            e[j] = std::exp(s[j] - mx);
            z += e[j];
        }
        float vrows[3][2] = {{1.f, 2.f}, {3.f, 4.f}, {5.f, 6.f}};
        for (int c = 0; c < 2; ++c) {
            float acc = 0.f;
            for (int j = 0; j < 3; ++j) acc += e[j] / z * vrows[j][c];
            CHECK(out.mat(2, 2)(row, c) == doctest::Approx(acc).epsilon(1e-5));
        }
    }

    CHECK_THROWS_AS(cross_frame_attention(q, {}), std::invalid_argument);
    Tensor bad = Tensor::from({1, 3}, {1.f, 2.f, 3.f});
    CHECK_THROWS_AS(cross_frame_attention(q, {{bad, bad}}), std::invalid_argument);
}

TEST_CASE("captured anchor K/V fed back as cross-frame reproduces self-attention bitwise") {
    Rng rng(11);
    Denoiser m = build_denoiser(toy_config(), rng);
    Tensor x = toy_input(rng, m.cfg);
    Conditioning cond = toy_cond(rng);

    AttentionContext capture;
    AttentionContext::SiteKv kv;
    capture.capture_sink = &kv;
    Tensor self_out = denoiser_forward(m, x, 30.f, cond, capture);
    CHECK(kv.size() == 4);  // attention at both levels, down and up

    AttentionContext cross;
    cross.mode = AttentionContext::Mode::CrossFrame;
    cross.anchor_kv = {kv};
    Tensor cross_out = denoiser_forward(m, x, 30.f, cond, cross);
    CHECK(max_abs_diff(self_out, cross_out) == 0.f);

    AttentionContext broken;
    broken.mode = AttentionContext::Mode::CrossFrame;
    CHECK_THROWS_AS(denoiser_forward(m, x, 30.f, cond, broken), std::invalid_argument);
    AttentionContext selfish;
    selfish.anchor_kv = {kv};
    CHECK_THROWS_AS(denoiser_forward(m, x, 30.f, cond, selfish), std::invalid_argument);
}

TEST_SUITE_END();
