#include "doctest.h"

#include <cmath>

#include "moviekit/graph.hpp"
#include "moviekit/rng.hpp"

using namespace moviekit;

namespace {

// Central-difference check of d(loss)/d(x) against the tape over every
// coordinate; error is measured relative to the gradient vector's max-norm.
template <typename Fn>
double fd_rel_err(Fn&& build, Tensor x0, float h = 5e-3f) {
    Graph g;
    Var x = g.leaf(x0, true);
    Var loss = build(g, x);
    g.backward(loss);
    Tensor analytic = g.grad(x);
    double gmax = std::max(1e-8f, analytic.data.abs().maxCoeff());

    double worst = 0.0;
    for (int64_t i = 0; i < x0.size(); ++i) {
        Tensor xp = x0, xm = x0;
        xp.data[i] += h;
        xm.data[i] -= h;
        Graph gp, gm;
        double fp = gp.val(build(gp, gp.leaf(xp, false))).data[0];
        double fm = gm.val(build(gm, gm.leaf(xm, false))).data[0];
        double fd = (fp - fm) / (2.0 * h);
        worst = std::max(worst, std::abs(fd - analytic.data[i]) / gmax);
    }
    return worst;
}

}  // namespace

TEST_SUITE_BEGIN("graph");

TEST_CASE("elementwise and reduction gradients match finite differences") {
    Rng rng(7);
    Tensor x0 = rng.normal_tensor({3, 4, 4});
    double err = fd_rel_err(
        [](Graph& g, Var x) {
            Var y = silu(g, scale(g, x, 1.3f));
            Var z = mul(g, y, sigmoid(g, offset(g, x, 0.2f)));
            return mean_all(g, z);
        },
        x0);
    CHECK(err < 1e-3);
}

TEST_CASE("matmul and softmax gradients match finite differences") {
    Rng rng(8);
    Tensor x0 = rng.normal_tensor({4, 5});
    Tensor w = rng.normal_tensor({6, 5});
    Tensor b = rng.normal_tensor({6});
    double err = fd_rel_err(
        [&](Graph& g, Var x) {
            Var y = linear(g, x, g.constant(w), g.constant(b));
            Var a = softmax_rows(g, y);
            return mse_loss(g, a, g.constant(Tensor::full({4, 6}, 0.1f)));
        },
        x0);
    CHECK(err < 1e-3);
}

TEST_CASE("conv2d gradients match finite differences for input weight and bias") {
    Rng rng(9);
    Tensor x0 = rng.normal_tensor({3, 6, 6});
    Tensor w0 = rng.normal_tensor({4, 3, 3, 3}, 0.f, 0.4f);
    Tensor b0 = rng.normal_tensor({4});
    Tensor target = rng.normal_tensor({4, 3, 3});

    double ex = fd_rel_err(
        [&](Graph& g, Var x) {
            Var y = conv2d(g, x, g.constant(w0), g.constant(b0), 2, 1);
            return mse_loss(g, y, g.constant(target));
        },
        x0);
    CHECK(ex < 1e-3);

    double ew = fd_rel_err(
        [&](Graph& g, Var w) {
            Var y = conv2d(g, g.constant(x0), w, g.constant(b0), 2, 1);
            return mse_loss(g, y, g.constant(target));
        },
        w0);
    CHECK(ew < 1e-3);

    double eb = fd_rel_err(
        [&](Graph& g, Var b) {
            Var y = conv2d(g, g.constant(x0), g.constant(w0), b, 2, 1);
            return mse_loss(g, y, g.constant(target));
        },
        b0);
    CHECK(eb < 1e-3);
}

TEST_CASE("group_norm gradients match finite differences") {
    Rng rng(10);
    Tensor x0 = rng.normal_tensor({4, 3, 3});
    Tensor gamma = rng.normal_tensor({4}, 1.f, 0.2f);
    Tensor beta = rng.normal_tensor({4}, 0.f, 0.2f);
    Tensor target = rng.normal_tensor({4, 3, 3});

    double ex = fd_rel_err(
        [&](Graph& g, Var x) {
            Var y = group_norm(g, x, g.constant(gamma), g.constant(beta), 2);
            return mse_loss(g, y, g.constant(target));
        },
        x0, 2e-3f);
    CHECK(ex < 2e-3);

    double eg = fd_rel_err(
        [&](Graph& g, Var gm) {
            Var y = group_norm(g, g.constant(x0), gm, g.constant(beta), 2);
            return mse_loss(g, y, g.constant(target));
        },
        gamma);
    CHECK(eg < 1e-3);
}

TEST_CASE("upsample concat and channel ops gradients") {
    Rng rng(11);
    Tensor x0 = rng.normal_tensor({2, 3, 3});
    Tensor other = rng.normal_tensor({2, 6, 6});
    Tensor bias = rng.normal_tensor({4});
    Tensor v = rng.normal_tensor({4});
    double err = fd_rel_err(
        [&](Graph& g, Var x) {
            Var up = upsample2x(g, x);
            Var cat = concat_ch(g, up, g.constant(other));
            Var cb = chan_bias_add(g, cat, g.constant(bias));
            Var dot = channel_dot(g, cb, g.constant(v));
            return mean_all(g, mul(g, dot, dot));
        },
        x0);
    CHECK(err < 1e-3);
}

TEST_CASE("tokens round trip and concat_rows gradients") {
    Rng rng(12);
    Tensor x0 = rng.normal_tensor({3, 2, 4});
    Tensor extra = rng.normal_tensor({5, 3});
    double err = fd_rel_err(
        [&](Graph& g, Var x) {
            Var t = chw_to_tokens(g, x);  // {8,3}
            Var cat = concat_rows(g, {t, g.constant(extra)});
            Var y = tokens_to_chw(g, cat, 13, 1);
            return mse_loss(g, y, g.constant(Tensor({3, 13, 1})));
        },
        x0);
    CHECK(err < 1e-3);
}

TEST_CASE("relu hinge composition gradient") {
    Rng rng(13);
    Tensor x0 = rng.normal_tensor({6});
    double err = fd_rel_err(
        [&](Graph& g, Var x) {
            Var h = relu(g, offset(g, scale(g, x, -1.f), 1.f));  // max(0, 1-x)
            return sum_all(g, h);
        },
        x0);
    CHECK(err < 2e-3);  // kink at 1 can land near a sample point
}

TEST_CASE("param accumulation and adam zero-grad is a no-op") {
    ParamStore ps;
    Rng rng(14);
    Param& w = ps.add("w", rng.normal_tensor({3, 3}));
    Tensor before = w.value;

    ps.zero_grads();
    AdamOpt opt{1e-2f};
    opt.update(ps);
    CHECK(max_abs_diff(before, w.value) == 0.f);

    Graph g;
    Var wv = g.param(w);
    Var loss = mse_loss(g, wv, g.constant(Tensor({3, 3})));
    g.backward(loss);
    g.accumulate_param_grads(1.f);
    CHECK(w.grad.data.abs().sum() > 0.f);
    opt.update(ps);
    CHECK(max_abs_diff(before, w.value) > 0.f);
}

TEST_CASE("checksum is order and value sensitive") {
    ParamStore a, b;
    Rng rng(15);
    Tensor t1 = rng.normal_tensor({4});
    Tensor t2 = rng.normal_tensor({4});
    a.add("x", t1);
    a.add("y", t2);
    b.add("x", t1);
    b.add("y", t2);
    CHECK(a.checksum() == b.checksum());
    b.get("y").value.data[0] += 1e-3f;
    CHECK(a.checksum() != b.checksum());
}

TEST_SUITE_END();
