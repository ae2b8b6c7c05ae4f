#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "moviekit/rng.hpp"
#include "moviekit/schedules.hpp"

using namespace moviekit;

TEST_SUITE_BEGIN("schedules");

TEST_CASE("vp-linear satisfies the variance-preserving identity at every step") {
    NoiseSchedule s = make_schedule(ScheduleKind::VpLinear, 1000, Prediction::Epsilon);
    REQUIRE(s.num_steps == 1000);
    CHECK(s.sigma(0) == 0.f);
    CHECK(s.alpha(0) == 1.f);
    for (int t = 0; t < 1000; ++t) {
        CHECK(std::abs(s.alpha(t) * s.alpha(t) + s.sigma(t) * s.sigma(t) - 1.f) < 1e-6f);
        if (t > 0) {
            CHECK(s.alpha(t) <= s.alpha(t - 1));
            CHECK(s.sigma(t) >= s.sigma(t - 1));
            CHECK(s.alpha(t) > 0.f);
            CHECK(s.sigma(t) > 0.f);
        }
    }
}

TEST_CASE("euler-discrete has 8 log-spaced non-decreasing sigma levels") {
    NoiseSchedule s = make_schedule(ScheduleKind::EulerDiscrete, 8, Prediction::V);
    REQUIRE(s.num_steps == 8);
    CHECK(s.sigma(0) == doctest::Approx(0.1f));
    CHECK(s.sigma(7) == doctest::Approx(10.f));
    for (int t = 1; t < 8; ++t) {
        CHECK(s.sigma(t) > s.sigma(t - 1));
        CHECK(s.alpha(t) == 1.f);
        CHECK(s.sigma(t) / s.sigma(t - 1) ==
              doctest::Approx(std::pow(100.f, 1.f / 7.f)).epsilon(1e-4));
    }
}

TEST_CASE("lcm-uniform picks 5 uniformly spaced steps over the parent grid") {
    NoiseSchedule s = make_schedule(ScheduleKind::LcmUniform, 5, Prediction::Epsilon);
    REQUIRE(s.num_steps == 5);
    CHECK(s.timestep(4) == 999.f);
    for (int t = 1; t < 5; ++t) {
        float gap = s.timestep(t) - s.timestep(t - 1);
        CHECK(std::abs(gap - 999.f / 5.f) <= 1.f);
        CHECK(s.sigma(t) > s.sigma(t - 1));
    }
    NoiseSchedule parent = make_schedule(ScheduleKind::VpLinear, 1000, Prediction::Epsilon);
    for (int t = 0; t < 5; ++t) {
        int pt = static_cast<int>(s.timestep(t));
        CHECK(s.alpha(t) == parent.alpha(pt));
        CHECK(s.sigma(t) == parent.sigma(pt));
    }
}

TEST_CASE("make_schedule rejects bad arguments") {
    CHECK_THROWS_AS(make_schedule(ScheduleKind::VpLinear, 0, Prediction::Epsilon),
                    std::invalid_argument);
    CHECK_THROWS_AS(schedule_kind_from_string("cosine"), std::invalid_argument);
}

TEST_CASE("add_noise endpoints and hand-computed example") {
    NoiseSchedule s = make_schedule(ScheduleKind::VpLinear, 1000, Prediction::Epsilon);
    Rng rng(1);
    Tensor x0 = rng.normal_tensor({4, 2, 2});
    Tensor eps = rng.normal_tensor({4, 2, 2});

    CHECK(max_abs_diff(add_noise(x0, eps, 0, s), x0) == 0.f);

    Tensor zero({4, 2, 2});
    Tensor out = add_noise(zero, eps, 500, s);
    Tensor expect = eps;
    expect.data *= s.sigma(500);
    CHECK(max_abs_diff(out, expect) < 1e-7);

    NoiseSchedule custom;
    custom.num_steps = 1;
    custom.alphas = {0.8f};
    custom.sigmas = {0.6f};
    custom.timesteps = {0.f};
    Tensor a = Tensor::from({2}, {1.f, 2.f});
    Tensor e = Tensor::from({2}, {1.f, -1.f});
    Tensor r = add_noise(a, e, 0, custom);
    CHECK(r.data[0] == doctest::Approx(1.4f));
    CHECK(r.data[1] == doctest::Approx(1.0f));

    CHECK_THROWS_AS(add_noise(a, eps, 0, custom), std::invalid_argument);
    CHECK_THROWS_AS(add_noise(a, e, 3, custom), std::out_of_range);
}

TEST_CASE("add_noise is linear in both arguments") {
    NoiseSchedule s = make_schedule(ScheduleKind::VpLinear, 1000, Prediction::Epsilon);
    Rng rng(2);
    for (int rep = 0; rep < 10; ++rep) {
        int t = rng.uniform_int(1000);
        Tensor x1 = rng.normal_tensor({8}), x2 = rng.normal_tensor({8});
        Tensor e1 = rng.normal_tensor({8}), e2 = rng.normal_tensor({8});
        Tensor sum_x = x1, sum_e = e1;
        sum_x.data += x2.data;
        sum_e.data += e2.data;
        Tensor lhs = add_noise(sum_x, sum_e, t, s);
        Tensor rhs = add_noise(x1, e1, t, s);
        rhs.data += add_noise(x2, e2, t, s).data;
        CHECK(max_abs_diff(lhs, rhs) < 1e-5);
    }
}

TEST_CASE("prediction conversion identities and hand value") {
    NoiseSchedule s = make_schedule(ScheduleKind::VpLinear, 1000, Prediction::Epsilon);
    Rng rng(3);

    Tensor eps = rng.normal_tensor({6});
    Tensor x_t = rng.normal_tensor({6});
    Tensor v0 = convert_prediction(eps, Prediction::Epsilon, Prediction::V, x_t, 0, s);
    CHECK(max_abs_diff(v0, eps) < 1e-6);

    for (int t = 0; t < 1000; t += 37) {
        if (s.alpha(t) <= 1e-3f) continue;
        Tensor e = rng.normal_tensor({6});
        Tensor x = rng.normal_tensor({6});
        Tensor v = convert_prediction(e, Prediction::Epsilon, Prediction::V, x, t, s);
        Tensor back = convert_prediction(v, Prediction::V, Prediction::Epsilon, x, t, s);
        CHECK(max_abs_diff(back, e) < 1e-5);
    }

    // eps=[1], x_t=[1], alpha=0.8, sigma=0.6: x0=(1-0.6)/0.8=0.5, v=0.8-0.6*0.5=0.5
    NoiseSchedule custom;
    custom.num_steps = 1;
    custom.alphas = {0.8f};
    custom.sigmas = {0.6f};
    custom.timesteps = {0.f};
    Tensor one = Tensor::from({1}, {1.f});
    Tensor v = convert_prediction(one, Prediction::Epsilon, Prediction::V, one, 0, custom);
    CHECK(v.data[0] == doctest::Approx(0.5f));
    Tensor x0 = convert_prediction(one, Prediction::Epsilon, Prediction::Sample, one, 0, custom);
    CHECK(x0.data[0] == doctest::Approx(0.5f));

    CHECK_THROWS_AS(
        convert_prediction(one, Prediction::Epsilon, Prediction::Epsilon, one, 0, custom),
        std::invalid_argument);
    NoiseSchedule degenerate = custom;
    degenerate.alphas = {0.f};
    CHECK_THROWS_AS(convert_prediction(one, Prediction::Epsilon, Prediction::V, one, 0, degenerate),
                    std::domain_error);
}

TEST_CASE("input preconditioning closed form") {
    NoiseSchedule custom;
    custom.num_steps = 3;
    custom.alphas = {1.f, 1.f, 1.f};
    custom.sigmas = {0.f, 1.f, std::sqrt(3.f)};
    custom.timesteps = {0.f, 1.f, 2.f};

    Tensor x = Tensor::from({2}, {2.f, -2.f});
    CHECK(max_abs_diff(precondition_input(x, 0, custom, PreconditionVariant::Student), x) == 0.f);
    CHECK(precondition_scale(1, custom) == doctest::Approx(1.f / std::sqrt(2.f)));
    Tensor half = precondition_input(x, 2, custom, PreconditionVariant::Discriminator);
    CHECK(half.data[0] == doctest::Approx(1.f));
    CHECK(half.data[1] == doctest::Approx(-1.f));
}

TEST_CASE("ddim reconstructs x0 exactly when the model returns the true noise") {
    NoiseSchedule s = make_schedule(ScheduleKind::VpLinear, 1000, Prediction::Epsilon);
    Rng rng(4);
    for (int rep = 0; rep < 100; ++rep) {
        int t = 1 + rng.uniform_int(999);
        Tensor x0 = rng.normal_tensor({4, 2, 2});
        Tensor eps = rng.normal_tensor({4, 2, 2});
        Tensor x_t = add_noise(x0, eps, t, s);
        Tensor rec = sampler_step(eps, x_t, t, 0, s, SamplerMethod::Ddim);
        CHECK(max_abs_diff(rec, x0) < 1e-5);
    }
}

TEST_CASE("euler step with equal sigma levels is the identity") {
    NoiseSchedule custom;
    custom.num_steps = 2;
    custom.alphas = {1.f, 1.f};
    custom.sigmas = {2.f, 2.f};
    custom.timesteps = {0.f, 1.f};
    Rng rng(5);
    Tensor x = rng.normal_tensor({5});
    Tensor model_out = rng.normal_tensor({5});
    Tensor next = sampler_step(model_out, x, 1, 0, custom, SamplerMethod::Euler);
    CHECK(max_abs_diff(next, x) < 1e-6);
}

TEST_CASE("lcm single step from pure noise matches the hand-built x0 estimate") {
    NoiseSchedule s = make_schedule(ScheduleKind::LcmUniform, 5, Prediction::Epsilon);
    Rng rng(6);
    int t = 4;
    Tensor x_t = rng.normal_tensor({6});
    // linear toy denoiser eps_hat = 0.5 * x_t
    Tensor eps_hat = x_t;
    eps_hat.data *= 0.5f;
    Tensor got = sampler_step(eps_hat, x_t, t, -1, s, SamplerMethod::Lcm);
    Tensor expect = x_t;
    expect.data = (x_t.data - s.sigma(t) * eps_hat.data) / s.alpha(t);
    CHECK(max_abs_diff(got, expect) < 1e-6);

    CHECK_THROWS_AS(sampler_step(eps_hat, x_t, 4, 2, s, SamplerMethod::Lcm), std::invalid_argument);
    CHECK_THROWS_AS(sampler_step(eps_hat, x_t, 2, 3, s, SamplerMethod::Ddim), std::invalid_argument);
}

TEST_CASE("logit-normal sampler medians match the sigmoid oracle") {
    Rng rng(42);
    auto empirical_median = [&](double mean, double stddev) {
        TimestepSamplerConfig cfg{mean, stddev, 1000};
        std::vector<int> draws(100000);
        for (int& d : draws) d = sample_logit_normal_t(cfg, rng);
        std::nth_element(draws.begin(), draws.begin() + draws.size() / 2, draws.end());
        return draws[draws.size() / 2];
    };
    double oracle_m1 = 1.0 / (1.0 + std::exp(1.0)) * 1000.0;  // 268.94
    CHECK(std::abs(empirical_median(-1.0, 1.0) - oracle_m1) <= 10.0);
    CHECK(std::abs(empirical_median(0.0, 1.0) - 500.0) <= 10.0);

    TimestepSamplerConfig tight{0.0, 1e-6, 1000};
    for (int i = 0; i < 100; ++i) CHECK(sample_logit_normal_t(tight, rng) == 500);
}

TEST_CASE("logit-normal sampler is bitwise reproducible under a fixed seed") {
    TimestepSamplerConfig cfg{-1.0, 1.0, 1000};
    Rng a(123), b(123);
    for (int i = 0; i < 1000; ++i)
        CHECK(sample_logit_normal_t(cfg, a) == sample_logit_normal_t(cfg, b));
    CHECK_THROWS_AS(sample_logit_normal_t(TimestepSamplerConfig{0.0, 0.0, 10}, a),
                    std::invalid_argument);
}

TEST_CASE("schedule json export round trips") {
    NoiseSchedule s = make_schedule(ScheduleKind::EulerDiscrete, 8, Prediction::V);
    NoiseSchedule back = NoiseSchedule::from_json(s.to_json());
    CHECK(back.kind == s.kind);
    CHECK(back.prediction == s.prediction);
    CHECK(back.num_steps == s.num_steps);
    CHECK(back.alphas == s.alphas);
    CHECK(back.sigmas == s.sigmas);
    CHECK(back.timesteps == s.timesteps);
}

TEST_SUITE_END();
