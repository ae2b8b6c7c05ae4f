#include "moviekit/schedules.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace moviekit {

std::string to_string(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::VpLinear: return "vp-linear";
        case ScheduleKind::EulerDiscrete: return "euler-discrete";
        case ScheduleKind::LcmUniform: return "lcm-uniform";
    }
    return "?";
}

std::string to_string(Prediction p) {
    switch (p) {
        case Prediction::Epsilon: return "epsilon";
        case Prediction::V: return "v";
        case Prediction::Sample: return "sample";
    }
    return "?";
}

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "vp-linear") return ScheduleKind::VpLinear;
    if (s == "euler-discrete") return ScheduleKind::EulerDiscrete;
    if (s == "lcm-uniform") return ScheduleKind::LcmUniform;
    throw std::invalid_argument("unknown schedule kind: " + s);
}

Prediction prediction_from_string(const std::string& s) {
    if (s == "epsilon") return Prediction::Epsilon;
    if (s == "v") return Prediction::V;
    if (s == "sample") return Prediction::Sample;
    throw std::invalid_argument("unknown prediction kind: " + s);
}

SamplerMethod sampler_method_from_string(const std::string& s) {
    if (s == "ddim") return SamplerMethod::Ddim;
    if (s == "euler") return SamplerMethod::Euler;
    if (s == "lcm") return SamplerMethod::Lcm;
    throw std::invalid_argument("unknown sampler method: " + s);
}

void NoiseSchedule::check_step(int t) const {
    if (t < 0 || t >= num_steps)
        throw std::out_of_range("step " + std::to_string(t) + " outside [0," +
                                std::to_string(num_steps) + ")");
}

namespace {

constexpr int kParentSteps = 1000;
constexpr float kBetaStart = 1e-4f;
constexpr float kBetaEnd = 2e-2f;

// Index 0 is clean; t noising steps applied after it.
NoiseSchedule vp_linear(int num_steps, Prediction prediction) {
    NoiseSchedule s;
    s.kind = ScheduleKind::VpLinear;
    s.num_steps = num_steps;
    s.prediction = prediction;
    s.alphas.resize(num_steps);
    s.sigmas.resize(num_steps);
    s.timesteps.resize(num_steps);
    double abar = 1.0;
    for (int t = 0; t < num_steps; ++t) {
        if (t > 0) {
            double frac = num_steps > 2 ? static_cast<double>(t - 1) / (num_steps - 2) : 0.0;
            double beta = kBetaStart + (kBetaEnd - kBetaStart) * frac;
            abar *= 1.0 - beta;
        }
        s.alphas[t] = static_cast<float>(std::sqrt(abar));
        s.sigmas[t] = static_cast<float>(std::sqrt(1.0 - abar));
        s.timesteps[t] = static_cast<float>(t);
    }
    return s;
}

// Nearest parent timestep whose variance-exploding sigma matches.
float parent_timestep_for_ve_sigma(const NoiseSchedule& parent, float sigma_ve) {
    int best = 0;
    float best_err = std::numeric_limits<float>::max();
    for (int t = 0; t < parent.num_steps; ++t) {
        float a = parent.alphas[t];
        if (a <= 0.f) continue;
        float err = std::abs(parent.sigmas[t] / a - sigma_ve);
        if (err < best_err) {
            best_err = err;
            best = t;
        }
    }
    return static_cast<float>(best);
}

NoiseSchedule euler_discrete(int num_steps, Prediction prediction, EulerRange range) {
    NoiseSchedule s;
    s.kind = ScheduleKind::EulerDiscrete;
    s.num_steps = num_steps;
    s.prediction = prediction;
    s.alphas.assign(num_steps, 1.f);
    s.sigmas.resize(num_steps);
    s.timesteps.resize(num_steps);
    NoiseSchedule parent = vp_linear(kParentSteps, prediction);
    for (int t = 0; t < num_steps; ++t) {
        double frac = num_steps > 1 ? static_cast<double>(t) / (num_steps - 1) : 1.0;
        float sig = static_cast<float>(range.sigma_min *
                                       std::pow(range.sigma_max / range.sigma_min, frac));
        s.sigmas[t] = sig;
        s.timesteps[t] = parent_timestep_for_ve_sigma(parent, sig);
    }
    return s;
}

NoiseSchedule lcm_uniform(int num_steps, Prediction prediction) {
    NoiseSchedule parent = vp_linear(kParentSteps, prediction);
    NoiseSchedule s;
    s.kind = ScheduleKind::LcmUniform;
    s.num_steps = num_steps;
    s.prediction = prediction;
    s.alphas.resize(num_steps);
    s.sigmas.resize(num_steps);
    s.timesteps.resize(num_steps);
    for (int i = 0; i < num_steps; ++i) {
        int t = static_cast<int>(std::lround(static_cast<double>(i + 1) * (kParentSteps - 1) /
                                             num_steps));
        t = std::clamp(t, 0, kParentSteps - 1);
        s.alphas[i] = parent.alphas[t];
        s.sigmas[i] = parent.sigmas[t];
        s.timesteps[i] = static_cast<float>(t);
    }
    return s;
}

}  // namespace

NoiseSchedule make_schedule(ScheduleKind kind, int num_steps, Prediction prediction,
                            EulerRange euler_range) {
    if (num_steps <= 0) throw std::invalid_argument("make_schedule: num_steps must be >= 1");
    switch (kind) {
        case ScheduleKind::VpLinear: return vp_linear(num_steps, prediction);
        case ScheduleKind::EulerDiscrete: return euler_discrete(num_steps, prediction, euler_range);
        case ScheduleKind::LcmUniform: return lcm_uniform(num_steps, prediction);
    }
    throw std::invalid_argument("make_schedule: unknown kind");
}

Tensor add_noise(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& sched) {
    require_same_shape(x0, eps, "add_noise");
    sched.check_step(t);
    Tensor out = x0;
    out.data = sched.alpha(t) * x0.data + sched.sigma(t) * eps.data;
    return out;
}

Tensor predicted_x0(const Tensor& model_out, const Tensor& x_t, float alpha, float sigma,
                    Prediction pred) {
    Tensor out = x_t;
    switch (pred) {
        case Prediction::Epsilon:
            if (alpha == 0.f) throw std::domain_error("predicted_x0: alpha=0 for epsilon prediction");
            out.data = (x_t.data - sigma * model_out.data) / alpha;
            return out;
        case Prediction::V: {
            float denom = alpha * alpha + sigma * sigma;
            out.data = (alpha * x_t.data - sigma * model_out.data) / denom;
            return out;
        }
        case Prediction::Sample: return model_out;
    }
    throw std::invalid_argument("predicted_x0: unknown prediction");
}

Tensor predicted_eps(const Tensor& model_out, const Tensor& x_t, float alpha, float sigma,
                     Prediction pred) {
    Tensor out = x_t;
    switch (pred) {
        case Prediction::Epsilon: return model_out;
        case Prediction::V: {
            float denom = alpha * alpha + sigma * sigma;
            out.data = (sigma * x_t.data + alpha * model_out.data) / denom;
            return out;
        }
        case Prediction::Sample:
            if (sigma == 0.f) {
                out.data.setZero();
                return out;
            }
            out.data = (x_t.data - alpha * model_out.data) / sigma;
            return out;
    }
    throw std::invalid_argument("predicted_eps: unknown prediction");
}

Tensor convert_prediction(const Tensor& pred, Prediction from, Prediction to, const Tensor& x_t,
                          int t, const NoiseSchedule& sched) {
    if (from == to) throw std::invalid_argument("convert_prediction: from == to");
    require_same_shape(pred, x_t, "convert_prediction");
    sched.check_step(t);
    float a = sched.alpha(t);
    float s = sched.sigma(t);
    Tensor x0 = predicted_x0(pred, x_t, a, s, from);
    switch (to) {
        case Prediction::Sample: return x0;
        case Prediction::Epsilon: return predicted_eps(pred, x_t, a, s, from);
        case Prediction::V: {
            Tensor eps = predicted_eps(pred, x_t, a, s, from);
            Tensor v = x0;
            v.data = a * eps.data - s * x0.data;
            return v;
        }
    }
    throw std::invalid_argument("convert_prediction: unknown target");
}

float precondition_scale(int t, const NoiseSchedule& sched) {
    sched.check_step(t);
    float s = sched.sigma(t);
    return 1.f / std::sqrt(s * s + 1.f);
}

Tensor precondition_input(const Tensor& x, int t, const NoiseSchedule& sched,
                          PreconditionVariant) {
    Tensor out = x;
    out.data *= precondition_scale(t, sched);
    return out;
}

Tensor sampler_step(const Tensor& model_out, const Tensor& x_t, int t, int t_next,
                    const NoiseSchedule& sched, SamplerMethod method, const Tensor* fresh_noise) {
    sched.check_step(t);
    if (t_next != -1) sched.check_step(t_next);
    if (t_next >= t) throw std::invalid_argument("sampler_step: requires t > t_next in noise order");
    float a_t = sched.alpha(t), s_t = sched.sigma(t);
    float a_n = t_next == -1 ? 1.f : sched.alpha(t_next);
    float s_n = t_next == -1 ? 0.f : sched.sigma(t_next);

    Tensor x0 = predicted_x0(model_out, x_t, a_t, s_t, sched.prediction);
    switch (method) {
        case SamplerMethod::Ddim: {
            Tensor eps = predicted_eps(model_out, x_t, a_t, s_t, sched.prediction);
            Tensor out = x_t;
            out.data = a_n * x0.data + s_n * eps.data;
            return out;
        }
        case SamplerMethod::Euler: {
            // variance-exploding form; exact no-op when the levels coincide
            if (s_t == 0.f) throw std::domain_error("euler step from sigma=0");
            float sv_t = s_t / a_t;
            float sv_n = a_n == 0.f ? 0.f : s_n / a_n;
            Tensor out = x_t;
            Eigen::ArrayXf xv = x_t.data / a_t;
            Eigen::ArrayXf d = (xv - x0.data) / sv_t;
            out.data = a_n * (xv + (sv_n - sv_t) * d);
            return out;
        }
        case SamplerMethod::Lcm: {
            if (t_next == -1 || s_n == 0.f) return x0;
            if (fresh_noise == nullptr)
                throw std::invalid_argument("lcm step to a noisy level needs fresh noise");
            require_same_shape(*fresh_noise, x_t, "sampler_step lcm noise");
            Tensor out = x_t;
            out.data = a_n * x0.data + s_n * fresh_noise->data;
            return out;
        }
    }
    throw std::invalid_argument("sampler_step: unknown method");
}

int sample_logit_normal_t(const TimestepSamplerConfig& cfg, Rng& rng) {
    if (cfg.stddev <= 0.0) throw std::invalid_argument("logit-normal sampler: stddev must be > 0");
    if (cfg.num_steps < 1) throw std::invalid_argument("logit-normal sampler: num_steps must be >= 1");
    double u = rng.normal(cfg.mean, cfg.stddev);
    double p = 1.0 / (1.0 + std::exp(-u));
    // nearest index rather than floor so the degenerate s->0 limit lands on
    // sigmoid(mean)*num_steps exactly
    int idx = static_cast<int>(std::lround(p * cfg.num_steps));
    return std::clamp(idx, 0, cfg.num_steps - 1);
}

std::string NoiseSchedule::to_json() const {
    nlohmann::json j;
    j["kind"] = to_string(kind);
    j["prediction"] = to_string(prediction);
    j["num_steps"] = num_steps;
    j["alphas"] = alphas;
    j["sigmas"] = sigmas;
    j["timesteps"] = timesteps;
    return j.dump(2);
}

NoiseSchedule NoiseSchedule::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    NoiseSchedule s;
    s.kind = schedule_kind_from_string(j.at("kind").get<std::string>());
    s.prediction = prediction_from_string(j.at("prediction").get<std::string>());
    s.num_steps = j.at("num_steps").get<int>();
    s.alphas = j.at("alphas").get<std::vector<float>>();
    s.sigmas = j.at("sigmas").get<std::vector<float>>();
    s.timesteps = j.at("timesteps").get<std::vector<float>>();
    return s;
}

}  // namespace moviekit
