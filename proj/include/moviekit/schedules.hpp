#pragma once

#include <string>
#include <vector>

#include "moviekit/rng.hpp"
#include "moviekit/tensor.hpp"

namespace moviekit {

enum class ScheduleKind { VpLinear, EulerDiscrete, LcmUniform };
enum class Prediction { Epsilon, V, Sample };

std::string to_string(ScheduleKind k);
std::string to_string(Prediction p);
ScheduleKind schedule_kind_from_string(const std::string& s);
Prediction prediction_from_string(const std::string& s);

// Per-step noise tables. Index 0 is the cleanest level; noise grows with t.
// For vp-linear, index 0 is exactly clean (alpha=1, sigma=0) and
// alpha_t^2 + sigma_t^2 = 1 at every step. Euler-discrete stores
// variance-exploding levels (alpha=1, sigma log-spaced). timesteps[] carries
// the model-facing time value embedded by the denoiser at each step
// (parent-grid equivalents for euler/lcm so a vp-trained net sees familiar
// time embeddings).
struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::VpLinear;
    int num_steps = 0;
    std::vector<float> alphas;
    std::vector<float> sigmas;
    std::vector<float> timesteps;
    Prediction prediction = Prediction::Epsilon;

    float alpha(int t) const { return alphas.at(static_cast<size_t>(t)); }
    float sigma(int t) const { return sigmas.at(static_cast<size_t>(t)); }
    float timestep(int t) const { return timesteps.at(static_cast<size_t>(t)); }
    void check_step(int t) const;

    std::string to_json() const;
    static NoiseSchedule from_json(const std::string& text);
};

struct TimestepSamplerConfig {
    double mean = -1.0;
    double stddev = 1.0;
    int num_steps = 1000;
};

struct EulerRange {
    float sigma_min = 0.1f;
    float sigma_max = 10.f;
};

enum class SamplerMethod { Ddim, Euler, Lcm };
SamplerMethod sampler_method_from_string(const std::string& s);

NoiseSchedule make_schedule(ScheduleKind kind, int num_steps, Prediction prediction,
                            EulerRange euler_range = {});

Tensor add_noise(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& sched);

Tensor convert_prediction(const Tensor& pred, Prediction from, Prediction to, const Tensor& x_t,
                          int t, const NoiseSchedule& sched);

enum class PreconditionVariant { Student, Discriminator };

float precondition_scale(int t, const NoiseSchedule& sched);
Tensor precondition_input(const Tensor& x, int t, const NoiseSchedule& sched,
                          PreconditionVariant variant);

// One deterministic update from level t to level t_next (t_next == -1 denotes
// the clean endpoint alpha=1, sigma=0). `fresh_noise` is only consulted by the
// lcm method when re-noising to a positive level.
Tensor sampler_step(const Tensor& model_out, const Tensor& x_t, int t, int t_next,
                    const NoiseSchedule& sched, SamplerMethod method,
                    const Tensor* fresh_noise = nullptr);

int sample_logit_normal_t(const TimestepSamplerConfig& cfg, Rng& rng);

// x0/eps estimates from a model output in any parameterization; exact for all
// (alpha, sigma) with alpha^2+sigma^2 not necessarily 1.
Tensor predicted_x0(const Tensor& model_out, const Tensor& x_t, float alpha, float sigma,
                    Prediction pred);
Tensor predicted_eps(const Tensor& model_out, const Tensor& x_t, float alpha, float sigma,
                     Prediction pred);

}  // namespace moviekit
