#pragma once

#include "moviekit/denoiser.hpp"
#include "moviekit/rng.hpp"
#include "moviekit/schedules.hpp"
#include "moviekit/tensor.hpp"

namespace moviekit {

struct NfeCounter {
    int64_t denoiser_calls = 0;
    int64_t steps = 0;
};

// Multimodal classifier-free guidance combiner:
// eps_uncond + s_I*(eps_img - eps_uncond) + s_T*(eps_full - eps_img).
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_img, const Tensor& eps_full,
                   float s_image, float s_text);

struct EditResult {
    Tensor latent;
    NfeCounter nfe;
};

// Descending step indices visited by a `steps`-step run over `sched`,
// ending implicitly at the clean state.
std::vector<int> sampling_steps(const NoiseSchedule& sched, int steps);

// Three forward passes per step through a non-guidance-conditioned model,
// combined via cfg_combine. cond carries c_I/c_T plus the combiner scales.
EditResult edit_multipass(Denoiser& model, const Tensor& x_noise, const Conditioning& cond,
                          const NoiseSchedule& sched, int steps);

// Single pass per step through a guidance-conditioned model that embeds the
// scales. For LCM-style schedules, intermediate re-noising draws from rng.
EditResult edit_distilled(Denoiser& model, const Tensor& x_noise, const Conditioning& cond,
                          const NoiseSchedule& sched, int steps, Rng* rng = nullptr);

// Training-time guidance-scale ranges; inference outside them is permitted
// but logged once.
constexpr float kTrainSImageMin = 1.f, kTrainSImageMax = 3.f;
constexpr float kTrainSTextMin = 2.f, kTrainSTextMax = 14.f;

}  // namespace moviekit
