#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "moviekit/autoencoder.hpp"
#include "moviekit/denoiser.hpp"
#include "moviekit/guidance.hpp"
#include "moviekit/rng.hpp"
#include "moviekit/schedules.hpp"

namespace moviekit {

// ---------------------------------------------------------------- datasets

struct LatentSample {
    Tensor source_latent;  // c_I
    int instruction_id = 0;
    Tensor edited_latent;  // x
};

using LatentDataset = std::vector<LatentSample>;

struct EditTriplet;  // synthdata
LatentDataset make_latent_dataset(const std::vector<EditTriplet>& triplets, AutoencoderPair& ae,
                                  AeHalf which);

Conditioning conditioning_for(const LatentSample& s, float s_image = 1.f, float s_text = 1.f);

// Per-iteration scalar logging hook: (iteration, values).
using TrainLogger = std::function<void(int64_t, const std::map<std::string, double>&)>;

// ---------------------------------------------------------------- configs

struct BaseTrainConfig {
    float lr = 1e-3f;
    int iters = 800;
    int batch = 8;
    float p_drop_image = 0.1f;
    float p_drop_text = 0.1f;
    int log_every = 50;
};

struct GuidanceDistillConfig {
    float lambda_weight = 1.f;
    float lr = 1e-5f;
    int iters = 2000;
    int batch = 8;
    float s_image_min = 1.f, s_image_max = 3.f;
    float s_text_min = 2.f, s_text_max = 14.f;
    int t_min = 0, t_max = 1000;  // half-open
    int log_every = 50;
};

struct VFinetuneConfig {
    float lr = 1e-6f;
    int iters = 1000;
    int batch = 8;
    float s_image_min = 1.f, s_image_max = 3.f;
    float s_text_min = 2.f, s_text_max = 14.f;
    int log_every = 50;
};

struct AdversarialConfig {
    float lambda_mse = 1.f;
    float lambda_gen = 0.5f;
    float lambda_r1 = 1e-4f;
    float lr_student = 1e-5f;
    float lr_disc = 1e-4f;
    int iters = 2000;
    int batch = 4;
    int teacher_steps = 5;
    int student_timesteps = 8;
    TimestepSamplerConfig disc_t_sampler{-1.0, 1.0, 1000};
    bool disc_guidance_conditioning = true;  // head-architecture ablation knob
    float s_image_min = 1.f, s_image_max = 3.f;
    float s_text_min = 2.f, s_text_max = 14.f;
    int log_every = 25;
};

// ------------------------------------------------------------ discriminator

// Frozen encoder-arm copy of the teacher plus trainable spatial heads, one
// per extractor tap. Each head sees its activation, sinusoidal (t', s_I, s_T)
// embeddings, and is conditioned on the pooled prompt embedding through a
// projection term.
struct Discriminator {
    Denoiser extractor;  // holds only encoder-arm params, all frozen
    ParamStore heads;
    bool guidance_conditioning = true;
    int head_hidden = 32;
    uint64_t extractor_checksum = 0;
    NoiseSchedule schedule;  // 1000-step discriminator noise ladder

    void verify_frozen() const;
};

Discriminator build_discriminator(const Denoiser& teacher, bool guidance_conditioning, Rng& rng,
                                  int head_hidden = 32);

Var discriminator_forward_graph(Graph& g, Discriminator& disc, Var x_noisy,
                                const Conditioning& cond, int t_prime);
double discriminator_forward(Discriminator& disc, const Tensor& x_noisy, const Conditioning& cond,
                             int t_prime);

// ||grad_x score||^2 over the (preconditioned) real noisy input.
double r1_penalty(Discriminator& disc, const Tensor& x_real_noisy, const Conditioning& cond,
                  int t_prime);

// Hinge pair exactly as the training recipe writes it: real pushed <= -1,
// fake pushed >= +1; the generator minimizes lambda_mse*||x0_hat-x0||^2(sum)
// + lambda_gen*fake_score.
std::pair<double, double> adversarial_losses(double real_score, double fake_score, double r1_term,
                                             const Tensor& x0, const Tensor& x0_hat,
                                             const AdversarialConfig& cfg);

// ---------------------------------------------------------------- training

struct TrainState {
    int64_t iteration = 0;
    int64_t adam_student_step = 0;
    int64_t adam_disc_step = 0;
    std::string rng_state;
    std::vector<float> loss_history;
};

void save_train_state(const std::string& path, const TrainState& state, const Rng& rng,
                      const ParamStore& student, const ParamStore* disc_heads);
TrainState load_train_state(const std::string& path, Rng& rng, ParamStore& student,
                            ParamStore* disc_heads);

std::vector<float> train_base(Denoiser& model, const LatentDataset& data,
                              const BaseTrainConfig& cfg, const NoiseSchedule& sched, Rng& rng,
                              TrainLogger logger = nullptr);

// Algorithm: sample (c_I,c_T,x), t, s_I, s_T, eps; noise the edited latent;
// build the three-pass CFG target from the frozen teacher; regress the
// guidance-conditioned student on it.
std::vector<float> train_guidance_distill(Denoiser& teacher, Denoiser& student,
                                          const LatentDataset& data,
                                          const GuidanceDistillConfig& cfg,
                                          const NoiseSchedule& sched, Rng& rng,
                                          TrainLogger logger = nullptr,
                                          TrainState* state = nullptr);

std::vector<float> finetune_v_prediction(Denoiser& teacher_eps, Denoiser& student,
                                         const LatentDataset& data, const VFinetuneConfig& cfg,
                                         const NoiseSchedule& sched, Rng& rng,
                                         TrainLogger logger = nullptr);

// 5-step LCM draw from the guidance-distilled teacher; NFE counted in *nfe.
Tensor teacher_sample(Denoiser& teacher, const Conditioning& cond, Rng& rng, int steps = 5,
                      NfeCounter* nfe = nullptr);

struct AdversarialLog {
    std::vector<float> loss_total, loss_mse, loss_gen, loss_disc, r1;
};

AdversarialLog train_adversarial(Denoiser& teacher, Denoiser& student, Discriminator& disc,
                                 const LatentDataset& data, const AdversarialConfig& cfg, Rng& rng,
                                 TrainLogger logger = nullptr, TrainState* state = nullptr);

// -------------------------------------------------------------- evaluation

// Edit magnitudes over a ladder of text-guidance scales with fixed noise;
// used for the controllability property.
std::vector<double> edit_magnitude_curve(Denoiser& student, const NoiseSchedule& sched,
                                         const LatentSample& probe, float s_image,
                                         const std::vector<float>& s_text_values, int steps,
                                         uint64_t noise_seed);

double spearman_rho(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace moviekit
