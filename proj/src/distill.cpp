#include "moviekit/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moviekit/checkpoint.hpp"
#include "moviekit/synthdata.hpp"

namespace moviekit {

// ---------------------------------------------------------------- datasets

LatentDataset make_latent_dataset(const std::vector<EditTriplet>& triplets, AutoencoderPair& ae,
                                  AeHalf which) {
    LatentDataset out;
    out.reserve(triplets.size());
    for (const auto& t : triplets) {
        LatentSample s;
        s.source_latent = encode(ae, t.source, which);
        s.edited_latent = encode(ae, t.edited, which);
        s.instruction_id = t.instruction_id;
        out.push_back(std::move(s));
    }
    return out;
}

Conditioning conditioning_for(const LatentSample& s, float s_image, float s_text) {
    return Conditioning{s.source_latent, encode_instruction(s.instruction_id), s_image, s_text};
}

namespace {

void check_finite(double loss, const char* stage, int64_t iter) {
    if (!std::isfinite(loss))
        throw std::runtime_error(std::string(stage) + ": loss is not finite at iteration " +
                                 std::to_string(iter));
}

Tensor concat_input(const Tensor& x, const Tensor& c_image) {
    Tensor x_in({x.shape[0] + c_image.shape[0], x.shape[1], x.shape[2]});
    x_in.data.head(x.size()) = x.data;
    x_in.data.tail(c_image.size()) = c_image.data;
    return x_in;
}

// sum-of-squares loss node: ||a - b||_2^2
Var sse_loss(Graph& g, Var a, Var b) {
    return scale(g, mse_loss(g, a, b), static_cast<float>(g.val(a).size()));
}

Var predicted_x0_graph(Graph& g, Var v_out, const Tensor& x_t_raw, float alpha, float sigma) {
    float denom = alpha * alpha + sigma * sigma;
    Tensor ax = x_t_raw;
    ax.data *= alpha / denom;
    return add_scaled(g, g.constant(ax), v_out, -sigma / denom);
}

void log_values(TrainLogger& logger, int64_t iter, std::map<std::string, double> vals) {
    if (logger) logger(iter, vals);
}

}  // namespace

// -------------------------------------------------------------- train_base

std::vector<float> train_base(Denoiser& model, const LatentDataset& data,
                              const BaseTrainConfig& cfg, const NoiseSchedule& sched, Rng& rng,
                              TrainLogger logger) {
    if (data.empty()) throw std::invalid_argument("train_base: empty dataset");
    if (model.cfg.guidance_conditioned)
        throw std::invalid_argument("train_base: base model must not be guidance-conditioned");
    std::vector<float> history;
    AdamOpt opt{cfg.lr};
    Tensor zero_latent(data[0].source_latent.shape);
    Tensor null_text = encode_instruction(kNullInstruction);
    for (int it = 0; it < cfg.iters; ++it) {
        model.params.zero_grads();
        float acc = 0.f;
        for (int b = 0; b < cfg.batch; ++b) {
            const LatentSample& s = data[rng.uniform_int(static_cast<int>(data.size()))];
            int t = rng.uniform_int(sched.num_steps);
            Tensor eps = rng.normal_tensor(s.edited_latent.shape);
            bool drop_img = rng.uniform() < cfg.p_drop_image;
            bool drop_txt = rng.uniform() < cfg.p_drop_text;
            Tensor x_t = add_noise(s.edited_latent, eps, t, sched);
            const Tensor& ci = drop_img ? zero_latent : s.source_latent;
            Conditioning cond{ci, drop_txt ? null_text : encode_instruction(s.instruction_id),
                              1.f, 1.f};
            Graph g;
            AttentionContext ctx;
            Var out = denoiser_forward_graph(g, model, g.constant(concat_input(x_t, ci)),
                                             sched.timestep(t), cond, ctx);
            Var loss = mse_loss(g, out, g.constant(eps));
            check_finite(g.val(loss).data[0], "train_base", it);
            g.backward(loss);
            g.accumulate_param_grads(1.f / cfg.batch);
            acc += g.val(loss).data[0];
        }
        opt.update(model.params);
        history.push_back(acc / cfg.batch);
        if (logger && (it % cfg.log_every == 0 || it + 1 == cfg.iters))
            log_values(logger, it, {{"loss_total", acc / cfg.batch}});
    }
    return history;
}

// -------------------------------------------------- guidance distillation

std::vector<float> train_guidance_distill(Denoiser& teacher, Denoiser& student,
                                          const LatentDataset& data,
                                          const GuidanceDistillConfig& cfg,
                                          const NoiseSchedule& sched, Rng& rng,
                                          TrainLogger logger, TrainState* state) {
    if (data.empty()) throw std::invalid_argument("guidance distill: empty dataset");
    if (teacher.cfg.guidance_conditioned)
        throw std::invalid_argument("guidance distill: teacher must not be guidance-conditioned");
    if (!student.cfg.guidance_conditioned)
        throw std::invalid_argument("guidance distill: student must be guidance-conditioned");
    if (teacher.cfg.prediction != student.cfg.prediction)
        throw std::invalid_argument("guidance distill: teacher/student prediction kinds differ");

    std::vector<float> history;
    AdamOpt opt{cfg.lr};
    int64_t start = 0;
    if (state) {
        start = state->iteration;
        opt.step = state->adam_student_step;
        history = std::vector<float>(state->loss_history.begin(), state->loss_history.end());
    }
    Tensor zero_latent(data[0].source_latent.shape);
    Tensor null_text = encode_instruction(kNullInstruction);
    int t_max = std::min(cfg.t_max, sched.num_steps);

    for (int64_t it = start; it < cfg.iters; ++it) {
        student.params.zero_grads();
        float acc = 0.f;
        for (int b = 0; b < cfg.batch; ++b) {
            const LatentSample& s = data[rng.uniform_int(static_cast<int>(data.size()))];
            int t = cfg.t_min + rng.uniform_int(t_max - cfg.t_min);
            float s_img = static_cast<float>(rng.uniform(cfg.s_image_min, cfg.s_image_max));
            float s_txt = static_cast<float>(rng.uniform(cfg.s_text_min, cfg.s_text_max));
            Tensor eps_n = rng.normal_tensor(s.edited_latent.shape);
            Tensor x_t = add_noise(s.edited_latent, eps_n, t, sched);
            float tv = sched.timestep(t);
            Tensor c_text = encode_instruction(s.instruction_id);

            Conditioning uncond{zero_latent, null_text, 1.f, 1.f};
            Conditioning img_only{s.source_latent, null_text, 1.f, 1.f};
            Conditioning full{s.source_latent, c_text, 1.f, 1.f};
            Tensor eps_uncond = denoiser_forward(teacher, concat_input(x_t, zero_latent), tv, uncond);
            Tensor eps_img = denoiser_forward(teacher, concat_input(x_t, s.source_latent), tv, img_only);
            Tensor eps_full = denoiser_forward(teacher, concat_input(x_t, s.source_latent), tv, full);
            Tensor target = cfg_combine(eps_uncond, eps_img, eps_full, s_img, s_txt);

            Conditioning student_cond{s.source_latent, c_text, s_img, s_txt};
            Graph g;
            AttentionContext ctx;
            Var out = denoiser_forward_graph(g, student,
                                             g.constant(concat_input(x_t, s.source_latent)), tv,
                                             student_cond, ctx);
            Var loss = scale(g, sse_loss(g, out, g.constant(target)), cfg.lambda_weight);
            check_finite(g.val(loss).data[0], "guidance distill", it);
            g.backward(loss);
            g.accumulate_param_grads(1.f / cfg.batch);
            acc += g.val(loss).data[0];
        }
        opt.update(student.params);
        history.push_back(acc / cfg.batch);
        if (state) {
            state->iteration = it + 1;
            state->adam_student_step = opt.step;
            state->loss_history.push_back(acc / cfg.batch);
        }
        if (logger && (it % cfg.log_every == 0 || it + 1 == cfg.iters))
            log_values(logger, it, {{"loss_total", acc / cfg.batch}});
    }
    return history;
}

// ------------------------------------------------------- v-prediction stage

std::vector<float> finetune_v_prediction(Denoiser& teacher_eps, Denoiser& student,
                                         const LatentDataset& data, const VFinetuneConfig& cfg,
                                         const NoiseSchedule& sched, Rng& rng, TrainLogger logger) {
    if (data.empty()) throw std::invalid_argument("v finetune: empty dataset");
    if (teacher_eps.cfg.prediction != Prediction::Epsilon)
        throw std::invalid_argument("v finetune: teacher must be epsilon-parameterized");
    if (student.cfg.prediction != Prediction::V)
        throw std::invalid_argument("v finetune: student must be flagged v-prediction");

    std::vector<float> history;
    AdamOpt opt{cfg.lr};
    for (int it = 0; it < cfg.iters; ++it) {
        student.params.zero_grads();
        float acc = 0.f;
        for (int b = 0; b < cfg.batch; ++b) {
            const LatentSample& s = data[rng.uniform_int(static_cast<int>(data.size()))];
            int t = rng.uniform_int(sched.num_steps);
            float s_img = static_cast<float>(rng.uniform(cfg.s_image_min, cfg.s_image_max));
            float s_txt = static_cast<float>(rng.uniform(cfg.s_text_min, cfg.s_text_max));
            Tensor eps_n = rng.normal_tensor(s.edited_latent.shape);
            Tensor x_t = add_noise(s.edited_latent, eps_n, t, sched);
            float tv = sched.timestep(t);
            Conditioning cond = conditioning_for(s, s_img, s_txt);

            Tensor teacher_out = denoiser_forward(teacher_eps, concat_input(x_t, s.source_latent),
                                                  tv, cond);
            Tensor v_target = convert_prediction(teacher_out, Prediction::Epsilon, Prediction::V,
                                                 x_t, t, sched);
            Graph g;
            AttentionContext ctx;
            Var out = denoiser_forward_graph(g, student,
                                             g.constant(concat_input(x_t, s.source_latent)), tv,
                                             cond, ctx);
            Var loss = mse_loss(g, out, g.constant(v_target));
            check_finite(g.val(loss).data[0], "v finetune", it);
            g.backward(loss);
            g.accumulate_param_grads(1.f / cfg.batch);
            acc += g.val(loss).data[0];
        }
        opt.update(student.params);
        history.push_back(acc / cfg.batch);
        if (logger && (it % cfg.log_every == 0 || it + 1 == cfg.iters))
            log_values(logger, it, {{"loss_total", acc / cfg.batch}});
    }
    return history;
}

// ------------------------------------------------------------ teacher_sample

Tensor teacher_sample(Denoiser& teacher, const Conditioning& cond, Rng& rng, int steps,
                      NfeCounter* nfe) {
    if (!teacher.cfg.guidance_conditioned)
        throw std::invalid_argument("teacher_sample: teacher must accept guidance scales");
    NoiseSchedule lcm = make_schedule(ScheduleKind::LcmUniform, steps, teacher.cfg.prediction);
    Tensor eps = rng.normal_tensor(cond.c_image.shape);
    EditResult res = edit_distilled(teacher, eps, cond, lcm, steps, &rng);
    if (nfe) {
        nfe->denoiser_calls += res.nfe.denoiser_calls;
        nfe->steps += res.nfe.steps;
    }
    return res.latent;
}

// ------------------------------------------------------------ discriminator

void Discriminator::verify_frozen() const {
    if (extractor.params.checksum() != extractor_checksum)
        throw std::runtime_error("discriminator feature extractor was modified during training");
}

Discriminator build_discriminator(const Denoiser& teacher, bool guidance_conditioning, Rng& rng,
                                  int head_hidden) {
    if (!teacher.cfg.guidance_conditioned)
        throw std::invalid_argument("build_discriminator: expects the guidance-distilled teacher");
    Discriminator d;
    d.guidance_conditioning = guidance_conditioning;
    d.head_hidden = head_hidden;
    d.extractor.cfg = teacher.cfg;
    for (const std::string& name : encoder_arm_param_names(teacher.cfg)) {
        Param& p = d.extractor.params.add(name, teacher.params.get(name).value);
        p.trainable = false;
    }
    d.extractor_checksum = d.extractor.params.checksum();
    d.schedule = make_schedule(ScheduleKind::EulerDiscrete, 1000, Prediction::Epsilon);

    // one spatial head per extractor tap: conv_in, each level, middle
    int L = teacher.cfg.levels();
    std::vector<int> tap_channels;
    tap_channels.push_back(teacher.cfg.channels(0));
    for (int l = 0; l < L; ++l) tap_channels.push_back(teacher.cfg.channels(l));
    tap_channels.push_back(teacher.cfg.channels(L - 1));

    int emb_in = teacher.cfg.embed_dim * (guidance_conditioning ? 3 : 1);
    for (size_t i = 0; i < tap_channels.size(); ++i) {
        std::string base = "h" + std::to_string(i);
        int c = tap_channels[i];
        float in_std = std::sqrt(2.f / c);
        d.heads.add(base + ".in.w", rng.normal_tensor({head_hidden, c, 1, 1}, 0.f, in_std));
        d.heads.add(base + ".in.b", Tensor({head_hidden}));
        d.heads.add(base + ".emb.w",
                    rng.normal_tensor({head_hidden, emb_in}, 0.f, std::sqrt(2.f / emb_in)));
        d.heads.add(base + ".emb.b", Tensor({head_hidden}));
        d.heads.add(base + ".out.w",
                    rng.normal_tensor({1, head_hidden, 1, 1}, 0.f, std::sqrt(2.f / head_hidden)));
        d.heads.add(base + ".out.b", Tensor({1}));
        d.heads.add(base + ".prompt.w",
                    rng.normal_tensor({head_hidden, kTokenDim}, 0.f, std::sqrt(2.f / kTokenDim)));
        d.heads.add(base + ".prompt.b", Tensor({head_hidden}));
    }
    return d;
}

namespace {

Tensor head_embedding_input(const Discriminator& disc, float t_value, const Conditioning& cond) {
    int e = disc.extractor.cfg.embed_dim;
    if (!disc.guidance_conditioning) return sinusoidal_embed(t_value, e);
    Tensor out({3 * e});
    out.data.segment(0, e) = sinusoidal_embed(t_value, e).data;
    out.data.segment(e, e) = sinusoidal_embed(cond.s_image, e).data;
    out.data.segment(2 * e, e) = sinusoidal_embed(cond.s_text, e).data;
    return out;
}

Tensor pooled_prompt(const Conditioning& cond) {
    int seq = cond.c_text.shape[0], dim = cond.c_text.shape[1];
    Tensor out({dim});
    for (int i = 0; i < seq; ++i) out.data += cond.c_text.data.segment(static_cast<int64_t>(i) * dim, dim);
    out.data /= static_cast<float>(seq);
    return out;
}

}  // namespace

Var discriminator_forward_graph(Graph& g, Discriminator& disc, Var x_noisy,
                                const Conditioning& cond, int t_prime) {
    disc.schedule.check_step(t_prime);
    float tv = disc.schedule.timestep(t_prime);
    Var x_in = concat_ch(g, x_noisy, g.constant(cond.c_image));
    // the frozen extractor embeds the same conditioning the teacher saw
    Conditioning extractor_cond = cond;
    std::vector<Var> taps;
    encoder_arm_forward_graph(g, disc.extractor, x_in, tv, extractor_cond, &taps);

    Var emb_in = g.constant(head_embedding_input(disc, tv, cond));
    Var prompt = g.constant(pooled_prompt(cond));
    Var score{};
    for (size_t i = 0; i < taps.size(); ++i) {
        std::string base = "h" + std::to_string(i);
        Var h = conv2d(g, taps[i], g.param(disc.heads.get(base + ".in.w")),
                       g.param(disc.heads.get(base + ".in.b")), 1, 0);
        Var e = linear(g, g.make(g.val(emb_in).reshaped({1, (int)g.val(emb_in).size()}), false, nullptr),
                       g.param(disc.heads.get(base + ".emb.w")),
                       g.param(disc.heads.get(base + ".emb.b")));
        Var e_vec = g.make(g.val(e).reshaped({(int)g.val(e).size()}), g.requires_grad(e), nullptr);
        {
            int32_t ei = e.id;
            g.node(e_vec.id).back = [ei](Graph& gg, int32_t self) {
                if (gg.requires_grad({ei})) gg.grad_buf(ei).data += gg.node(self).grad.data;
            };
        }
        h = silu(g, chan_bias_add(g, h, e_vec));
        Var smap = conv2d(g, h, g.param(disc.heads.get(base + ".out.w")),
                          g.param(disc.heads.get(base + ".out.b")), 1, 0);
        Var pv = linear(g, g.make(g.val(prompt).reshaped({1, kTokenDim}), false, nullptr),
                        g.param(disc.heads.get(base + ".prompt.w")),
                        g.param(disc.heads.get(base + ".prompt.b")));
        Var pv_vec = g.make(g.val(pv).reshaped({disc.head_hidden}), g.requires_grad(pv), nullptr);
        {
            int32_t pi = pv.id;
            g.node(pv_vec.id).back = [pi](Graph& gg, int32_t self) {
                if (gg.requires_grad({pi})) gg.grad_buf(pi).data += gg.node(self).grad.data;
            };
        }
        smap = add(g, smap, channel_dot(g, h, pv_vec));
        Var s_i = mean_all(g, smap);
        score = score.valid() ? add(g, score, s_i) : s_i;
    }
    return scale(g, score, 1.f / static_cast<float>(taps.size()));
}

double discriminator_forward(Discriminator& disc, const Tensor& x_noisy, const Conditioning& cond,
                             int t_prime) {
    Graph g;
    Var s = discriminator_forward_graph(g, disc, g.constant(x_noisy), cond, t_prime);
    return g.val(s).data[0];
}

namespace {

// score plus d(score)/d(x_noisy)
std::pair<double, Tensor> disc_score_and_xgrad(Discriminator& disc, const Tensor& x_noisy,
                                               const Conditioning& cond, int t_prime) {
    Graph g;
    Var x = g.leaf(x_noisy, true);
    Var s = discriminator_forward_graph(g, disc, x, cond, t_prime);
    g.backward(s);
    Tensor grad = g.node(x.id).grad_ready ? g.grad(x) : Tensor(x_noisy.shape);
    return {g.val(s).data[0], grad};
}

}  // namespace

double r1_penalty(Discriminator& disc, const Tensor& x_real_noisy, const Conditioning& cond,
                  int t_prime) {
    auto [score, grad] = disc_score_and_xgrad(disc, x_real_noisy, cond, t_prime);
    (void)score;
    return grad.data.square().sum();
}

std::pair<double, double> adversarial_losses(double real_score, double fake_score, double r1_term,
                                             const Tensor& x0, const Tensor& x0_hat,
                                             const AdversarialConfig& cfg) {
    if (r1_term < 0.0) throw std::invalid_argument("adversarial_losses: r1_term must be >= 0");
    require_same_shape(x0, x0_hat, "adversarial_losses");
    double disc_loss = std::max(0.0, 1.0 + real_score) + cfg.lambda_r1 * r1_term +
                       std::max(0.0, 1.0 - fake_score);
    double sq = (x0_hat.data - x0.data).square().sum();
    double gen_loss = cfg.lambda_mse * sq + cfg.lambda_gen * fake_score;
    return {disc_loss, gen_loss};
}

// --------------------------------------------------------- adversarial loop

AdversarialLog train_adversarial(Denoiser& teacher, Denoiser& student, Discriminator& disc,
                                 const LatentDataset& data, const AdversarialConfig& cfg, Rng& rng,
                                 TrainLogger logger, TrainState* state) {
    if (data.empty()) throw std::invalid_argument("adversarial: empty dataset");
    if (!teacher.cfg.guidance_conditioned)
        throw std::invalid_argument("adversarial: teacher must be the guidance-distilled model");
    if (!student.cfg.guidance_conditioned || student.cfg.prediction != Prediction::V)
        throw std::invalid_argument("adversarial: student must be guidance-conditioned and v-parameterized");

    NoiseSchedule student_sched =
        make_schedule(ScheduleKind::EulerDiscrete, cfg.student_timesteps, Prediction::V);
    AdamOpt opt_student{cfg.lr_student};
    AdamOpt opt_disc{cfg.lr_disc};
    AdversarialLog log;
    int64_t start = 0;
    if (state) {
        start = state->iteration;
        opt_student.step = state->adam_student_step;
        opt_disc.step = state->adam_disc_step;
        log.loss_total = std::vector<float>(state->loss_history.begin(), state->loss_history.end());
    }

    for (int64_t it = start; it < cfg.iters; ++it) {
        disc.verify_frozen();
        float acc_disc = 0.f, acc_gen = 0.f, acc_mse = 0.f, acc_r1 = 0.f;

        // ---- discriminator update
        disc.heads.zero_grads();
        struct SampleCtx {
            Conditioning cond;
            Tensor x0;
        };
        std::vector<SampleCtx> batch_ctx;
        for (int b = 0; b < cfg.batch; ++b) {
            const LatentSample& s = data[rng.uniform_int(static_cast<int>(data.size()))];
            float s_img = static_cast<float>(rng.uniform(cfg.s_image_min, cfg.s_image_max));
            float s_txt = static_cast<float>(rng.uniform(cfg.s_text_min, cfg.s_text_max));
            Conditioning cond = conditioning_for(s, s_img, s_txt);
            Tensor x0 = teacher_sample(teacher, cond, rng, cfg.teacher_steps);
            batch_ctx.push_back({cond, x0});

            int t = rng.uniform_int(cfg.student_timesteps);
            Tensor eps = rng.normal_tensor(x0.shape);
            Tensor x_t_raw = add_noise(x0, eps, t, student_sched);
            Tensor x_t = precondition_input(x_t_raw, t, student_sched, PreconditionVariant::Student);

            // detached fake for the discriminator step
            Tensor v_out = denoiser_forward(student, concat_input(x_t, cond.c_image),
                                            student_sched.timestep(t), cond);
            Tensor x0_hat = predicted_x0(v_out, x_t_raw, student_sched.alpha(t),
                                         student_sched.sigma(t), Prediction::V);

            int t_prime = sample_logit_normal_t(cfg.disc_t_sampler, rng);
            Tensor eps_prime = rng.normal_tensor(x0.shape);
            Tensor real_noisy = precondition_input(add_noise(x0, eps_prime, t_prime, disc.schedule),
                                                   t_prime, disc.schedule,
                                                   PreconditionVariant::Discriminator);
            Tensor fake_noisy = precondition_input(
                add_noise(x0_hat, eps_prime, t_prime, disc.schedule), t_prime, disc.schedule,
                PreconditionVariant::Discriminator);

            double r1_val = 0.0;
            if (cfg.lambda_r1 > 0.f) {
                auto [real_s, xgrad] = disc_score_and_xgrad(disc, real_noisy, cond, t_prime);
                (void)real_s;
                r1_val = xgrad.data.square().sum();
                double gnorm = std::sqrt(r1_val);
                if (gnorm > 1e-12) {
                    // d/dphi ||grad_x D||^2 = 2 d/dphi [(grad_x D) . ghat] via a
                    // symmetric directional difference around the real input
                    float h = static_cast<float>(1e-3 / gnorm);
                    float w = 2.f * cfg.lambda_r1 / (2.f * h * cfg.batch);
                    Tensor xp = real_noisy, xm = real_noisy;
                    xp.data += h * xgrad.data;
                    xm.data -= h * xgrad.data;
                    {
                        Graph g;
                        Var sc = discriminator_forward_graph(g, disc, g.constant(xp), cond, t_prime);
                        g.backward(sc);
                        g.accumulate_param_grads(w);
                    }
                    {
                        Graph g;
                        Var sc = discriminator_forward_graph(g, disc, g.constant(xm), cond, t_prime);
                        g.backward(sc);
                        g.accumulate_param_grads(-w);
                    }
                }
            }

            Graph g;
            Var real_score = discriminator_forward_graph(g, disc, g.constant(real_noisy), cond, t_prime);
            Var fake_score = discriminator_forward_graph(g, disc, g.constant(fake_noisy), cond, t_prime);
            Var hinge_real = relu(g, offset(g, real_score, 1.f));
            Var hinge_fake = relu(g, offset(g, scale(g, fake_score, -1.f), 1.f));
            Var loss_d = add(g, hinge_real, hinge_fake);
            check_finite(g.val(loss_d).data[0], "adversarial disc", it);
            g.backward(loss_d);
            g.accumulate_param_grads(1.f / cfg.batch);
            acc_disc += g.val(loss_d).data[0] + cfg.lambda_r1 * static_cast<float>(r1_val);
            acc_r1 += static_cast<float>(r1_val);
        }
        opt_disc.update(disc.heads);

        // ---- student update with a fresh fake and fresh noising
        student.params.zero_grads();
        for (int b = 0; b < cfg.batch; ++b) {
            const SampleCtx& sc = batch_ctx[b];
            int t = rng.uniform_int(cfg.student_timesteps);
            Tensor eps = rng.normal_tensor(sc.x0.shape);
            Tensor x_t_raw = add_noise(sc.x0, eps, t, student_sched);
            Tensor x_t = precondition_input(x_t_raw, t, student_sched, PreconditionVariant::Student);
            int t_prime = sample_logit_normal_t(cfg.disc_t_sampler, rng);
            Tensor eps_prime = rng.normal_tensor(sc.x0.shape);

            Graph g;
            AttentionContext ctx;
            Var v_out = denoiser_forward_graph(g, student,
                                               g.constant(concat_input(x_t, sc.cond.c_image)),
                                               student_sched.timestep(t), sc.cond, ctx);
            Var x0_hat = predicted_x0_graph(g, v_out, x_t_raw, student_sched.alpha(t),
                                            student_sched.sigma(t));
            float c_in_prime = precondition_scale(t_prime, disc.schedule);
            Tensor scaled_noise = eps_prime;
            scaled_noise.data *= disc.schedule.sigma(t_prime);
            Var fake_noisy = scale(g, add(g, x0_hat, g.constant(scaled_noise)), c_in_prime);
            Var fake_score = discriminator_forward_graph(g, disc, fake_noisy, sc.cond, t_prime);

            Var loss_mse = sse_loss(g, x0_hat, g.constant(sc.x0));
            Var loss_g = add(g, scale(g, loss_mse, cfg.lambda_mse), scale(g, fake_score, cfg.lambda_gen));
            check_finite(g.val(loss_g).data[0], "adversarial gen", it);
            g.backward(loss_g);
            g.accumulate_param_grads(1.f / cfg.batch);
            acc_gen += g.val(loss_g).data[0];
            acc_mse += g.val(loss_mse).data[0];
        }
        opt_student.update(student.params);

        float total = (acc_disc + acc_gen) / cfg.batch;
        log.loss_total.push_back(total);
        log.loss_disc.push_back(acc_disc / cfg.batch);
        log.loss_gen.push_back(acc_gen / cfg.batch);
        log.loss_mse.push_back(acc_mse / cfg.batch);
        log.r1.push_back(acc_r1 / cfg.batch);
        if (state) {
            state->iteration = it + 1;
            state->adam_student_step = opt_student.step;
            state->adam_disc_step = opt_disc.step;
            state->loss_history.push_back(total);
        }
        if (logger && (it % cfg.log_every == 0 || it + 1 == cfg.iters))
            log_values(logger, it,
                       {{"loss_total", total},
                        {"loss_mse", acc_mse / cfg.batch},
                        {"loss_gen", acc_gen / cfg.batch},
                        {"loss_disc", acc_disc / cfg.batch},
                        {"r1", acc_r1 / cfg.batch}});
    }
    disc.verify_frozen();
    return log;
}

// -------------------------------------------------------------- train state

void save_train_state(const std::string& path, const TrainState& state, const Rng& rng,
                      const ParamStore& student, const ParamStore* disc_heads) {
    CheckpointBuilder b("train-state");
    b.add_blob("meta/rng", rng.serialize());
    Tensor meta({4});
    meta.data[0] = static_cast<float>(state.iteration);
    meta.data[1] = static_cast<float>(state.adam_student_step);
    meta.data[2] = static_cast<float>(state.adam_disc_step);
    meta.data[3] = 0.f;
    b.add("meta/counters", meta);
    Tensor hist({static_cast<int>(state.loss_history.size())});
    for (size_t i = 0; i < state.loss_history.size(); ++i) hist.data[i] = state.loss_history[i];
    b.add("meta/loss_history", hist);
    b.add_store("student", student, /*with_moments=*/true);
    if (disc_heads) b.add_store("disc", *disc_heads, true);
    b.save(path);
}

TrainState load_train_state(const std::string& path, Rng& rng, ParamStore& student,
                            ParamStore* disc_heads) {
    Checkpoint c = Checkpoint::load(path);
    if (c.provenance != "train-state")
        throw std::runtime_error("not a train-state checkpoint: " + path);
    rng.deserialize(c.blob("meta/rng"));
    TrainState st;
    const Tensor& meta = c.record("meta/counters");
    st.iteration = static_cast<int64_t>(meta.data[0]);
    st.adam_student_step = static_cast<int64_t>(meta.data[1]);
    st.adam_disc_step = static_cast<int64_t>(meta.data[2]);
    const Tensor& hist = c.record("meta/loss_history");
    st.loss_history.assign(hist.data.data(), hist.data.data() + hist.size());
    c.load_store("student", student, true);
    if (disc_heads) c.load_store("disc", *disc_heads, true);
    return st;
}

// -------------------------------------------------------------- evaluation

std::vector<double> edit_magnitude_curve(Denoiser& student, const NoiseSchedule& sched,
                                         const LatentSample& probe, float s_image,
                                         const std::vector<float>& s_text_values, int steps,
                                         uint64_t noise_seed) {
    std::vector<double> out;
    for (float st : s_text_values) {
        Rng noise_rng(noise_seed);
        Tensor eps = noise_rng.normal_tensor(probe.source_latent.shape);
        Conditioning cond = conditioning_for(probe, s_image, st);
        Rng lcm_rng(noise_seed + 1);
        EditResult res = edit_distilled(student, eps, cond, sched, steps, &lcm_rng);
        Tensor diff = res.latent;
        diff.data -= probe.source_latent.data;
        out.push_back(l2_norm(diff));
    }
    return out;
}

double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2)
        throw std::invalid_argument("spearman_rho: need two equal-length series");
    auto ranks = [](const std::vector<double>& v) {
        std::vector<size_t> idx(v.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](size_t i, size_t j) { return v[i] < v[j]; });
        std::vector<double> r(v.size());
        size_t i = 0;
        while (i < idx.size()) {
            size_t j = i;
            while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
            double avg = (static_cast<double>(i) + j) / 2.0 + 1.0;
            for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    std::vector<double> ra = ranks(a), rb = ranks(b);
    double ma = 0, mb = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= ra.size();
    mb /= rb.size();
    double num = 0, da = 0, db = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    if (da == 0 || db == 0) return 0.0;
    return num / std::sqrt(da * db);
}

}  // namespace moviekit
