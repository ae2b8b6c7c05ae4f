#include "moviekit/videoedit.hpp"

#include <cmath>

#include "moviekit/synthdata.hpp"

namespace moviekit {

void VideoClip::validate() const {
    if (frames.empty()) throw std::invalid_argument("video clip: needs at least one frame");
    const auto& s0 = frames[0].shape;
    if (s0.size() != 3 || s0[0] != 3) throw std::invalid_argument("video clip: frames must be {3,H,W}");
    if (s0[1] % 8 != 0 || s0[2] % 8 != 0)
        throw std::invalid_argument("video clip: frame dims must be divisible by 8");
    for (const auto& f : frames)
        if (f.shape != s0) throw std::invalid_argument("video clip: frame dims differ");
}

ModelVariant model_variant_from_string(const std::string& s) {
    if (s == "base-multipass") return ModelVariant::BaseMultipass;
    if (s == "guidance-distilled") return ModelVariant::GuidanceDistilled;
    if (s == "adversarial-1step") return ModelVariant::Adversarial1Step;
    throw std::invalid_argument("unknown model variant: " + s);
}

int select_anchor(int n_frames) {
    if (n_frames <= 0) throw std::invalid_argument("select_anchor: n_frames must be >= 1");
    return n_frames / 2;
}

namespace {

struct PassSpec {
    Conditioning cond;   // what the model embeds / cross-attends
    const Tensor* c_image;  // channels concatenated onto the input
};

}  // namespace

VideoEditResult edit_video(const VideoClip& clip, const EditRequest& req, EditModels models,
                           Rng& rng) {
    clip.validate();
    if (!models.denoiser || !models.autoencoder || !models.schedule)
        throw std::invalid_argument("edit_video: missing models");
    Denoiser& den = *models.denoiser;
    const NoiseSchedule& sched = *models.schedule;

    if (req.variant == ModelVariant::Adversarial1Step && req.steps != 1)
        throw std::invalid_argument("edit_video: adversarial-1step requires steps == 1");
    bool multipass = req.variant == ModelVariant::BaseMultipass;
    if (multipass && den.cfg.guidance_conditioned)
        throw std::invalid_argument("edit_video: base-multipass needs a non-conditioned model");
    if (!multipass && !den.cfg.guidance_conditioned)
        throw std::invalid_argument("edit_video: distilled variants need a guidance-conditioned model");

    VideoEditResult res;
    int n = clip.num_frames();
    int anchor = select_anchor(n);

    // encode all frames with the requested encoder half
    std::vector<Tensor> c_img(n);
    for (int i = 0; i < n; ++i)
        c_img[i] = encode(*models.autoencoder, clip.frames[i],
                          req.encoder == AeSide::Big ? AeHalf::Big : AeHalf::Tiny,
                          &res.autoencoder_calls);

    Tensor zero_latent(c_img[0].shape);
    Tensor null_text = encode_instruction(kNullInstruction);
    Tensor c_text = encode_instruction(req.instruction_id);

    std::vector<PassSpec> passes;
    if (multipass) {
        passes.push_back({Conditioning{zero_latent, null_text, 1.f, 1.f}, nullptr});
        passes.push_back({Conditioning{zero_latent, null_text, 1.f, 1.f}, nullptr});  // c_I per frame
        passes.push_back({Conditioning{zero_latent, c_text, 1.f, 1.f}, nullptr});
    } else {
        passes.push_back({Conditioning{zero_latent, c_text, req.s_image, req.s_text}, nullptr});
    }

    // one shared initial noise latent per clip
    Tensor eps = rng.normal_tensor(c_img[0].shape);
    std::vector<int> visit = sampling_steps(sched, req.steps);
    bool cin = sched.kind == ScheduleKind::EulerDiscrete;
    int clean = sched.sigma(0) == 0.f ? 0 : -1;

    std::vector<Tensor> x(n);
    for (int i = 0; i < n; ++i) {
        x[i] = eps;
        x[i].data *= sched.sigma(visit.front());
    }

    auto run_pass = [&](int frame, int t, size_t pass_idx, AttentionContext& ctx) {
        const PassSpec& spec = passes[pass_idx];
        Conditioning cond = spec.cond;
        const Tensor* ci = &zero_latent;
        if (multipass) {
            if (pass_idx >= 1) {
                cond.c_image = c_img[frame];
                ci = &c_img[frame];
            }
        } else {
            cond.c_image = c_img[frame];
            ci = &c_img[frame];
        }
        Tensor x_model = cin ? precondition_input(x[frame], t, sched, PreconditionVariant::Student)
                             : x[frame];
        Tensor x_in({den.cfg.in_channels(), x_model.shape[1], x_model.shape[2]});
        x_in.data.head(x_model.size()) = x_model.data;
        x_in.data.tail(ci->size()) = ci->data;
        return denoiser_forward(den, x_in, sched.timestep(t), cond, ctx, &res.nfe.denoiser_calls);
    };

    for (size_t k = 0; k < visit.size(); ++k) {
        int t = visit[k];
        int t_next = k + 1 < visit.size() ? visit[k + 1] : clean;

        // anchor pass per conditioning variant, capturing its K/V
        std::vector<AttentionContext::SiteKv> anchor_kv(passes.size());
        std::vector<Tensor> anchor_out(passes.size());
        for (size_t p = 0; p < passes.size(); ++p) {
            AttentionContext ctx;
            if (req.cross_frame) ctx.capture_sink = &anchor_kv[p];
            anchor_out[p] = run_pass(anchor, t, p, ctx);
        }

        for (int i = 0; i < n; ++i) {
            std::vector<Tensor> outs(passes.size());
            if (i == anchor) {
                outs = anchor_out;
            } else {
                for (size_t p = 0; p < passes.size(); ++p) {
                    AttentionContext ctx;
                    if (req.cross_frame) {
                        ctx.mode = AttentionContext::Mode::CrossFrame;
                        ctx.anchor_kv = {anchor_kv[p]};
                    }
                    outs[p] = run_pass(i, t, p, ctx);
                }
            }
            Tensor model_out = multipass
                                   ? cfg_combine(outs[0], outs[1], outs[2], req.s_image, req.s_text)
                                   : outs[0];
            SamplerMethod method = sched.kind == ScheduleKind::VpLinear ? SamplerMethod::Ddim
                                                                        : SamplerMethod::Lcm;
            x[i] = sampler_step(model_out, x[i], t, t_next, sched, method);
        }
    }
    res.nfe.steps = static_cast<int64_t>(visit.size());

    res.clip.fps = clip.fps;
    for (int i = 0; i < n; ++i)
        res.clip.frames.push_back(decode(*models.autoencoder, x[i],
                                         req.decoder == AeSide::Big ? AeHalf::Big : AeHalf::Tiny,
                                         &res.autoencoder_calls));
    return res;
}

double frame_consistency(const VideoClip& clip, uint64_t projection_seed) {
    if (clip.num_frames() < 2)
        throw std::invalid_argument("frame_consistency: needs at least two frames");
    clip.validate();
    int64_t d = clip.frames[0].size();
    const int k = 64;
    Rng rng(projection_seed);
    Tensor proj = rng.normal_tensor({k, static_cast<int>(d)});

    auto features = [&](const Tensor& frame) {
        Eigen::ArrayXf centered = frame.data - frame.data.mean();
        Eigen::VectorXf f(k);
        f = proj.mat(k, static_cast<int>(d)) * centered.matrix();
        return f;
    };

    double acc = 0.0;
    Eigen::VectorXf prev = features(clip.frames[0]);
    for (int i = 1; i < clip.num_frames(); ++i) {
        Eigen::VectorXf cur = features(clip.frames[i]);
        double np = prev.norm(), nc = cur.norm();
        double cos;
        if (np < 1e-12 && nc < 1e-12)
            cos = 1.0;
        else if (np < 1e-12 || nc < 1e-12)
            cos = 0.0;
        else
            cos = prev.dot(cur) / (np * nc);
        acc += cos;
        prev = std::move(cur);
    }
    return acc / (clip.num_frames() - 1);
}

}  // namespace moviekit
