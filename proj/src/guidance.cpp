#include "moviekit/guidance.hpp"

#include <cmath>
#include <iostream>

#include "moviekit/synthdata.hpp"

namespace moviekit {

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_img, const Tensor& eps_full,
                   float s_image, float s_text) {
    require_same_shape(eps_uncond, eps_img, "cfg_combine");
    require_same_shape(eps_uncond, eps_full, "cfg_combine");
    // coefficient form of eps_uncond + s_I*(eps_img - eps_uncond)
    // + s_T*(eps_full - eps_img); exact at the telescoping identity points
    float cu = 1.f - s_image;
    float ci = s_image - s_text;
    Tensor out = eps_uncond;
    out.data = cu * eps_uncond.data + ci * eps_img.data + s_text * eps_full.data;
    return out;
}

std::vector<int> sampling_steps(const NoiseSchedule& sched, int steps) {
    if (steps < 1) throw std::invalid_argument("sampling_steps: steps must be >= 1");
    if (steps > sched.num_steps)
        throw std::invalid_argument("sampling_steps: more steps than schedule levels");
    std::vector<int> visit;
    if (steps == sched.num_steps) {
        for (int t = sched.num_steps - 1; t >= 0; --t) visit.push_back(t);
        return visit;
    }
    for (int k = 0; k < steps; ++k) {
        int idx = static_cast<int>(
            std::lround(static_cast<double>(steps - k) * (sched.num_steps - 1) / steps));
        visit.push_back(std::max(1, idx));
    }
    return visit;
}

namespace {

void warn_extrapolation(float s_image, float s_text) {
    static bool warned = false;
    if (warned) return;
    if (s_image < kTrainSImageMin || s_image > kTrainSImageMax || s_text < kTrainSTextMin ||
        s_text > kTrainSTextMax) {
        std::cerr << "[moviekit] warning: guidance scales (" << s_image << "," << s_text
                  << ") outside training ranges [1,3]x[2,14]\n";
        warned = true;
    }
}

// clean target index: vp index 0 is exactly clean, otherwise step beyond the table
int clean_target(const NoiseSchedule& sched) { return sched.sigma(0) == 0.f ? 0 : -1; }

bool applies_cin(const NoiseSchedule& sched) { return sched.kind == ScheduleKind::EulerDiscrete; }

SamplerMethod method_for(const NoiseSchedule& sched) {
    return sched.kind == ScheduleKind::VpLinear ? SamplerMethod::Ddim : SamplerMethod::Lcm;
}

}  // namespace

EditResult edit_multipass(Denoiser& model, const Tensor& x_noise, const Conditioning& cond,
                          const NoiseSchedule& sched, int steps) {
    if (model.cfg.guidance_conditioned)
        throw std::invalid_argument("edit_multipass: got a guidance-conditioned model; "
                                    "use edit_distilled");
    std::vector<int> visit = sampling_steps(sched, steps);
    Tensor zero_latent(cond.c_image.shape);
    Tensor null_text = encode_instruction(kNullInstruction);

    Conditioning uncond{zero_latent, null_text, 1.f, 1.f};
    Conditioning img_only{cond.c_image, null_text, 1.f, 1.f};
    Conditioning full{cond.c_image, cond.c_text, 1.f, 1.f};

    EditResult res;
    Tensor x = x_noise;
    x.data *= sched.sigma(visit.front());
    for (size_t i = 0; i < visit.size(); ++i) {
        int t = visit[i];
        int t_next = i + 1 < visit.size() ? visit[i + 1] : clean_target(sched);
        float tv = sched.timestep(t);
        // the three CFG passes differ only in conditioning
        auto run_pass = [&](const Conditioning& c) {
            Graph gg;
            AttentionContext cc;
            Tensor x_in({model.cfg.in_channels(), x.shape[1], x.shape[2]});
            x_in.data.head(x.size()) = x.data;
            x_in.data.tail(c.c_image.size()) = c.c_image.data;
            Var out = denoiser_forward_graph(gg, model, gg.constant(x_in), tv, c, cc);
            ++res.nfe.denoiser_calls;
            return gg.val(out);
        };
        Tensor eps_uncond = run_pass(uncond);
        Tensor eps_img = run_pass(img_only);
        Tensor eps_full = run_pass(full);
        Tensor combined = cfg_combine(eps_uncond, eps_img, eps_full, cond.s_image, cond.s_text);
        x = sampler_step(combined, x, t, t_next, sched, method_for(sched));
        ++res.nfe.steps;
    }
    res.latent = std::move(x);
    return res;
}

EditResult edit_distilled(Denoiser& model, const Tensor& x_noise, const Conditioning& cond,
                          const NoiseSchedule& sched, int steps, Rng* rng) {
    if (!model.cfg.guidance_conditioned)
        throw std::invalid_argument("edit_distilled: model is not guidance-conditioned; "
                                    "use edit_multipass");
    warn_extrapolation(cond.s_image, cond.s_text);
    std::vector<int> visit = sampling_steps(sched, steps);
    bool cin = applies_cin(sched);

    EditResult res;
    Tensor x = x_noise;
    x.data *= sched.sigma(visit.front());
    for (size_t i = 0; i < visit.size(); ++i) {
        int t = visit[i];
        int t_next = i + 1 < visit.size() ? visit[i + 1] : clean_target(sched);
        Tensor x_model = cin ? precondition_input(x, t, sched, PreconditionVariant::Student) : x;
        Tensor x_in({model.cfg.in_channels(), x.shape[1], x.shape[2]});
        x_in.data.head(x.size()) = x_model.data;
        x_in.data.tail(cond.c_image.size()) = cond.c_image.data;
        Tensor out = denoiser_forward(model, x_in, sched.timestep(t), cond, &res.nfe.denoiser_calls);
        Tensor fresh;
        const Tensor* fresh_ptr = nullptr;
        if (method_for(sched) == SamplerMethod::Lcm && t_next > 0 && sched.sigma(t_next) > 0.f) {
            if (!rng) throw std::invalid_argument("edit_distilled: multi-step lcm sampling needs rng");
            fresh = rng->normal_tensor(x.shape);
            fresh_ptr = &fresh;
        }
        x = sampler_step(out, x, t, t_next, sched, method_for(sched), fresh_ptr);
        ++res.nfe.steps;
    }
    res.latent = std::move(x);
    return res;
}

}  // namespace moviekit
