#pragma once

#include <string>
#include <vector>

#include "moviekit/autoencoder.hpp"
#include "moviekit/denoiser.hpp"
#include "moviekit/guidance.hpp"
#include "moviekit/rng.hpp"
#include "moviekit/tensor.hpp"

namespace moviekit {

struct VideoClip {
    std::vector<Tensor> frames;  // each {3,H,W}, values in [0,1]
    float fps = 8.f;

    int num_frames() const { return static_cast<int>(frames.size()); }
    void validate() const;
};

enum class ModelVariant { BaseMultipass, GuidanceDistilled, Adversarial1Step };
ModelVariant model_variant_from_string(const std::string& s);

enum class AeSide { Big, Tiny };

struct EditRequest {
    int instruction_id = 0;
    float s_image = 1.5f;
    float s_text = 7.5f;
    int steps = 10;
    ModelVariant variant = ModelVariant::BaseMultipass;
    AeSide encoder = AeSide::Big;
    AeSide decoder = AeSide::Big;
    bool cross_frame = true;  // anchor-based attention; false = per-frame self-attention
    uint64_t noise_seed = 0;
};

struct EditModels {
    Denoiser* denoiser = nullptr;
    AutoencoderPair* autoencoder = nullptr;
    const NoiseSchedule* schedule = nullptr;
};

struct VideoEditResult {
    VideoClip clip;
    NfeCounter nfe;             // denoiser totals over all frames
    int64_t autoencoder_calls = 0;
};

// Middle frame, later of the two central frames for even counts.
int select_anchor(int n_frames);

VideoEditResult edit_video(const VideoClip& clip, const EditRequest& req, EditModels models,
                           Rng& rng);

// Mean cosine similarity of mean-centered random-projection features of
// consecutive frames; in [-1,1], deterministic given the projection seed.
double frame_consistency(const VideoClip& clip, uint64_t projection_seed = 1234);

}  // namespace moviekit
