#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "moviekit/costmodel.hpp"
#include "moviekit/graph.hpp"
#include "moviekit/rng.hpp"
#include "moviekit/schedules.hpp"
#include "moviekit/tensor.hpp"

namespace moviekit {

struct DenoiserConfig {
    int base_channels = 32;
    std::vector<int> channel_multipliers = {1, 2};
    int latent_channels = 4;
    std::set<int> attention_levels = {0, 1};
    bool guidance_conditioned = false;
    Prediction prediction = Prediction::Epsilon;
    int embed_dim = 64;
    int token_dim = 16;  // text token embedding width
    int norm_groups = 8;

    int levels() const { return static_cast<int>(channel_multipliers.size()); }
    int channels(int level) const { return base_channels * channel_multipliers.at(level); }
    int in_channels() const { return 2 * latent_channels; }  // noisy latent ++ c_I
    void validate() const;
};

// Image/text conditioning plus guidance scales. NULL image conditioning is an
// all-zeros latent; NULL text is the vocabulary's reserved id-0 sequence.
struct Conditioning {
    Tensor c_image;   // {latent_channels, h, w}, zeros when null
    Tensor c_text;    // {seq, token_dim}
    float s_image = 1.f;
    float s_text = 1.f;
};

struct AttentionContext {
    enum class Mode { SelfAttn, CrossFrame };
    // K/V captured at each self-attention site of one forward pass, in site order.
    using SiteKv = std::vector<std::pair<Tensor, Tensor>>;

    Mode mode = Mode::SelfAttn;
    std::vector<SiteKv> anchor_kv;     // one entry per anchor frame
    SiteKv* capture_sink = nullptr;    // when set, this pass records its own K/V
};

struct Denoiser {
    DenoiserConfig cfg;
    ParamStore params;
};

// Standard transformer-style embedding: first half sines, second half
// cosines over geometric frequencies from 1 down to 1e-4; entries in [-1,1].
Tensor sinusoidal_embed(float value, int dim);

Denoiser build_denoiser(const DenoiserConfig& cfg, Rng& rng);
Denoiser clone_denoiser(const Denoiser& model);

// Student initialization for guidance distillation: copies the teacher and
// adds zero-initialized guidance projection pathways, so at (s_I,s_T) the
// student output equals the teacher's conditional pass exactly.
Denoiser make_guidance_student(const Denoiser& teacher);

// Optional replacement of the internally built guidance-scale embeddings,
// e.g. to differentiate through the embedding inputs.
struct GuidanceEmbedOverride {
    Var gemb_image;
    Var gemb_text;
};

// Graph-building forward. x_in is already preconditioned and concatenated
// with the c_I channels ({2*latent_channels, h, w}).
Var denoiser_forward_graph(Graph& g, Denoiser& model, Var x_in, float t_value,
                           const Conditioning& cond, AttentionContext& ctx,
                           const GuidanceEmbedOverride* embed_override = nullptr);

// Inference wrapper; increments *nfe_calls when provided.
Tensor denoiser_forward(Denoiser& model, const Tensor& x_in, float t_value,
                        const Conditioning& cond, AttentionContext& ctx,
                        int64_t* nfe_calls = nullptr);
Tensor denoiser_forward(Denoiser& model, const Tensor& x_in, float t_value,
                        const Conditioning& cond, int64_t* nfe_calls = nullptr);

// Plain-matrix cross-frame attention over concatenated anchor keys/values.
Tensor cross_frame_attention(const Tensor& q, const std::vector<std::pair<Tensor, Tensor>>& anchors);

// Names of the frozen encoder-arm parameters (conv_in through the middle
// block); used to build the discriminator's feature extractor.
std::vector<std::string> encoder_arm_param_names(const DenoiserConfig& cfg);

// Runs only the encoder arm (conv_in .. middle block) and returns the
// activation taps after conv_in, each level and the middle block. `model`
// may hold just the encoder-arm parameters.
Var encoder_arm_forward_graph(Graph& g, Denoiser& model, Var x_in, float t_value,
                              const Conditioning& cond, std::vector<Var>* taps);

ShapeCatalog denoiser_catalog(const DenoiserConfig& cfg, int latent_h, int latent_w);

}  // namespace moviekit
