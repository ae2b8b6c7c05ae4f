#pragma once

#include <string>
#include <vector>

#include "moviekit/costmodel.hpp"
#include "moviekit/graph.hpp"
#include "moviekit/rng.hpp"
#include "moviekit/tensor.hpp"

namespace moviekit {

// Big (VAE-role) and tiny (TAESD-role) encoder/decoder pairs over one shared
// latent space. The big encoder is deterministic (emits the latent mean); the
// tiny encoder is distilled onto the big latents.
struct AutoencoderPair {
    ParamStore big_encoder, big_decoder, tiny_encoder, tiny_decoder;
    int downsample_factor = 8;
    int latent_channels = 4;
    float latent_scale = 1.f;  // calibrated post-training so latents are ~unit scale
};

enum class AeHalf { Big, Tiny };

struct AeTrainConfig {
    int iters_big = 2000;
    int iters_tiny = 2000;
    int batch = 8;
    float lr = 2e-3f;
    float distill_threshold = 0.05f;  // per-element latent MSE gate for the tiny encoder
    int log_every = 100;
};

AutoencoderPair build_autoencoder(Rng& rng);

Tensor encode(AutoencoderPair& pair, const Tensor& image, AeHalf which, int64_t* calls = nullptr);
Tensor decode(AutoencoderPair& pair, const Tensor& latent, AeHalf which, int64_t* calls = nullptr);

// Graph-building halves used by the trainer (unclipped decoder output).
Var encoder_forward_graph(Graph& g, ParamStore& ps, Var image, float latent_scale);
Var decoder_forward_graph(Graph& g, ParamStore& ps, Var latent, float latent_scale);

struct AeTrainLog {
    std::vector<float> big_loss;
    std::vector<float> tiny_encoder_loss;
    std::vector<float> tiny_decoder_loss;
};

// Trains the big pair by reconstruction, then freezes it, distills the tiny
// encoder to big latents and trains the tiny decoder from big latents.
AeTrainLog train_pair(AutoencoderPair& pair, const std::vector<Tensor>& corpus,
                      const AeTrainConfig& cfg, Rng& rng);

double psnr(const Tensor& a, const Tensor& b);

ShapeCatalog autoencoder_catalog(AeHalf which, int image_h, int image_w);

}  // namespace moviekit
