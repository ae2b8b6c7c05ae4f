#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace moviekit {

// Static FLOP accounting. Convention: one multiply-accumulate = 2 FLOPs;
// biases and nonlinearities ignored. Attention counts its Q/K/V/out
// projections plus the QK^T and AV matmuls; surrounding feed-forward and
// projection layers of a transformer block are catalogued as linear layers so
// attention pruning removes exactly the attention cost.
struct LayerDesc {
    enum class Kind { Conv, Linear, Attention };
    Kind kind = Kind::Conv;
    std::string name;
    int level = -1;  // resolution-level tag for pruning; -1 = untagged

    // conv
    int cin = 0, cout = 0, kh = 0, kw = 0, ho = 0, wo = 0;
    // linear (rows = number of row vectors pushed through)
    int rows = 0;
    // attention
    int tokens = 0, kv_tokens = 0, dim = 0, kv_dim = 0, heads = 1;
};

struct ShapeCatalog {
    std::string name;
    std::vector<LayerDesc> layers;

    std::string to_json() const;
    static ShapeCatalog from_json(const std::string& text);
    static ShapeCatalog load(const std::string& path);
    void save(const std::string& path) const;
};

double flops_of(const LayerDesc& layer);
double flops_of(const ShapeCatalog& catalog);

ShapeCatalog concat(const ShapeCatalog& a, const ShapeCatalog& b);

// Catalog with attention layers at the given levels removed.
ShapeCatalog prune_attention(const ShapeCatalog& catalog, const std::set<int>& levels);
// (flops_full - flops_pruned) / flops_full
double pruning_delta(const ShapeCatalog& catalog, const std::set<int>& pruned_levels);

enum class PipelineVariant { BaseMultipass, MobilePruned, GuidanceDistilled, Adversarial1Step };
PipelineVariant pipeline_variant_from_string(const std::string& s);
std::string to_string(PipelineVariant v);

struct FlopsReport {
    std::map<std::string, double> component_gflops;
    int passes_per_step = 0;
    int steps = 0;
    int nfe = 0;
    double per_frame_total_tflops = 0.0;

    std::string to_json() const;
};

struct PipelineCatalogs {
    ShapeCatalog denoiser;
    ShapeCatalog autoencoder;
};

FlopsReport pipeline_report(PipelineVariant variant, int steps, const PipelineCatalogs& catalogs);

// Remaining cost after a fractional savings is applied (e.g. a reported
// autoencoder savings ratio).
double flops_after_savings(double flops, double savings_fraction);

// Reference UNet shape catalog transcribed from the public SD-1.5
// architecture at 60x60x4 latents with 8 input channels (image-conditioned
// editing variant). Shipped as a static data file; this builder regenerates
// it for cross-checking.
ShapeCatalog sd15_unet_catalog();

}  // namespace moviekit
