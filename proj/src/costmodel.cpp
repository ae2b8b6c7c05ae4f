#include "moviekit/costmodel.hpp"

#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace moviekit {

namespace {

std::string kind_str(LayerDesc::Kind k) {
    switch (k) {
        case LayerDesc::Kind::Conv: return "conv";
        case LayerDesc::Kind::Linear: return "linear";
        case LayerDesc::Kind::Attention: return "attention";
    }
    return "?";
}

LayerDesc::Kind kind_from(const std::string& s) {
    if (s == "conv") return LayerDesc::Kind::Conv;
    if (s == "linear") return LayerDesc::Kind::Linear;
    if (s == "attention") return LayerDesc::Kind::Attention;
    throw std::invalid_argument("unknown layer kind: " + s);
}

}  // namespace

double flops_of(const LayerDesc& l) {
    const double mac = 2.0;
    switch (l.kind) {
        case LayerDesc::Kind::Conv:
            return mac * static_cast<double>(l.cin) * l.cout * l.kh * l.kw * l.ho * l.wo;
        case LayerDesc::Kind::Linear:
            return mac * static_cast<double>(l.rows) * l.cin * l.cout;
        case LayerDesc::Kind::Attention: {
            double proj = static_cast<double>(l.tokens) * l.dim * l.dim * 2.0   // Q, out
                          + static_cast<double>(l.kv_tokens) * l.kv_dim * l.dim * 2.0;  // K, V
            double matmuls = static_cast<double>(l.tokens) * l.kv_tokens * l.dim * 2.0;  // QK^T + AV
            return mac * (proj + matmuls);
        }
    }
    throw std::invalid_argument("flops_of: unknown layer kind");
}

double flops_of(const ShapeCatalog& c) {
    double total = 0.0;
    for (const auto& l : c.layers) total += flops_of(l);
    return total;
}

ShapeCatalog concat(const ShapeCatalog& a, const ShapeCatalog& b) {
    ShapeCatalog out = a;
    out.name = a.name + "+" + b.name;
    out.layers.insert(out.layers.end(), b.layers.begin(), b.layers.end());
    return out;
}

ShapeCatalog prune_attention(const ShapeCatalog& catalog, const std::set<int>& levels) {
    for (int lv : levels) {
        bool found = false;
        for (const auto& l : catalog.layers)
            if (l.kind == LayerDesc::Kind::Attention && l.level == lv) found = true;
        if (!found)
            throw std::invalid_argument("prune_attention: no attention at level " + std::to_string(lv));
    }
    ShapeCatalog out;
    out.name = catalog.name + "-pruned";
    for (const auto& l : catalog.layers) {
        if (l.kind == LayerDesc::Kind::Attention && levels.count(l.level)) continue;
        out.layers.push_back(l);
    }
    return out;
}

double pruning_delta(const ShapeCatalog& catalog, const std::set<int>& pruned_levels) {
    if (pruned_levels.empty()) return 0.0;
    double full = flops_of(catalog);
    double pruned = flops_of(prune_attention(catalog, pruned_levels));
    return (full - pruned) / full;
}

PipelineVariant pipeline_variant_from_string(const std::string& s) {
    if (s == "base-multipass") return PipelineVariant::BaseMultipass;
    if (s == "mobile-pruned") return PipelineVariant::MobilePruned;
    if (s == "guidance-distilled") return PipelineVariant::GuidanceDistilled;
    if (s == "adversarial-1step") return PipelineVariant::Adversarial1Step;
    throw std::invalid_argument("unknown pipeline variant: " + s);
}

std::string to_string(PipelineVariant v) {
    switch (v) {
        case PipelineVariant::BaseMultipass: return "base-multipass";
        case PipelineVariant::MobilePruned: return "mobile-pruned";
        case PipelineVariant::GuidanceDistilled: return "guidance-distilled";
        case PipelineVariant::Adversarial1Step: return "adversarial-1step";
    }
    return "?";
}

FlopsReport pipeline_report(PipelineVariant variant, int steps, const PipelineCatalogs& catalogs) {
    if (steps < 1) throw std::invalid_argument("pipeline_report: steps must be >= 1");
    if (variant == PipelineVariant::Adversarial1Step && steps != 1)
        throw std::invalid_argument("pipeline_report: adversarial-1step requires steps == 1");
    int passes = (variant == PipelineVariant::BaseMultipass ||
                  variant == PipelineVariant::MobilePruned)
                     ? 3
                     : 1;
    double den = flops_of(catalogs.denoiser);
    double ae = flops_of(catalogs.autoencoder);
    FlopsReport r;
    r.component_gflops["denoiser_per_pass"] = den / 1e9;
    r.component_gflops["autoencoder"] = ae / 1e9;
    r.passes_per_step = passes;
    r.steps = steps;
    r.nfe = passes * steps;
    r.per_frame_total_tflops = (den * r.nfe + ae) / 1e12;
    return r;
}

double flops_after_savings(double flops, double savings_fraction) {
    if (savings_fraction < 0.0 || savings_fraction > 1.0)
        throw std::invalid_argument("savings fraction outside [0,1]");
    return flops * (1.0 - savings_fraction);
}

std::string FlopsReport::to_json() const {
    nlohmann::json j;
    j["component_gflops"] = component_gflops;
    j["passes_per_step"] = passes_per_step;
    j["steps"] = steps;
    j["nfe"] = nfe;
    j["per_frame_total_tflops"] = per_frame_total_tflops;
    return j.dump(2);
}

std::string ShapeCatalog::to_json() const {
    nlohmann::json j;
    j["name"] = name;
    j["layers"] = nlohmann::json::array();
    for (const auto& l : layers) {
        nlohmann::json jl;
        jl["kind"] = kind_str(l.kind);
        jl["name"] = l.name;
        jl["level"] = l.level;
        switch (l.kind) {
            case LayerDesc::Kind::Conv:
                jl["cin"] = l.cin;
                jl["cout"] = l.cout;
                jl["kh"] = l.kh;
                jl["kw"] = l.kw;
                jl["ho"] = l.ho;
                jl["wo"] = l.wo;
                break;
            case LayerDesc::Kind::Linear:
                jl["rows"] = l.rows;
                jl["cin"] = l.cin;
                jl["cout"] = l.cout;
                break;
            case LayerDesc::Kind::Attention:
                jl["tokens"] = l.tokens;
                jl["kv_tokens"] = l.kv_tokens;
                jl["dim"] = l.dim;
                jl["kv_dim"] = l.kv_dim;
                jl["heads"] = l.heads;
                break;
        }
        j["layers"].push_back(jl);
    }
    return j.dump(2);
}

ShapeCatalog ShapeCatalog::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    ShapeCatalog c;
    c.name = j.at("name").get<std::string>();
    for (const auto& jl : j.at("layers")) {
        LayerDesc l;
        l.kind = kind_from(jl.at("kind").get<std::string>());
        l.name = jl.at("name").get<std::string>();
        l.level = jl.value("level", -1);
        switch (l.kind) {
            case LayerDesc::Kind::Conv:
                l.cin = jl.at("cin").get<int>();
                l.cout = jl.at("cout").get<int>();
                l.kh = jl.at("kh").get<int>();
                l.kw = jl.at("kw").get<int>();
                l.ho = jl.at("ho").get<int>();
                l.wo = jl.at("wo").get<int>();
                break;
            case LayerDesc::Kind::Linear:
                l.rows = jl.at("rows").get<int>();
                l.cin = jl.at("cin").get<int>();
                l.cout = jl.at("cout").get<int>();
                break;
            case LayerDesc::Kind::Attention:
                l.tokens = jl.at("tokens").get<int>();
                l.kv_tokens = jl.at("kv_tokens").get<int>();
                l.dim = jl.at("dim").get<int>();
                l.kv_dim = jl.at("kv_dim").get<int>();
                l.heads = jl.value("heads", 1);
                break;
        }
        c.layers.push_back(l);
    }
    return c;
}

ShapeCatalog ShapeCatalog::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open catalog: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return from_json(text);
}

void ShapeCatalog::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write catalog: " + path);
    f << to_json() << "\n";
}

// ------------------------------------------------------------ SD-1.5 catalog

namespace {

struct Sd15Builder {
    ShapeCatalog cat;
    static constexpr int kTembDim = 1280;
    static constexpr int kTextTokens = 77;
    static constexpr int kTextDim = 768;

    void conv(const std::string& name, int cin, int cout, int k, int res, int level) {
        LayerDesc l;
        l.kind = LayerDesc::Kind::Conv;
        l.name = name;
        l.level = level;
        l.cin = cin;
        l.cout = cout;
        l.kh = l.kw = k;
        l.ho = l.wo = res;
        cat.layers.push_back(l);
    }

    void lin(const std::string& name, int rows, int cin, int cout, int level) {
        LayerDesc l;
        l.kind = LayerDesc::Kind::Linear;
        l.name = name;
        l.level = level;
        l.rows = rows;
        l.cin = cin;
        l.cout = cout;
        cat.layers.push_back(l);
    }

    void res_block(const std::string& name, int cin, int cout, int res, int level) {
        conv(name + ".conv1", cin, cout, 3, res, level);
        conv(name + ".conv2", cout, cout, 3, res, level);
        if (cin != cout) conv(name + ".skip", cin, cout, 1, res, level);
        lin(name + ".temb", 1, kTembDim, cout, level);
    }

    void transformer(const std::string& name, int dim, int res, int level) {
        int tokens = res * res;
        lin(name + ".proj_in", tokens, dim, dim, level);
        LayerDesc sa;
        sa.kind = LayerDesc::Kind::Attention;
        sa.name = name + ".self_attn";
        sa.level = level;
        sa.tokens = tokens;
        sa.kv_tokens = tokens;
        sa.dim = dim;
        sa.kv_dim = dim;
        sa.heads = 8;
        cat.layers.push_back(sa);
        LayerDesc ca;
        ca.kind = LayerDesc::Kind::Attention;
        ca.name = name + ".cross_attn";
        ca.level = level;
        ca.tokens = tokens;
        ca.kv_tokens = kTextTokens;
        ca.dim = dim;
        ca.kv_dim = kTextDim;
        ca.heads = 8;
        cat.layers.push_back(ca);
        // GEGLU feed-forward: dim -> 2*4*dim gate, then 4*dim -> dim
        lin(name + ".ff_in", tokens, dim, 8 * dim, level);
        lin(name + ".ff_out", tokens, 4 * dim, dim, level);
        lin(name + ".proj_out", tokens, dim, dim, level);
    }
};

}  // namespace

ShapeCatalog sd15_unet_catalog() {
    Sd15Builder b;
    b.cat.name = "sd15-unet-60x60";
    const int ch[4] = {320, 640, 1280, 1280};
    const int res[4] = {60, 30, 15, 8};

    b.conv("conv_in", 8, ch[0], 3, res[0], 0);
    b.lin("time_mlp.0", 1, ch[0], Sd15Builder::kTembDim, -1);
    b.lin("time_mlp.1", 1, Sd15Builder::kTembDim, Sd15Builder::kTembDim, -1);

    // down path: 2 res blocks per level, transformers at levels 0..2
    for (int lv = 0; lv < 4; ++lv) {
        int cin = lv == 0 ? ch[0] : ch[lv - 1];
        for (int i = 0; i < 2; ++i) {
            std::string base = "down" + std::to_string(lv) + ".rb" + std::to_string(i);
            b.res_block(base, i == 0 ? cin : ch[lv], ch[lv], res[lv], lv);
            if (lv < 3) b.transformer("down" + std::to_string(lv) + ".tf" + std::to_string(i), ch[lv], res[lv], lv);
        }
        if (lv < 3) b.conv("down" + std::to_string(lv) + ".downsample", ch[lv], ch[lv], 3, res[lv + 1], lv);
    }

    // middle
    b.res_block("mid.rb0", ch[3], ch[3], res[3], 3);
    b.transformer("mid.tf", ch[3], res[3], 3);
    b.res_block("mid.rb1", ch[3], ch[3], res[3], 3);

    // skip channel ladder produced by the down path, consumed in reverse
    std::vector<int> skips = {ch[0], ch[0], ch[0], ch[0], ch[1], ch[1],
                              ch[1], ch[2], ch[2], ch[2], ch[3], ch[3]};

    // up path: 3 res blocks per level, transformers at levels 2..0
    int prev = ch[3];
    for (int lv = 3; lv >= 0; --lv) {
        for (int i = 0; i < 3; ++i) {
            int skip = skips.back();
            skips.pop_back();
            std::string base = "up" + std::to_string(lv) + ".rb" + std::to_string(i);
            b.res_block(base, prev + skip, ch[lv], res[lv], lv);
            prev = ch[lv];
            if (lv < 3) b.transformer("up" + std::to_string(lv) + ".tf" + std::to_string(i), ch[lv], res[lv], lv);
        }
        if (lv > 0) b.conv("up" + std::to_string(lv) + ".upsample", ch[lv], ch[lv], 3, res[lv - 1], lv);
    }

    b.conv("conv_out", ch[0], 4, 3, res[0], 0);
    return b.cat;
}

}  // namespace moviekit
