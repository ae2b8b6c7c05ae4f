#include "moviekit/denoiser.hpp"

#include <cmath>

namespace moviekit {

void DenoiserConfig::validate() const {
    if (base_channels <= 0 || latent_channels <= 0 || embed_dim <= 0 || token_dim <= 0)
        throw std::invalid_argument("denoiser config: non-positive dims");
    if (channel_multipliers.empty()) throw std::invalid_argument("denoiser config: no levels");
    for (int lv : attention_levels)
        if (lv < 0 || lv >= levels())
            throw std::invalid_argument("denoiser config: attention level " + std::to_string(lv) +
                                        " outside existing levels");
    for (int l = 0; l < levels(); ++l)
        if (channels(l) % norm_groups != 0)
            throw std::invalid_argument("denoiser config: channels not divisible by norm groups");
}

Tensor sinusoidal_embed(float value, int dim) {
    if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("sinusoidal_embed: dim must be even and >= 2");
    int half = dim / 2;
    Tensor out({dim});
    for (int k = 0; k < half; ++k) {
        double freq = half > 1 ? std::exp(-std::log(1e4) * k / (half - 1)) : 1.0;
        out.data[k] = static_cast<float>(std::sin(value * freq));
        out.data[half + k] = static_cast<float>(std::cos(value * freq));
    }
    return out;
}

// ----------------------------------------------------------------- building

namespace {

Tensor conv_init(Rng& rng, int cout, int cin, int k) {
    float stddev = std::sqrt(2.f / (cin * k * k));
    return rng.normal_tensor({cout, cin, k, k}, 0.f, stddev);
}

Tensor linear_init(Rng& rng, int out, int in) {
    float stddev = std::sqrt(2.f / (in + out));
    return rng.normal_tensor({out, in}, 0.f, stddev);
}

void add_conv(ParamStore& ps, Rng& rng, const std::string& name, int cout, int cin, int k) {
    ps.add(name + ".w", conv_init(rng, cout, cin, k));
    ps.add(name + ".b", Tensor({cout}));
}

void add_linear(ParamStore& ps, Rng& rng, const std::string& name, int out, int in) {
    ps.add(name + ".w", linear_init(rng, out, in));
    ps.add(name + ".b", Tensor({out}));
}

void add_gn(ParamStore& ps, const std::string& name, int c) {
    ps.add(name + ".g", Tensor::full({c}, 1.f));
    ps.add(name + ".b", Tensor({c}));
}

void add_res_block(ParamStore& ps, Rng& rng, const std::string& name, int cin, int cout,
                   const DenoiserConfig& cfg) {
    add_gn(ps, name + ".gn1", cin);
    add_conv(ps, rng, name + ".conv1", cout, cin, 3);
    add_linear(ps, rng, name + ".temb", cout, cfg.embed_dim);
    if (cfg.guidance_conditioned) {
        add_linear(ps, rng, name + ".gI", cout, cfg.embed_dim);
        add_linear(ps, rng, name + ".gT", cout, cfg.embed_dim);
    }
    add_gn(ps, name + ".gn2", cout);
    add_conv(ps, rng, name + ".conv2", cout, cout, 3);
    if (cin != cout) add_conv(ps, rng, name + ".skip", cout, cin, 1);
}

void add_attention(ParamStore& ps, Rng& rng, const std::string& name, int c, int token_dim) {
    add_gn(ps, name + ".attn.gn", c);
    add_linear(ps, rng, name + ".attn.q", c, c);
    add_linear(ps, rng, name + ".attn.k", c, c);
    add_linear(ps, rng, name + ".attn.v", c, c);
    add_linear(ps, rng, name + ".attn.o", c, c);
    add_gn(ps, name + ".xattn.gn", c);
    add_linear(ps, rng, name + ".xattn.q", c, c);
    add_linear(ps, rng, name + ".xattn.k", c, token_dim);
    add_linear(ps, rng, name + ".xattn.v", c, token_dim);
    add_linear(ps, rng, name + ".xattn.o", c, c);
}

}  // namespace

Denoiser build_denoiser(const DenoiserConfig& cfg, Rng& rng) {
    cfg.validate();
    Denoiser m;
    m.cfg = cfg;
    ParamStore& ps = m.params;
    int L = cfg.levels();

    add_conv(ps, rng, "conv_in", cfg.channels(0), cfg.in_channels(), 3);
    add_linear(ps, rng, "time_mlp.0", cfg.embed_dim, cfg.embed_dim);
    add_linear(ps, rng, "time_mlp.1", cfg.embed_dim, cfg.embed_dim);

    for (int l = 0; l < L; ++l) {
        std::string base = "down" + std::to_string(l);
        add_res_block(ps, rng, base + ".rb", cfg.channels(l), cfg.channels(l), cfg);
        if (cfg.attention_levels.count(l)) add_attention(ps, rng, base, cfg.channels(l), cfg.token_dim);
        if (l + 1 < L) add_conv(ps, rng, base + ".downsample", cfg.channels(l + 1), cfg.channels(l), 3);
    }
    add_res_block(ps, rng, "mid.rb", cfg.channels(L - 1), cfg.channels(L - 1), cfg);
    for (int l = L - 1; l >= 0; --l) {
        std::string base = "up" + std::to_string(l);
        add_res_block(ps, rng, base + ".rb", 2 * cfg.channels(l), cfg.channels(l), cfg);
        if (cfg.attention_levels.count(l)) add_attention(ps, rng, base, cfg.channels(l), cfg.token_dim);
        if (l > 0) add_conv(ps, rng, base + ".upconv", cfg.channels(l - 1), cfg.channels(l), 3);
    }
    add_gn(ps, "gn_out", cfg.channels(0));
    add_conv(ps, rng, "conv_out", cfg.latent_channels, cfg.channels(0), 3);
    return m;
}

Denoiser clone_denoiser(const Denoiser& model) {
    Denoiser out;
    out.cfg = model.cfg;
    for (const auto& p : model.params.items) {
        Param& np = out.params.add(p->name, p->value);
        np.trainable = p->trainable;
    }
    return out;
}

Denoiser make_guidance_student(const Denoiser& teacher) {
    if (teacher.cfg.guidance_conditioned)
        throw std::invalid_argument("make_guidance_student: teacher already guidance-conditioned");
    Denoiser s;
    s.cfg = teacher.cfg;
    s.cfg.guidance_conditioned = true;
    for (const auto& p : teacher.params.items) s.params.add(p->name, p->value);
    int L = s.cfg.levels();
    auto add_zero_proj = [&](const std::string& rb, int cout) {
        s.params.add(rb + ".gI.w", Tensor({cout, s.cfg.embed_dim}));
        s.params.add(rb + ".gI.b", Tensor({cout}));
        s.params.add(rb + ".gT.w", Tensor({cout, s.cfg.embed_dim}));
        s.params.add(rb + ".gT.b", Tensor({cout}));
    };
    for (int l = 0; l < L; ++l) add_zero_proj("down" + std::to_string(l) + ".rb", s.cfg.channels(l));
    add_zero_proj("mid.rb", s.cfg.channels(L - 1));
    for (int l = L - 1; l >= 0; --l) add_zero_proj("up" + std::to_string(l) + ".rb", s.cfg.channels(l));
    return s;
}

// ----------------------------------------------------------------- forward

namespace {

struct ForwardCtx {
    Graph& g;
    Denoiser& m;
    Var temb;           // {E} trunk output
    Var gemb_i, gemb_t; // {E} guidance embeddings, invalid when unconditioned
    const Conditioning* cond;
    AttentionContext* attn;
    int self_attn_site = 0;
};

Var gn(ForwardCtx& f, const std::string& name, Var x) {
    return group_norm(f.g, x, f.g.param(f.m.params.get(name + ".g")),
                      f.g.param(f.m.params.get(name + ".b")), f.m.cfg.norm_groups);
}

Var conv(ForwardCtx& f, const std::string& name, Var x, int stride) {
    return conv2d(f.g, x, f.g.param(f.m.params.get(name + ".w")),
                  f.g.param(f.m.params.get(name + ".b")), stride,
                  f.m.params.get(name + ".w").value.shape[2] / 2);
}

Var lin(ForwardCtx& f, const std::string& name, Var x) {
    return linear(f.g, x, f.g.param(f.m.params.get(name + ".w")),
                  f.g.param(f.m.params.get(name + ".b")));
}

Var vec_as_row(Graph& g, Var v) {
    const Tensor& t = g.val(v);
    int n = static_cast<int>(t.size());
    Var out = g.make(t.reshaped({1, n}), g.requires_grad(v), nullptr);
    // reshape shares no structure on the tape; wire gradient through manually
    int32_t vi = v.id;
    g.node(out.id).back = [vi, n](Graph& gg, int32_t self) {
        if (gg.requires_grad({vi})) gg.grad_buf(vi).data += gg.node(self).grad.data;
    };
    return out;
}

Var row_as_vec(Graph& g, Var v) {
    const Tensor& t = g.val(v);
    int n = static_cast<int>(t.size());
    Var out = g.make(t.reshaped({n}), g.requires_grad(v), nullptr);
    int32_t vi = v.id;
    g.node(out.id).back = [vi](Graph& gg, int32_t self) {
        if (gg.requires_grad({vi})) gg.grad_buf(vi).data += gg.node(self).grad.data;
    };
    return out;
}

Var res_block(ForwardCtx& f, const std::string& name, Var x) {
    Var h = gn(f, name + ".gn1", x);
    h = silu(f.g, h);
    h = conv(f, name + ".conv1", h, 1);

    Var t_in = vec_as_row(f.g, silu(f.g, f.temb));
    Var t_add = row_as_vec(f.g, lin(f, name + ".temb", t_in));
    h = chan_bias_add(f.g, h, t_add);
    if (f.m.cfg.guidance_conditioned) {
        Var gi = row_as_vec(f.g, lin(f, name + ".gI", vec_as_row(f.g, f.gemb_i)));
        Var gt = row_as_vec(f.g, lin(f, name + ".gT", vec_as_row(f.g, f.gemb_t)));
        h = chan_bias_add(f.g, h, silu(f.g, gi));
        h = chan_bias_add(f.g, h, silu(f.g, gt));
    }

    h = gn(f, name + ".gn2", h);
    h = silu(f.g, h);
    h = conv(f, name + ".conv2", h, 1);

    Var skip = x;
    if (f.m.params.has(name + ".skip.w")) skip = conv(f, name + ".skip", x, 1);
    return add(f.g, h, skip);
}

Var attention_block(ForwardCtx& f, const std::string& name, Var x) {
    const auto& shape = f.g.val(x).shape;
    int c = shape[0], h = shape[1], w = shape[2];
    float att_scale = 1.f / std::sqrt(static_cast<float>(c));

    // anchored self-attention
    {
        Var toks = chw_to_tokens(f.g, gn(f, name + ".attn.gn", x));
        Var q = lin(f, name + ".attn.q", toks);
        Var k = lin(f, name + ".attn.k", toks);
        Var v = lin(f, name + ".attn.v", toks);
        int site = f.self_attn_site++;
        if (f.attn->capture_sink) {
            if (static_cast<int>(f.attn->capture_sink->size()) != site)
                throw std::logic_error("attention capture out of order");
            f.attn->capture_sink->emplace_back(f.g.val(k), f.g.val(v));
        }
        Var kk = k, vv = v;
        if (f.attn->mode == AttentionContext::Mode::CrossFrame) {
            if (f.attn->anchor_kv.empty())
                throw std::invalid_argument("cross-frame attention needs at least one anchor");
            std::vector<Var> ks, vs;
            for (const auto& anchor : f.attn->anchor_kv) {
                ks.push_back(f.g.constant(anchor.at(site).first));
                vs.push_back(f.g.constant(anchor.at(site).second));
            }
            kk = ks.size() == 1 ? ks[0] : concat_rows(f.g, ks);
            vv = vs.size() == 1 ? vs[0] : concat_rows(f.g, vs);
        }
        Var attn = softmax_rows(f.g, scale(f.g, matmul_nt(f.g, q, kk), att_scale));
        Var out = lin(f, name + ".attn.o", matmul(f.g, attn, vv));
        x = add(f.g, x, tokens_to_chw(f.g, out, h, w));
    }

    // text cross-attention
    {
        Var toks = chw_to_tokens(f.g, gn(f, name + ".xattn.gn", x));
        Var q = lin(f, name + ".xattn.q", toks);
        Var ct = f.g.constant(f.cond->c_text);
        Var k = lin(f, name + ".xattn.k", ct);
        Var v = lin(f, name + ".xattn.v", ct);
        Var attn = softmax_rows(f.g, scale(f.g, matmul_nt(f.g, q, k), att_scale));
        Var out = lin(f, name + ".xattn.o", matmul(f.g, attn, v));
        x = add(f.g, x, tokens_to_chw(f.g, out, h, w));
    }
    return x;
}

Var time_trunk(ForwardCtx& f, float t_value) {
    Var emb = f.g.constant(sinusoidal_embed(t_value, f.m.cfg.embed_dim));
    Var h = lin(f, "time_mlp.0", vec_as_row(f.g, emb));
    h = silu(f.g, h);
    h = lin(f, "time_mlp.1", h);
    return row_as_vec(f.g, h);
}

}  // namespace

Var denoiser_forward_graph(Graph& g, Denoiser& model, Var x_in, float t_value,
                           const Conditioning& cond, AttentionContext& ctx,
                           const GuidanceEmbedOverride* embed_override) {
    const DenoiserConfig& cfg = model.cfg;
    const auto& in_shape = g.val(x_in).shape;
    if (in_shape.size() != 3 || in_shape[0] != cfg.in_channels())
        throw std::invalid_argument("denoiser forward: expected " + std::to_string(cfg.in_channels()) +
                                    " input channels, got " + shape_str(in_shape));
    if (!cfg.guidance_conditioned && (cond.s_image != 1.f || cond.s_text != 1.f))
        throw std::invalid_argument(
            "denoiser forward: guidance scales supplied to a non-guidance-conditioned model");
    if (ctx.mode == AttentionContext::Mode::SelfAttn && !ctx.anchor_kv.empty())
        throw std::invalid_argument("self-attention context must carry no anchors");

    ForwardCtx f{g, model, Var{}, Var{}, Var{}, &cond, &ctx, 0};
    f.temb = time_trunk(f, t_value);
    if (cfg.guidance_conditioned) {
        if (embed_override) {
            f.gemb_i = embed_override->gemb_image;
            f.gemb_t = embed_override->gemb_text;
        } else {
            f.gemb_i = g.constant(sinusoidal_embed(cond.s_image, cfg.embed_dim));
            f.gemb_t = g.constant(sinusoidal_embed(cond.s_text, cfg.embed_dim));
        }
    }

    int L = cfg.levels();
    Var x = conv(f, "conv_in", x_in, 1);
    std::vector<Var> skips(L);
    for (int l = 0; l < L; ++l) {
        std::string base = "down" + std::to_string(l);
        x = res_block(f, base + ".rb", x);
        if (cfg.attention_levels.count(l)) x = attention_block(f, base, x);
        skips[l] = x;
        if (l + 1 < L) x = conv(f, base + ".downsample", x, 2);
    }
    x = res_block(f, "mid.rb", x);
    for (int l = L - 1; l >= 0; --l) {
        std::string base = "up" + std::to_string(l);
        x = concat_ch(g, x, skips[l]);
        x = res_block(f, base + ".rb", x);
        if (cfg.attention_levels.count(l)) x = attention_block(f, base, x);
        if (l > 0) x = conv(f, base + ".upconv", upsample2x(g, x), 1);
    }
    x = gn(f, "gn_out", x);
    x = silu(g, x);
    x = conv(f, "conv_out", x, 1);
    return x;
}

Tensor denoiser_forward(Denoiser& model, const Tensor& x_in, float t_value,
                        const Conditioning& cond, AttentionContext& ctx, int64_t* nfe_calls) {
    Graph g;
    Var out = denoiser_forward_graph(g, model, g.constant(x_in), t_value, cond, ctx);
    if (nfe_calls) ++*nfe_calls;
    return g.val(out);
}

Tensor denoiser_forward(Denoiser& model, const Tensor& x_in, float t_value,
                        const Conditioning& cond, int64_t* nfe_calls) {
    AttentionContext ctx;
    return denoiser_forward(model, x_in, t_value, cond, ctx, nfe_calls);
}

Var encoder_arm_forward_graph(Graph& g, Denoiser& model, Var x_in, float t_value,
                              const Conditioning& cond, std::vector<Var>* taps) {
    const DenoiserConfig& cfg = model.cfg;
    AttentionContext ctx;
    ForwardCtx f{g, model, Var{}, Var{}, Var{}, &cond, &ctx, 0};
    f.temb = time_trunk(f, t_value);
    if (cfg.guidance_conditioned) {
        f.gemb_i = g.constant(sinusoidal_embed(cond.s_image, cfg.embed_dim));
        f.gemb_t = g.constant(sinusoidal_embed(cond.s_text, cfg.embed_dim));
    }
    int L = cfg.levels();
    Var x = conv(f, "conv_in", x_in, 1);
    if (taps) taps->push_back(x);
    for (int l = 0; l < L; ++l) {
        std::string base = "down" + std::to_string(l);
        x = res_block(f, base + ".rb", x);
        if (cfg.attention_levels.count(l)) x = attention_block(f, base, x);
        if (taps) taps->push_back(x);
        if (l + 1 < L) x = conv(f, base + ".downsample", x, 2);
    }
    x = res_block(f, "mid.rb", x);
    if (taps) taps->push_back(x);
    return x;
}

Tensor cross_frame_attention(const Tensor& q, const std::vector<std::pair<Tensor, Tensor>>& anchors) {
    if (anchors.empty()) throw std::invalid_argument("cross_frame_attention: empty anchor list");
    if (q.shape.size() != 2) throw std::invalid_argument("cross_frame_attention: q must be {n,d}");
    int n = q.shape[0], d = q.shape[1];
    int total = 0;
    for (const auto& [k, v] : anchors) {
        if (k.shape.size() != 2 || v.shape.size() != 2 || k.shape[1] != d || v.shape[1] != d ||
            k.shape[0] != v.shape[0])
            throw std::invalid_argument("cross_frame_attention: anchor K/V dimension mismatch");
        total += k.shape[0];
    }
    Tensor kcat({total, d}), vcat({total, d});
    int64_t off = 0;
    for (const auto& [k, v] : anchors) {
        kcat.data.segment(off, k.size()) = k.data;
        vcat.data.segment(off, v.size()) = v.data;
        off += k.size();
    }
    float scale = 1.f / std::sqrt(static_cast<float>(d));
    Tensor out({n, d});
    Eigen::MatrixXf scores = (q.mat(n, d) * kcat.mat(total, d).transpose()) * scale;
    for (int i = 0; i < n; ++i) {
        Eigen::ArrayXf row = scores.row(i).array();
        row -= row.maxCoeff();
        Eigen::ArrayXf e = row.exp();
        e /= e.sum();
        out.mat(n, d).row(i) = e.matrix().transpose() * vcat.mat(total, d);
    }
    return out;
}

std::vector<std::string> encoder_arm_param_names(const DenoiserConfig& cfg) {
    std::vector<std::string> names;
    auto push = [&](const std::string& base, std::initializer_list<const char*> suffixes) {
        for (const char* s : suffixes) names.push_back(base + s);
    };
    auto push_rb = [&](const std::string& rb, bool skip) {
        push(rb, {".gn1.g", ".gn1.b", ".conv1.w", ".conv1.b", ".temb.w", ".temb.b"});
        if (cfg.guidance_conditioned) push(rb, {".gI.w", ".gI.b", ".gT.w", ".gT.b"});
        push(rb, {".gn2.g", ".gn2.b", ".conv2.w", ".conv2.b"});
        if (skip) push(rb, {".skip.w", ".skip.b"});
    };
    auto push_attn = [&](const std::string& base) {
        push(base, {".attn.gn.g", ".attn.gn.b", ".attn.q.w", ".attn.q.b", ".attn.k.w", ".attn.k.b",
                    ".attn.v.w", ".attn.v.b", ".attn.o.w", ".attn.o.b", ".xattn.gn.g", ".xattn.gn.b",
                    ".xattn.q.w", ".xattn.q.b", ".xattn.k.w", ".xattn.k.b", ".xattn.v.w",
                    ".xattn.v.b", ".xattn.o.w", ".xattn.o.b"});
    };
    push("conv_in", {".w", ".b"});
    push("time_mlp.0", {".w", ".b"});
    push("time_mlp.1", {".w", ".b"});
    int L = cfg.levels();
    for (int l = 0; l < L; ++l) {
        std::string base = "down" + std::to_string(l);
        push_rb(base + ".rb", false);
        if (cfg.attention_levels.count(l)) push_attn(base);
        if (l + 1 < L) push(base + ".downsample", {".w", ".b"});
    }
    push_rb("mid.rb", false);
    return names;
}

ShapeCatalog denoiser_catalog(const DenoiserConfig& cfg, int latent_h, int latent_w) {
    cfg.validate();
    ShapeCatalog cat;
    cat.name = "denoiser";
    int L = cfg.levels();

    auto conv = [&](const std::string& name, int cin, int cout, int k, int h, int w, int level) {
        LayerDesc l;
        l.kind = LayerDesc::Kind::Conv;
        l.name = name;
        l.level = level;
        l.cin = cin;
        l.cout = cout;
        l.kh = l.kw = k;
        l.ho = h;
        l.wo = w;
        cat.layers.push_back(l);
    };
    auto lin = [&](const std::string& name, int rows, int cin, int cout, int level) {
        LayerDesc l;
        l.kind = LayerDesc::Kind::Linear;
        l.name = name;
        l.level = level;
        l.rows = rows;
        l.cin = cin;
        l.cout = cout;
        cat.layers.push_back(l);
    };
    auto res_block = [&](const std::string& name, int cin, int cout, int h, int w, int level) {
        conv(name + ".conv1", cin, cout, 3, h, w, level);
        conv(name + ".conv2", cout, cout, 3, h, w, level);
        if (cin != cout) conv(name + ".skip", cin, cout, 1, h, w, level);
        lin(name + ".temb", 1, cfg.embed_dim, cout, level);
        if (cfg.guidance_conditioned) {
            lin(name + ".gI", 1, cfg.embed_dim, cout, level);
            lin(name + ".gT", 1, cfg.embed_dim, cout, level);
        }
    };
    auto attention = [&](const std::string& name, int c, int h, int w, int level) {
        LayerDesc sa;
        sa.kind = LayerDesc::Kind::Attention;
        sa.name = name + ".attn";
        sa.level = level;
        sa.tokens = h * w;
        sa.kv_tokens = h * w;
        sa.dim = c;
        sa.kv_dim = c;
        cat.layers.push_back(sa);
        LayerDesc ca = sa;
        ca.name = name + ".xattn";
        ca.kv_tokens = 4;
        ca.kv_dim = cfg.token_dim;
        cat.layers.push_back(ca);
    };

    std::vector<int> hs(L), ws(L);
    for (int l = 0; l < L; ++l) {
        hs[l] = latent_h >> l;
        ws[l] = latent_w >> l;
    }
    conv("conv_in", cfg.in_channels(), cfg.channels(0), 3, hs[0], ws[0], 0);
    lin("time_mlp.0", 1, cfg.embed_dim, cfg.embed_dim, -1);
    lin("time_mlp.1", 1, cfg.embed_dim, cfg.embed_dim, -1);
    for (int l = 0; l < L; ++l) {
        std::string base = "down" + std::to_string(l);
        res_block(base + ".rb", cfg.channels(l), cfg.channels(l), hs[l], ws[l], l);
        if (cfg.attention_levels.count(l)) attention(base, cfg.channels(l), hs[l], ws[l], l);
        if (l + 1 < L) conv(base + ".downsample", cfg.channels(l), cfg.channels(l + 1), 3, hs[l + 1], ws[l + 1], l);
    }
    res_block("mid.rb", cfg.channels(L - 1), cfg.channels(L - 1), hs[L - 1], ws[L - 1], L - 1);
    for (int l = L - 1; l >= 0; --l) {
        std::string base = "up" + std::to_string(l);
        res_block(base + ".rb", 2 * cfg.channels(l), cfg.channels(l), hs[l], ws[l], l);
        if (cfg.attention_levels.count(l)) attention(base, cfg.channels(l), hs[l], ws[l], l);
        if (l > 0) conv(base + ".upconv", cfg.channels(l), cfg.channels(l - 1), 3, hs[l - 1], ws[l - 1], l);
    }
    conv("conv_out", cfg.channels(0), cfg.latent_channels, 3, hs[0], ws[0], 0);
    return cat;
}

}  // namespace moviekit
