#include "moviekit/autoencoder.hpp"

#include <cmath>

namespace moviekit {

namespace {

Tensor conv_init(Rng& rng, int cout, int cin, int k) {
    float stddev = std::sqrt(2.f / (cin * k * k));
    return rng.normal_tensor({cout, cin, k, k}, 0.f, stddev);
}

void add_conv(ParamStore& ps, Rng& rng, const std::string& name, int cout, int cin, int k) {
    ps.add(name + ".w", conv_init(rng, cout, cin, k));
    ps.add(name + ".b", Tensor({cout}));
}

void add_gn(ParamStore& ps, const std::string& name, int c) {
    ps.add(name + ".g", Tensor::full({c}, 1.f));
    ps.add(name + ".b", Tensor({c}));
}

Var gn_act(Graph& g, ParamStore& ps, const std::string& name, Var x, int groups) {
    return group_norm(g, x, g.param(ps.get(name + ".g")), g.param(ps.get(name + ".b")), groups);
}

Var conv(Graph& g, ParamStore& ps, const std::string& name, Var x, int stride) {
    const Param& w = ps.get(name + ".w");
    return conv2d(g, x, g.param(ps.get(name + ".w")), g.param(ps.get(name + ".b")), stride,
                  w.value.shape[2] / 2);
}

bool is_big(const ParamStore& ps) { return !ps.has("r0.w"); }

}  // namespace

AutoencoderPair build_autoencoder(Rng& rng) {
    AutoencoderPair p;
    // big: 3 stride-2 stages, widths {32,64,128}
    add_conv(p.big_encoder, rng, "e0", 32, 3, 3);
    add_gn(p.big_encoder, "n0", 32);
    add_conv(p.big_encoder, rng, "e1", 64, 32, 3);
    add_gn(p.big_encoder, "n1", 64);
    add_conv(p.big_encoder, rng, "e2", 128, 64, 3);
    add_gn(p.big_encoder, "n2", 128);
    add_conv(p.big_encoder, rng, "e3", 4, 128, 3);

    add_conv(p.big_decoder, rng, "d0", 128, 4, 3);
    add_gn(p.big_decoder, "n0", 128);
    add_conv(p.big_decoder, rng, "d1", 64, 128, 3);
    add_gn(p.big_decoder, "n1", 64);
    add_conv(p.big_decoder, rng, "d2", 32, 64, 3);
    add_gn(p.big_decoder, "n2", 32);
    add_conv(p.big_decoder, rng, "d3", 16, 32, 3);
    add_gn(p.big_decoder, "n3", 16);
    add_conv(p.big_decoder, rng, "d3b", 16, 16, 3);
    add_gn(p.big_decoder, "n3b", 16);
    add_conv(p.big_decoder, rng, "d4", 3, 16, 3);

    // tiny: widths {8,16,16} plus a residual block on each side
    add_conv(p.tiny_encoder, rng, "e0", 8, 3, 3);
    add_conv(p.tiny_encoder, rng, "e1", 16, 8, 3);
    add_conv(p.tiny_encoder, rng, "e2", 16, 16, 3);
    add_conv(p.tiny_encoder, rng, "r0", 16, 16, 3);
    add_conv(p.tiny_encoder, rng, "r1", 16, 16, 3);
    add_conv(p.tiny_encoder, rng, "e3", 4, 16, 3);

    add_conv(p.tiny_decoder, rng, "d0", 16, 4, 3);
    add_conv(p.tiny_decoder, rng, "r0", 16, 16, 3);
    add_conv(p.tiny_decoder, rng, "r1", 16, 16, 3);
    add_conv(p.tiny_decoder, rng, "d1", 16, 16, 3);
    add_conv(p.tiny_decoder, rng, "d2", 8, 16, 3);
    add_conv(p.tiny_decoder, rng, "d3", 8, 8, 3);
    add_conv(p.tiny_decoder, rng, "d4", 3, 8, 3);
    return p;
}

Var encoder_forward_graph(Graph& g, ParamStore& ps, Var image, float latent_scale) {
    Var x = image;
    if (is_big(ps)) {
        x = silu(g, gn_act(g, ps, "n0", conv(g, ps, "e0", x, 2), 8));
        x = silu(g, gn_act(g, ps, "n1", conv(g, ps, "e1", x, 2), 8));
        x = silu(g, gn_act(g, ps, "n2", conv(g, ps, "e2", x, 2), 8));
        x = conv(g, ps, "e3", x, 1);
    } else {
        x = silu(g, conv(g, ps, "e0", x, 2));
        x = silu(g, conv(g, ps, "e1", x, 2));
        x = silu(g, conv(g, ps, "e2", x, 2));
        Var r = silu(g, conv(g, ps, "r0", x, 1));
        x = add(g, x, conv(g, ps, "r1", r, 1));
        x = conv(g, ps, "e3", x, 1);
    }
    return latent_scale == 1.f ? x : scale(g, x, latent_scale);
}

Var decoder_forward_graph(Graph& g, ParamStore& ps, Var latent, float latent_scale) {
    Var x = latent_scale == 1.f ? latent : scale(g, latent, 1.f / latent_scale);
    if (is_big(ps)) {
        x = silu(g, gn_act(g, ps, "n0", conv(g, ps, "d0", x, 1), 8));
        x = silu(g, gn_act(g, ps, "n1", conv(g, ps, "d1", upsample2x(g, x), 1), 8));
        x = silu(g, gn_act(g, ps, "n2", conv(g, ps, "d2", upsample2x(g, x), 1), 8));
        x = silu(g, gn_act(g, ps, "n3", conv(g, ps, "d3", upsample2x(g, x), 1), 8));
        x = silu(g, gn_act(g, ps, "n3b", conv(g, ps, "d3b", x, 1), 8));
        x = conv(g, ps, "d4", x, 1);
    } else {
        x = silu(g, conv(g, ps, "d0", x, 1));
        Var r = silu(g, conv(g, ps, "r0", x, 1));
        x = add(g, x, conv(g, ps, "r1", r, 1));
        x = silu(g, conv(g, ps, "d1", upsample2x(g, x), 1));
        x = silu(g, conv(g, ps, "d2", upsample2x(g, x), 1));
        x = silu(g, conv(g, ps, "d3", upsample2x(g, x), 1));
        x = conv(g, ps, "d4", x, 1);
    }
    return x;
}

Tensor encode(AutoencoderPair& pair, const Tensor& image, AeHalf which, int64_t* calls) {
    if (image.shape.size() != 3 || image.shape[0] != 3)
        throw std::invalid_argument("encode: expected {3,H,W} image");
    if (image.shape[1] % pair.downsample_factor != 0 || image.shape[2] % pair.downsample_factor != 0)
        throw std::invalid_argument("encode: image dims not divisible by " +
                                    std::to_string(pair.downsample_factor));
    Graph g;
    ParamStore& ps = which == AeHalf::Big ? pair.big_encoder : pair.tiny_encoder;
    Var out = encoder_forward_graph(g, ps, g.constant(image), pair.latent_scale);
    if (calls) ++*calls;
    return g.val(out);
}

Tensor decode(AutoencoderPair& pair, const Tensor& latent, AeHalf which, int64_t* calls) {
    if (latent.shape.size() != 3 || latent.shape[0] != pair.latent_channels)
        throw std::invalid_argument("decode: expected {" + std::to_string(pair.latent_channels) +
                                    ",h,w} latent");
    Graph g;
    ParamStore& ps = which == AeHalf::Big ? pair.big_decoder : pair.tiny_decoder;
    Var out = decoder_forward_graph(g, ps, g.constant(latent), pair.latent_scale);
    if (calls) ++*calls;
    Tensor img = g.val(out);
    img.data = img.data.min(1.f).max(0.f);
    return img;
}

namespace {

void check_loss(float loss, const char* stage, int iter) {
    if (!std::isfinite(loss))
        throw std::runtime_error(std::string("autoencoder training diverged (") + stage +
                                 ", iteration " + std::to_string(iter) + ")");
}

}  // namespace

AeTrainLog train_pair(AutoencoderPair& pair, const std::vector<Tensor>& corpus,
                      const AeTrainConfig& cfg, Rng& rng) {
    if (corpus.empty()) throw std::invalid_argument("train_pair: empty corpus");
    AeTrainLog log;
    if (cfg.iters_big == 0 && cfg.iters_tiny == 0) return log;

    auto decayed = [](float lr, int it, int iters) {
        if (iters <= 0) return lr;
        double f = static_cast<double>(it) / iters;
        return f > 0.85 ? lr * 0.2f : lr;
    };
    AdamOpt opt_enc{cfg.lr}, opt_dec{cfg.lr};
    for (int it = 0; it < cfg.iters_big; ++it) {
        opt_enc.lr = opt_dec.lr = decayed(cfg.lr, it, cfg.iters_big);
        pair.big_encoder.zero_grads();
        pair.big_decoder.zero_grads();
        float loss_acc = 0.f;
        for (int b = 0; b < cfg.batch; ++b) {
            const Tensor& img = corpus[rng.uniform_int(static_cast<int>(corpus.size()))];
            Graph g;
            Var lat = encoder_forward_graph(g, pair.big_encoder, g.constant(img), 1.f);
            Var rec = decoder_forward_graph(g, pair.big_decoder, lat, 1.f);
            Var loss = mse_loss(g, rec, g.constant(img));
            g.backward(loss);
            g.accumulate_param_grads(1.f / cfg.batch);
            loss_acc += g.val(loss).data[0];
        }
        check_loss(loss_acc, "big", it);
        opt_enc.update(pair.big_encoder);
        opt_dec.update(pair.big_decoder);
        log.big_loss.push_back(loss_acc / cfg.batch);
    }

    if (cfg.iters_big > 0) {
        // calibrate the shared latent scale to ~unit std over a probe set
        double sq = 0.0;
        int64_t n = 0;
        int probe = std::min<int>(64, static_cast<int>(corpus.size()));
        for (int i = 0; i < probe; ++i) {
            Graph g;
            Var lat = encoder_forward_graph(g, pair.big_encoder, g.constant(corpus[i]), 1.f);
            sq += g.val(lat).data.square().sum();
            n += g.val(lat).size();
        }
        float std_lat = static_cast<float>(std::sqrt(sq / std::max<int64_t>(1, n)));
        if (std_lat > 1e-6f) pair.latent_scale = 1.f / std_lat;
    }

    AdamOpt opt_tenc{cfg.lr}, opt_tdec{cfg.lr};
    for (int it = 0; it < cfg.iters_tiny; ++it) {
        opt_tenc.lr = opt_tdec.lr = decayed(cfg.lr, it, cfg.iters_tiny);
        pair.tiny_encoder.zero_grads();
        pair.tiny_decoder.zero_grads();
        float enc_acc = 0.f, dec_acc = 0.f;
        for (int b = 0; b < cfg.batch; ++b) {
            const Tensor& img = corpus[rng.uniform_int(static_cast<int>(corpus.size()))];
            Tensor big_lat = encode(pair, img, AeHalf::Big);
            {
                Graph g;
                Var lat = encoder_forward_graph(g, pair.tiny_encoder, g.constant(img),
                                                pair.latent_scale);
                Var loss = mse_loss(g, lat, g.constant(big_lat));
                g.backward(loss);
                g.accumulate_param_grads(1.f / cfg.batch);
                enc_acc += g.val(loss).data[0];
            }
            {
                Graph g;
                Var rec = decoder_forward_graph(g, pair.tiny_decoder, g.constant(big_lat),
                                                pair.latent_scale);
                Var loss = mse_loss(g, rec, g.constant(img));
                g.backward(loss);
                g.accumulate_param_grads(1.f / cfg.batch);
                dec_acc += g.val(loss).data[0];
            }
        }
        check_loss(enc_acc + dec_acc, "tiny", it);
        opt_tenc.update(pair.tiny_encoder);
        opt_tdec.update(pair.tiny_decoder);
        log.tiny_encoder_loss.push_back(enc_acc / cfg.batch);
        log.tiny_decoder_loss.push_back(dec_acc / cfg.batch);
    }
    return log;
}

double psnr(const Tensor& a, const Tensor& b) {
    double m = mse(a, b);
    if (m <= 0.0) return std::numeric_limits<double>::infinity();
    return -10.0 * std::log10(m);
}

ShapeCatalog autoencoder_catalog(AeHalf which, int image_h, int image_w) {
    ShapeCatalog cat;
    auto conv = [&](const std::string& name, int cin, int cout, int k, int h, int w) {
        LayerDesc l;
        l.kind = LayerDesc::Kind::Conv;
        l.name = name;
        l.cin = cin;
        l.cout = cout;
        l.kh = l.kw = k;
        l.ho = h;
        l.wo = w;
        cat.layers.push_back(l);
    };
    int h = image_h, w = image_w;
    if (which == AeHalf::Big) {
        cat.name = "autoencoder-big";
        conv("e0", 3, 32, 3, h / 2, w / 2);
        conv("e1", 32, 64, 3, h / 4, w / 4);
        conv("e2", 64, 128, 3, h / 8, w / 8);
        conv("e3", 128, 4, 3, h / 8, w / 8);
        conv("d0", 4, 128, 3, h / 8, w / 8);
        conv("d1", 128, 64, 3, h / 4, w / 4);
        conv("d2", 64, 32, 3, h / 2, w / 2);
        conv("d3", 32, 16, 3, h, w);
        conv("d3b", 16, 16, 3, h, w);
        conv("d4", 16, 3, 3, h, w);
    } else {
        cat.name = "autoencoder-tiny";
        conv("e0", 3, 8, 3, h / 2, w / 2);
        conv("e1", 8, 16, 3, h / 4, w / 4);
        conv("e2", 16, 16, 3, h / 8, w / 8);
        conv("r0", 16, 16, 3, h / 8, w / 8);
        conv("r1", 16, 16, 3, h / 8, w / 8);
        conv("e3", 16, 4, 3, h / 8, w / 8);
        conv("d0", 4, 16, 3, h / 8, w / 8);
        conv("r0d", 16, 16, 3, h / 8, w / 8);
        conv("r1d", 16, 16, 3, h / 8, w / 8);
        conv("d1", 16, 16, 3, h / 4, w / 4);
        conv("d2", 16, 8, 3, h / 2, w / 2);
        conv("d3", 8, 8, 3, h, w);
        conv("d4", 8, 3, 3, h, w);
    }
    return cat;
}

}  // namespace moviekit
