#include "moviekit/graph.hpp"

#include <cmath>
#include <cstring>

namespace moviekit {

// ---------------------------------------------------------------- ParamStore

Param& ParamStore::add(const std::string& name, Tensor init) {
    if (by_name.count(name)) throw std::invalid_argument("duplicate param: " + name);
    auto p = std::make_unique<Param>();
    p->name = name;
    p->grad = Tensor(init.shape);
    p->value = std::move(init);
    Param* raw = p.get();
    items.push_back(std::move(p));
    by_name[name] = raw;
    return *raw;
}

Param& ParamStore::get(const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::out_of_range("no param: " + name);
    return *it->second;
}

const Param& ParamStore::get(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::out_of_range("no param: " + name);
    return *it->second;
}

void ParamStore::zero_grads() {
    for (auto& p : items) p->grad.data.setZero();
}

int64_t ParamStore::param_count() const {
    int64_t n = 0;
    for (auto& p : items) n += p->value.size();
    return n;
}

uint64_t ParamStore::checksum() const {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* ptr, size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(ptr);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (auto& p : items) {
        mix(p->name.data(), p->name.size());
        mix(p->value.data.data(), sizeof(float) * static_cast<size_t>(p->value.size()));
    }
    return h;
}

// --------------------------------------------------------------------- Graph

Var Graph::leaf(Tensor v, bool requires_grad) {
    return make(std::move(v), requires_grad, nullptr);
}

Var Graph::param(Param& p) {
    Var v = make(p.value, p.trainable, nullptr);
    nodes_[v.id].param = &p;
    return v;
}

Var Graph::make(Tensor value, bool requires_grad, std::function<void(Graph&, int32_t)> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Tensor& Graph::grad_buf(int32_t id) {
    Node& n = nodes_[id];
    if (!n.grad_ready) {
        n.grad = Tensor(n.value.shape);
        n.grad_ready = true;
    }
    return n.grad;
}

void Graph::backward(Var loss) {
    if (!loss.valid()) throw std::invalid_argument("backward on invalid var");
    Node& ln = nodes_[loss.id];
    if (ln.value.size() != 1) throw std::invalid_argument("backward expects a scalar loss");
    grad_buf(loss.id).data[0] = 1.f;
    for (int32_t i = loss.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.requires_grad || !n.grad_ready || !n.back) continue;
        n.back(*this, i);
    }
}

void Graph::accumulate_param_grads(float scale) {
    for (auto& n : nodes_) {
        if (n.param && n.param->trainable && n.grad_ready)
            n.param->grad.data += n.grad.data * scale;
    }
}

void Graph::clear() { nodes_.clear(); }

// ------------------------------------------------------------ op helpers

namespace {

bool needs(const Graph& g, Var v) { return g.requires_grad(v); }

void add_into(Graph& g, int32_t id, const Eigen::ArrayXf& contrib) {
    g.grad_buf(id).data += contrib;
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Var add(Graph& g, Var a, Var b) {
    require_same_shape(g.val(a), g.val(b), "add");
    Tensor out = g.val(a);
    out.data += g.val(b).data;
    bool rg = needs(g, a) || needs(g, b);
    int32_t ai = a.id, bi = b.id;
    return g.make(std::move(out), rg, [ai, bi](Graph& gg, int32_t self) {
        const Tensor& go = gg.node(self).grad;
        if (gg.requires_grad({ai})) add_into(gg, ai, go.data);
        if (gg.requires_grad({bi})) add_into(gg, bi, go.data);
    });
}

Var sub(Graph& g, Var a, Var b) {
    require_same_shape(g.val(a), g.val(b), "sub");
    Tensor out = g.val(a);
    out.data -= g.val(b).data;
    bool rg = needs(g, a) || needs(g, b);
    int32_t ai = a.id, bi = b.id;
    return g.make(std::move(out), rg, [ai, bi](Graph& gg, int32_t self) {
        const Tensor& go = gg.node(self).grad;
        if (gg.requires_grad({ai})) add_into(gg, ai, go.data);
        if (gg.requires_grad({bi})) gg.grad_buf(bi).data -= go.data;
    });
}

Var mul(Graph& g, Var a, Var b) {
    require_same_shape(g.val(a), g.val(b), "mul");
    Tensor out = g.val(a);
    out.data *= g.val(b).data;
    bool rg = needs(g, a) || needs(g, b);
    int32_t ai = a.id, bi = b.id;
    return g.make(std::move(out), rg, [ai, bi](Graph& gg, int32_t self) {
        const Tensor& go = gg.node(self).grad;
        if (gg.requires_grad({ai})) add_into(gg, ai, go.data * gg.val({bi}).data);
        if (gg.requires_grad({bi})) add_into(gg, bi, go.data * gg.val({ai}).data);
    });
}

Var scale(Graph& g, Var a, float s) {
    Tensor out = g.val(a);
    out.data *= s;
    int32_t ai = a.id;
    return g.make(std::move(out), needs(g, a), [ai, s](Graph& gg, int32_t self) {
        if (gg.requires_grad({ai})) add_into(gg, ai, gg.node(self).grad.data * s);
    });
}

Var offset(Graph& g, Var a, float c) {
    Tensor out = g.val(a);
    out.data += c;
    int32_t ai = a.id;
    return g.make(std::move(out), needs(g, a), [ai](Graph& gg, int32_t self) {
        if (gg.requires_grad({ai})) add_into(gg, ai, gg.node(self).grad.data);
    });
}

Var add_scaled(Graph& g, Var a, Var b, float sb) {
    require_same_shape(g.val(a), g.val(b), "add_scaled");
    Tensor out = g.val(a);
    out.data += sb * g.val(b).data;
    bool rg = needs(g, a) || needs(g, b);
    int32_t ai = a.id, bi = b.id;
    return g.make(std::move(out), rg, [ai, bi, sb](Graph& gg, int32_t self) {
        const Tensor& go = gg.node(self).grad;
        if (gg.requires_grad({ai})) add_into(gg, ai, go.data);
        if (gg.requires_grad({bi})) add_into(gg, bi, go.data * sb);
    });
}

Var silu(Graph& g, Var a) {
    Tensor out = g.val(a);
    out.data = out.data / (1.f + (-out.data).exp());
    int32_t ai = a.id;
    return g.make(std::move(out), needs(g, a), [ai](Graph& gg, int32_t self) {
        if (!gg.requires_grad({ai})) return;
        const Eigen::ArrayXf& x = gg.val({ai}).data;
        Eigen::ArrayXf sig = 1.f / (1.f + (-x).exp());
        add_into(gg, ai, gg.node(self).grad.data * (sig * (1.f + x * (1.f - sig))));
    });
}

Var sigmoid(Graph& g, Var a) {
    Tensor out = g.val(a);
    out.data = 1.f / (1.f + (-out.data).exp());
    int32_t ai = a.id;
    return g.make(std::move(out), needs(g, a), [ai](Graph& gg, int32_t self) {
        if (!gg.requires_grad({ai})) return;
        const Eigen::ArrayXf& y = gg.node(self).value.data;
        add_into(gg, ai, gg.node(self).grad.data * (y * (1.f - y)));
    });
}

Var relu(Graph& g, Var a) {
    Tensor out = g.val(a);
    out.data = out.data.max(0.f);
    int32_t ai = a.id;
    return g.make(std::move(out), needs(g, a), [ai](Graph& gg, int32_t self) {
        if (!gg.requires_grad({ai})) return;
        const Eigen::ArrayXf& x = gg.val({ai}).data;
        add_into(gg, ai, gg.node(self).grad.data * (x > 0.f).cast<float>());
    });
}

// -------------------------------------------------------------------- matrix

Var matmul(Graph& g, Var a, Var b) {
    const Tensor& ta = g.val(a);
    const Tensor& tb = g.val(b);
    if (ta.shape.size() != 2 || tb.shape.size() != 2 || ta.shape[1] != tb.shape[0])
        throw std::invalid_argument("matmul: bad shapes " + shape_str(ta.shape) + " x " + shape_str(tb.shape));
    int m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
    Tensor out({m, n});
    out.mat(m, n).noalias() = ta.mat(m, k) * tb.mat(k, n);
    bool rg = needs(g, a) || needs(g, b);
    int32_t ai = a.id, bi = b.id;
    return g.make(std::move(out), rg, [ai, bi, m, k, n](Graph& gg, int32_t self) {
        const Tensor& go = gg.node(self).grad;
        if (gg.requires_grad({ai}))
            gg.grad_buf(ai).mat(m, k).noalias() += go.mat(m, n) * gg.val({bi}).mat(k, n).transpose();
        if (gg.requires_grad({bi}))
            gg.grad_buf(bi).mat(k, n).noalias() += gg.val({ai}).mat(m, k).transpose() * go.mat(m, n);
    });
}

Var matmul_nt(Graph& g, Var a, Var b) {
    const Tensor& ta = g.val(a);
    const Tensor& tb = g.val(b);
    if (ta.shape.size() != 2 || tb.shape.size() != 2 || ta.shape[1] != tb.shape[1])
        throw std::invalid_argument("matmul_nt: bad shapes " + shape_str(ta.shape) + " x " + shape_str(tb.shape));
    int m = ta.shape[0], k = ta.shape[1], n = tb.shape[0];
    Tensor out({m, n});
    out.mat(m, n).noalias() = ta.mat(m, k) * tb.mat(n, k).transpose();
    bool rg = needs(g, a) || needs(g, b);
    int32_t ai = a.id, bi = b.id;
    return g.make(std::move(out), rg, [ai, bi, m, k, n](Graph& gg, int32_t self) {
        const Tensor& go = gg.node(self).grad;
        if (gg.requires_grad({ai}))
            gg.grad_buf(ai).mat(m, k).noalias() += go.mat(m, n) * gg.val({bi}).mat(n, k);
        if (gg.requires_grad({bi}))
            gg.grad_buf(bi).mat(n, k).noalias() += go.mat(m, n).transpose() * gg.val({ai}).mat(m, k);
    });
}

Var row_bias_add(Graph& g, Var x, Var b) {
    const Tensor& tx = g.val(x);
    const Tensor& tb = g.val(b);
    if (tx.shape.size() != 2 || tb.size() != tx.shape[1])
        throw std::invalid_argument("row_bias_add: bad shapes");
    int n = tx.shape[0], c = tx.shape[1];
    Tensor out = tx;
    auto om = out.mat(n, c);
    for (int i = 0; i < n; ++i) om.row(i) += tb.mat(1, c).row(0);
    bool rg = needs(g, x) || needs(g, b);
    int32_t xi = x.id, bi = b.id;
    return g.make(std::move(out), rg, [xi, bi, n, c](Graph& gg, int32_t self) {
        const Tensor& go = gg.node(self).grad;
        if (gg.requires_grad({xi})) add_into(gg, xi, go.data);
        if (gg.requires_grad({bi}))
            gg.grad_buf(bi).mat(1, c).row(0) += go.mat(n, c).colwise().sum();
    });
}

Var linear(Graph& g, Var x, Var w, Var b) { return row_bias_add(g, matmul_nt(g, x, w), b); }

Var softmax_rows(Graph& g, Var x) {
    const Tensor& tx = g.val(x);
    if (tx.shape.size() != 2) throw std::invalid_argument("softmax_rows: expects {n,m}");
    int n = tx.shape[0], m = tx.shape[1];
    Tensor out({n, m});
    for (int i = 0; i < n; ++i) {
        auto row = tx.mat(n, m).row(i);
        float mx = row.maxCoeff();
        Eigen::ArrayXf e = (row.array() - mx).exp();
        out.mat(n, m).row(i) = (e / e.sum()).matrix();
    }
    int32_t xi = x.id;
    return g.make(std::move(out), needs(g, x), [xi, n, m](Graph& gg, int32_t self) {
        if (!gg.requires_grad({xi})) return;
        const Tensor& y = gg.node(self).value;
        const Tensor& go = gg.node(self).grad;
        auto gx = gg.grad_buf(xi).mat(n, m);
        for (int i = 0; i < n; ++i) {
            Eigen::ArrayXf yi = y.mat(n, m).row(i).array();
            Eigen::ArrayXf gi = go.mat(n, m).row(i).array();
            float dot = (gi * yi).sum();
            gx.row(i).array() += yi * (gi - dot);
        }
    });
}

Var concat_rows(Graph& g, const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_rows: empty list");
    int c = g.val(xs[0]).shape[1];
    int total = 0;
    bool rg = false;
    for (Var v : xs) {
        const Tensor& t = g.val(v);
        if (t.shape.size() != 2 || t.shape[1] != c) throw std::invalid_argument("concat_rows: column mismatch");
        total += t.shape[0];
        rg = rg || needs(g, v);
    }
    Tensor out({total, c});
    int64_t off = 0;
    for (Var v : xs) {
        const Tensor& t = g.val(v);
        out.data.segment(off, t.size()) = t.data;
        off += t.size();
    }
    std::vector<int32_t> ids;
    for (Var v : xs) ids.push_back(v.id);
    return g.make(std::move(out), rg, [ids](Graph& gg, int32_t self) {
        const Tensor& go = gg.node(self).grad;
        int64_t off = 0;
        for (int32_t id : ids) {
            int64_t n = gg.val({id}).size();
            if (gg.requires_grad({id})) gg.grad_buf(id).data += go.data.segment(off, n);
            off += n;
        }
    });
}

// -------------------------------------------------------------- feature maps

namespace {

struct ConvDims {
    int cin, h, w, cout, kh, kw, stride, pad, ho, wo;
};

// valid output-x range for a kernel column: ix = ox*stride + kj - pad in [0, w)
inline std::pair<int, int> ox_range(const ConvDims& d, int kj) {
    int lo = 0;
    while (lo < d.wo && lo * d.stride + kj - d.pad < 0) ++lo;
    int hi = d.wo;
    while (hi > lo && (hi - 1) * d.stride + kj - d.pad >= d.w) --hi;
    return {lo, hi};
}

void im2col(const Tensor& x, const ConvDims& d, Tensor& col) {
    // col: {cin*kh*kw, ho*wo}
    float* cd = col.data.data();
    const float* xd = x.data.data();
    int64_t spatial = static_cast<int64_t>(d.ho) * d.wo;
    for (int c = 0; c < d.cin; ++c) {
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                int row = (c * d.kh + ki) * d.kw + kj;
                float* out_row = cd + row * spatial;
                auto [lo, hi] = ox_range(d, kj);
                for (int oy = 0; oy < d.ho; ++oy) {
                    float* out = out_row + static_cast<int64_t>(oy) * d.wo;
                    int iy = oy * d.stride + ki - d.pad;
                    if (iy < 0 || iy >= d.h) {
                        std::memset(out, 0, sizeof(float) * d.wo);
                        continue;
                    }
                    if (lo > 0) std::memset(out, 0, sizeof(float) * lo);
                    if (hi < d.wo) std::memset(out + hi, 0, sizeof(float) * (d.wo - hi));
                    const float* src = xd + (static_cast<int64_t>(c) * d.h + iy) * d.w;
                    if (d.stride == 1) {
                        std::memcpy(out + lo, src + lo + kj - d.pad, sizeof(float) * (hi - lo));
                    } else {
                        for (int ox = lo; ox < hi; ++ox)
                            out[ox] = src[ox * d.stride + kj - d.pad];
                    }
                }
            }
        }
    }
}

void col2im_add(const Tensor& col, const ConvDims& d, Tensor& x) {
    const float* cd = col.data.data();
    float* xd = x.data.data();
    int64_t spatial = static_cast<int64_t>(d.ho) * d.wo;
    for (int c = 0; c < d.cin; ++c) {
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                int row = (c * d.kh + ki) * d.kw + kj;
                const float* in_row = cd + row * spatial;
                auto [lo, hi] = ox_range(d, kj);
                for (int oy = 0; oy < d.ho; ++oy) {
                    const float* in = in_row + static_cast<int64_t>(oy) * d.wo;
                    int iy = oy * d.stride + ki - d.pad;
                    if (iy < 0 || iy >= d.h) continue;
                    float* dst = xd + (static_cast<int64_t>(c) * d.h + iy) * d.w;
                    if (d.stride == 1) {
                        int off = kj - d.pad;
                        for (int ox = lo; ox < hi; ++ox) dst[ox + off] += in[ox];
                    } else {
                        for (int ox = lo; ox < hi; ++ox)
                            dst[ox * d.stride + kj - d.pad] += in[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv2d(Graph& g, Var x, Var w, Var b, int stride, int pad) {
    const Tensor& tx = g.val(x);
    const Tensor& tw = g.val(w);
    const Tensor& tb = g.val(b);
    if (tx.shape.size() != 3 || tw.shape.size() != 4 || tw.shape[1] != tx.shape[0])
        throw std::invalid_argument("conv2d: bad shapes " + shape_str(tx.shape) + " w " + shape_str(tw.shape));
    ConvDims d;
    d.cin = tx.shape[0];
    d.h = tx.shape[1];
    d.w = tx.shape[2];
    d.cout = tw.shape[0];
    d.kh = tw.shape[2];
    d.kw = tw.shape[3];
    d.stride = stride;
    d.pad = pad;
    d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
    d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
    if (tb.size() != d.cout) throw std::invalid_argument("conv2d: bias size mismatch");

    auto col = std::make_shared<Tensor>(Tensor({d.cin * d.kh * d.kw, d.ho * d.wo}));
    im2col(tx, d, *col);

    Tensor out({d.cout, d.ho, d.wo});
    out.mat(d.cout, d.ho * d.wo).noalias() =
        tw.mat(d.cout, d.cin * d.kh * d.kw) * col->mat(d.cin * d.kh * d.kw, d.ho * d.wo);
    for (int c = 0; c < d.cout; ++c)
        out.mat(d.cout, d.ho * d.wo).row(c).array() += tb.data[c];

    bool rg = needs(g, x) || needs(g, w) || needs(g, b);
    int32_t xi = x.id, wi = w.id, bi = b.id;
    return g.make(std::move(out), rg, [xi, wi, bi, d, col](Graph& gg, int32_t self) {
        const Tensor& go = gg.node(self).grad;
        auto gom = go.mat(d.cout, d.ho * d.wo);
        if (gg.requires_grad({bi})) {
            Tensor& gb = gg.grad_buf(bi);
            for (int c = 0; c < d.cout; ++c) gb.data[c] += gom.row(c).sum();
        }
        if (gg.requires_grad({wi})) {
            gg.grad_buf(wi).mat(d.cout, d.cin * d.kh * d.kw).noalias() +=
                gom * col->mat(d.cin * d.kh * d.kw, d.ho * d.wo).transpose();
        }
        if (gg.requires_grad({xi})) {
            Tensor dcol({d.cin * d.kh * d.kw, d.ho * d.wo});
            dcol.mat(d.cin * d.kh * d.kw, d.ho * d.wo).noalias() =
                gg.val({wi}).mat(d.cout, d.cin * d.kh * d.kw).transpose() * gom;
            col2im_add(dcol, d, gg.grad_buf(xi));
        }
    });
}

Var upsample2x(Graph& g, Var x) {
    const Tensor& tx = g.val(x);
    if (tx.shape.size() != 3) throw std::invalid_argument("upsample2x: expects {C,H,W}");
    int c = tx.shape[0], h = tx.shape[1], w = tx.shape[2];
    Tensor out({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx) out.at(ch, y, xx) = tx.at(ch, y / 2, xx / 2);
    int32_t xi = x.id;
    return g.make(std::move(out), needs(g, x), [xi, c, h, w](Graph& gg, int32_t self) {
        if (!gg.requires_grad({xi})) return;
        const Tensor& go = gg.node(self).grad;
        Tensor& gx = gg.grad_buf(xi);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx) gx.at(ch, y / 2, xx / 2) += go.at(ch, y, xx);
    });
}

Var concat_ch(Graph& g, Var a, Var b) {
    const Tensor& ta = g.val(a);
    const Tensor& tb = g.val(b);
    if (ta.shape.size() != 3 || tb.shape.size() != 3 || ta.shape[1] != tb.shape[1] ||
        ta.shape[2] != tb.shape[2])
        throw std::invalid_argument("concat_ch: spatial mismatch");
    Tensor out({ta.shape[0] + tb.shape[0], ta.shape[1], ta.shape[2]});
    out.data.head(ta.size()) = ta.data;
    out.data.tail(tb.size()) = tb.data;
    bool rg = needs(g, a) || needs(g, b);
    int32_t ai = a.id, bi = b.id;
    return g.make(std::move(out), rg, [ai, bi](Graph& gg, int32_t self) {
        const Tensor& go = gg.node(self).grad;
        int64_t na = gg.val({ai}).size();
        int64_t nb = gg.val({bi}).size();
        if (gg.requires_grad({ai})) gg.grad_buf(ai).data += go.data.head(na);
        if (gg.requires_grad({bi})) gg.grad_buf(bi).data += go.data.tail(nb);
    });
}

Var chan_bias_add(Graph& g, Var x, Var b) {
    const Tensor& tx = g.val(x);
    const Tensor& tb = g.val(b);
    if (tx.shape.size() != 3 || tb.size() != tx.shape[0])
        throw std::invalid_argument("chan_bias_add: bad shapes");
    int c = tx.shape[0];
    int64_t hw = static_cast<int64_t>(tx.shape[1]) * tx.shape[2];
    Tensor out = tx;
    for (int ch = 0; ch < c; ++ch) out.data.segment(ch * hw, hw) += tb.data[ch];
    bool rg = needs(g, x) || needs(g, b);
    int32_t xi = x.id, bi = b.id;
    return g.make(std::move(out), rg, [xi, bi, c, hw](Graph& gg, int32_t self) {
        const Tensor& go = gg.node(self).grad;
        if (gg.requires_grad({xi})) add_into(gg, xi, go.data);
        if (gg.requires_grad({bi})) {
            Tensor& gb = gg.grad_buf(bi);
            for (int ch = 0; ch < c; ++ch) gb.data[ch] += go.data.segment(ch * hw, hw).sum();
        }
    });
}

Var channel_dot(Graph& g, Var x, Var v) {
    const Tensor& tx = g.val(x);
    const Tensor& tv = g.val(v);
    if (tx.shape.size() != 3 || tv.size() != tx.shape[0])
        throw std::invalid_argument("channel_dot: bad shapes");
    int c = tx.shape[0];
    int64_t hw = static_cast<int64_t>(tx.shape[1]) * tx.shape[2];
    Tensor out({1, tx.shape[1], tx.shape[2]});
    for (int ch = 0; ch < c; ++ch) out.data += tv.data[ch] * tx.data.segment(ch * hw, hw);
    bool rg = needs(g, x) || needs(g, v);
    int32_t xi = x.id, vi = v.id;
    return g.make(std::move(out), rg, [xi, vi, c, hw](Graph& gg, int32_t self) {
        const Tensor& go = gg.node(self).grad;
        if (gg.requires_grad({xi})) {
            Tensor& gx = gg.grad_buf(xi);
            const Tensor& vv = gg.val({vi});
            for (int ch = 0; ch < c; ++ch) gx.data.segment(ch * hw, hw) += vv.data[ch] * go.data;
        }
        if (gg.requires_grad({vi})) {
            Tensor& gv = gg.grad_buf(vi);
            const Tensor& xx = gg.val({xi});
            for (int ch = 0; ch < c; ++ch) gv.data[ch] += (go.data * xx.data.segment(ch * hw, hw)).sum();
        }
    });
}

Var chw_to_tokens(Graph& g, Var x) {
    const Tensor& tx = g.val(x);
    if (tx.shape.size() != 3) throw std::invalid_argument("chw_to_tokens: expects {C,H,W}");
    int c = tx.shape[0];
    int hw = tx.shape[1] * tx.shape[2];
    Tensor out({hw, c});
    out.mat(hw, c) = tx.mat(c, hw).transpose();
    int32_t xi = x.id;
    return g.make(std::move(out), needs(g, x), [xi, c, hw](Graph& gg, int32_t self) {
        if (!gg.requires_grad({xi})) return;
        gg.grad_buf(xi).mat(c, hw) += gg.node(self).grad.mat(hw, c).transpose();
    });
}

Var tokens_to_chw(Graph& g, Var x, int h, int w) {
    const Tensor& tx = g.val(x);
    if (tx.shape.size() != 2 || tx.shape[0] != h * w)
        throw std::invalid_argument("tokens_to_chw: bad shapes");
    int c = tx.shape[1];
    Tensor out({c, h, w});
    out.mat(c, h * w) = tx.mat(h * w, c).transpose();
    int32_t xi = x.id;
    int hw = h * w;
    return g.make(std::move(out), needs(g, x), [xi, c, hw](Graph& gg, int32_t self) {
        if (!gg.requires_grad({xi})) return;
        gg.grad_buf(xi).mat(hw, c) += gg.node(self).grad.mat(c, hw).transpose();
    });
}

Var group_norm(Graph& g, Var x, Var gamma, Var beta, int groups, float eps) {
    const Tensor& tx = g.val(x);
    if (tx.shape.size() != 3) throw std::invalid_argument("group_norm: expects {C,H,W}");
    int c = tx.shape[0];
    if (c % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
    const Tensor& tg = g.val(gamma);
    const Tensor& tb = g.val(beta);
    if (tg.size() != c || tb.size() != c) throw std::invalid_argument("group_norm: affine size mismatch");
    int64_t hw = static_cast<int64_t>(tx.shape[1]) * tx.shape[2];
    int cg = c / groups;
    int64_t gn = cg * hw;

    auto xhat = std::make_shared<Tensor>(Tensor(tx.shape));
    auto invstd = std::make_shared<Tensor>(Tensor({groups}));
    Tensor out(tx.shape);
    for (int gi = 0; gi < groups; ++gi) {
        auto seg = tx.data.segment(gi * gn, gn);
        float mu = seg.mean();
        float var = (seg - mu).square().mean();
        float is = 1.f / std::sqrt(var + eps);
        invstd->data[gi] = is;
        xhat->data.segment(gi * gn, gn) = (seg - mu) * is;
    }
    for (int ch = 0; ch < c; ++ch)
        out.data.segment(ch * hw, hw) = xhat->data.segment(ch * hw, hw) * tg.data[ch] + tb.data[ch];

    bool rg = needs(g, x) || needs(g, gamma) || needs(g, beta);
    int32_t xi = x.id, gi_ = gamma.id, bi = beta.id;
    return g.make(std::move(out), rg, [xi, gi_, bi, groups, c, hw, cg, gn, xhat, invstd](Graph& gg, int32_t self) {
        const Tensor& go = gg.node(self).grad;
        const Tensor& tg = gg.val({gi_});
        if (gg.requires_grad({gi_})) {
            Tensor& gGamma = gg.grad_buf(gi_);
            for (int ch = 0; ch < c; ++ch)
                gGamma.data[ch] += (go.data.segment(ch * hw, hw) * xhat->data.segment(ch * hw, hw)).sum();
        }
        if (gg.requires_grad({bi})) {
            Tensor& gBeta = gg.grad_buf(bi);
            for (int ch = 0; ch < c; ++ch) gBeta.data[ch] += go.data.segment(ch * hw, hw).sum();
        }
        if (gg.requires_grad({xi})) {
            Tensor& gx = gg.grad_buf(xi);
            // dxhat = go * gamma per channel; then standard normalization backward per group
            Eigen::ArrayXf dxhat(gn);
            for (int grp = 0; grp < groups; ++grp) {
                for (int k = 0; k < cg; ++k) {
                    int ch = grp * cg + k;
                    dxhat.segment(k * hw, hw) = go.data.segment(ch * hw, hw) * tg.data[ch];
                }
                auto xh = xhat->data.segment(grp * gn, gn);
                float mean_dx = dxhat.mean();
                float mean_dxxh = (dxhat * xh).mean();
                gx.data.segment(grp * gn, gn) +=
                    invstd->data[grp] * (dxhat - mean_dx - xh * mean_dxxh);
            }
        }
    });
}

// ---------------------------------------------------------------- reductions

Var sum_all(Graph& g, Var x) {
    Tensor out = Tensor::scalar(g.val(x).data.sum());
    int32_t xi = x.id;
    return g.make(std::move(out), needs(g, x), [xi](Graph& gg, int32_t self) {
        if (!gg.requires_grad({xi})) return;
        gg.grad_buf(xi).data += gg.node(self).grad.data[0];
    });
}

Var mean_all(Graph& g, Var x) {
    int64_t n = g.val(x).size();
    Tensor out = Tensor::scalar(static_cast<float>(g.val(x).data.sum() / static_cast<double>(n)));
    int32_t xi = x.id;
    return g.make(std::move(out), needs(g, x), [xi, n](Graph& gg, int32_t self) {
        if (!gg.requires_grad({xi})) return;
        gg.grad_buf(xi).data += gg.node(self).grad.data[0] / static_cast<float>(n);
    });
}

Var mse_loss(Graph& g, Var a, Var b) {
    require_same_shape(g.val(a), g.val(b), "mse_loss");
    int64_t n = g.val(a).size();
    Eigen::ArrayXf diff = g.val(a).data - g.val(b).data;
    Tensor out = Tensor::scalar(static_cast<float>(diff.square().sum() / static_cast<double>(n)));
    bool rg = needs(g, a) || needs(g, b);
    int32_t ai = a.id, bi = b.id;
    return g.make(std::move(out), rg, [ai, bi, n](Graph& gg, int32_t self) {
        float s = 2.f * gg.node(self).grad.data[0] / static_cast<float>(n);
        Eigen::ArrayXf d = gg.val({ai}).data - gg.val({bi}).data;
        if (gg.requires_grad({ai})) add_into(gg, ai, s * d);
        if (gg.requires_grad({bi})) gg.grad_buf(bi).data -= s * d;
    });
}

// ---------------------------------------------------------------------- Adam

void AdamOpt::update(ParamStore& params) {
    ++step;
    float c1 = 1.f - std::pow(beta1, static_cast<float>(step));
    float c2 = 1.f - std::pow(beta2, static_cast<float>(step));
    for (auto& up : params.items) {
        Param& p = *up;
        if (!p.trainable) continue;
        if (p.adam_m.size() != p.value.size()) {
            p.adam_m = Tensor(p.value.shape);
            p.adam_v = Tensor(p.value.shape);
        }
        p.adam_m.data = beta1 * p.adam_m.data + (1.f - beta1) * p.grad.data;
        p.adam_v.data = beta2 * p.adam_v.data + (1.f - beta2) * p.grad.data.square();
        p.value.data -= lr * (p.adam_m.data / c1) / ((p.adam_v.data / c2).sqrt() + eps);
    }
}

}  // namespace moviekit
