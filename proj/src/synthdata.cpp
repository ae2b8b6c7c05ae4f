#include "moviekit/synthdata.hpp"

#include <algorithm>
#include <cmath>

namespace moviekit {

const InstructionVocab::Entry& InstructionVocab::by_id(int id) const {
    for (const auto& e : entries)
        if (e.id == id) return e;
    throw std::invalid_argument("unknown instruction id " + std::to_string(id));
}

const InstructionVocab& default_vocab() {
    static const InstructionVocab vocab{{
        {0, "null"},
        {1, "recolor-red"},
        {2, "recolor-blue"},
        {3, "invert"},
        {4, "add-border"},
        {5, "brighten"},
        {6, "darken"},
        {7, "swap-channels"},
        {8, "blur"},
    }};
    return vocab;
}

namespace {

constexpr float kBrightenStrength = 0.25f;
constexpr int kBorderWidth = 2;

Tensor box_blur3(const Tensor& img) {
    int h = img.shape[1], w = img.shape[2];
    Tensor out(img.shape);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                float acc = 0.f;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int yy = std::clamp(y + dy, 0, h - 1);
                        int xx = std::clamp(x + dx, 0, w - 1);
                        acc += img.at(c, yy, xx);
                    }
                out.at(c, y, x) = acc / 9.f;
            }
        }
    }
    return out;
}

}  // namespace

Tensor apply_instruction(const Tensor& image, int instruction_id) {
    if (image.shape.size() != 3 || image.shape[0] != 3)
        throw std::invalid_argument("apply_instruction: expected {3,H,W} image");
    default_vocab().by_id(instruction_id);
    int h = image.shape[1], w = image.shape[2];
    int64_t hw = static_cast<int64_t>(h) * w;
    Tensor out = image;
    auto R = [&](Tensor& t) { return t.data.segment(0 * hw, hw); };
    auto G = [&](Tensor& t) { return t.data.segment(1 * hw, hw); };
    auto B = [&](Tensor& t) { return t.data.segment(2 * hw, hw); };
    Tensor src = image;
    switch (instruction_id) {
        case 0:
            return out;  // null edit
        case 1:  // recolor-red
            R(out) = 1.f - (1.f - R(src)) * 0.25f;
            G(out) = G(src) * 0.3f;
            B(out) = B(src) * 0.3f;
            return out;
        case 2:  // recolor-blue
            B(out) = 1.f - (1.f - B(src)) * 0.25f;
            R(out) = R(src) * 0.3f;
            G(out) = G(src) * 0.3f;
            return out;
        case 3:  // invert
            out.data = 1.f - src.data;
            return out;
        case 4: {  // add-border
            const float color[3] = {0.95f, 0.9f, 0.2f};
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x)
                        if (y < kBorderWidth || x < kBorderWidth || y >= h - kBorderWidth ||
                            x >= w - kBorderWidth)
                            out.at(c, y, x) = color[c];
            return out;
        }
        case 5:  // brighten
            out.data = (src.data + kBrightenStrength).min(1.f);
            return out;
        case 6:  // darken
            out.data = (src.data - kBrightenStrength).max(0.f);
            return out;
        case 7:  // swap-channels
            R(out) = G(src);
            G(out) = B(src);
            B(out) = R(src);
            return out;
        case 8:
            return box_blur3(src);
    }
    throw std::invalid_argument("apply_instruction: unhandled id");
}

// ----------------------------------------------------------- scene rendering

namespace {

struct Shape {
    int kind = 0;  // 0 rect, 1 circle
    float cx = 0, cy = 0;
    float half_w = 0, half_h = 0;  // radius in half_w for circles
    float color[3] = {0, 0, 0};
    float vx = 0, vy = 0;
};

struct Scene {
    float bg[3] = {0, 0, 0};
    std::vector<Shape> shapes;
};

Scene random_scene(Rng& rng, int size) {
    Scene s;
    for (float& c : s.bg) c = static_cast<float>(rng.uniform(0.05, 0.35));
    int n = 2 + rng.uniform_int(3);  // 2..4 shapes
    for (int i = 0; i < n; ++i) {
        Shape sh;
        sh.kind = rng.uniform_int(2);
        sh.cx = static_cast<float>(rng.uniform(0.15, 0.85)) * size;
        sh.cy = static_cast<float>(rng.uniform(0.15, 0.85)) * size;
        sh.half_w = static_cast<float>(rng.uniform(0.08, 0.22)) * size;
        sh.half_h = sh.kind == 1 ? sh.half_w : static_cast<float>(rng.uniform(0.08, 0.22)) * size;
        for (float& c : sh.color) c = static_cast<float>(rng.uniform(0.2, 1.0));
        sh.vx = static_cast<float>(rng.uniform(-1.5, 1.5));
        sh.vy = static_cast<float>(rng.uniform(-1.5, 1.5));
        s.shapes.push_back(sh);
    }
    return s;
}

Tensor render(const Scene& s, int size) {
    Tensor img({3, size, size});
    for (int c = 0; c < 3; ++c)
        img.data.segment(static_cast<int64_t>(c) * size * size, static_cast<int64_t>(size) * size)
            .setConstant(s.bg[c]);
    for (const Shape& sh : s.shapes) {
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                float dx = x + 0.5f - sh.cx;
                float dy = y + 0.5f - sh.cy;
                bool inside = sh.kind == 0
                                  ? (std::abs(dx) <= sh.half_w && std::abs(dy) <= sh.half_h)
                                  : (dx * dx + dy * dy <= sh.half_w * sh.half_w);
                if (inside)
                    for (int c = 0; c < 3; ++c) img.at(c, y, x) = sh.color[c];
            }
        }
    }
    return img;
}

void advance(Scene& s, int size) {
    for (Shape& sh : s.shapes) {
        sh.cx += sh.vx;
        sh.cy += sh.vy;
        if (sh.cx < 0.1f * size || sh.cx > 0.9f * size) sh.vx = -sh.vx;
        if (sh.cy < 0.1f * size || sh.cy > 0.9f * size) sh.vy = -sh.vy;
    }
}

}  // namespace

EditTriplet gen_triplet(Rng& rng, int instruction_id, int size) {
    if (instruction_id < 0) instruction_id = 1 + rng.uniform_int(default_vocab().size() - 1);
    default_vocab().by_id(instruction_id);
    EditTriplet t;
    t.instruction_id = instruction_id;
    t.source = render(random_scene(rng, size), size);
    t.edited = apply_instruction(t.source, instruction_id);
    return t;
}

std::pair<VideoClip, VideoClip> gen_video(Rng& rng, int n_frames, int instruction_id, int size) {
    if (n_frames <= 0) throw std::invalid_argument("gen_video: n_frames must be >= 1");
    if (instruction_id < 0) instruction_id = 1 + rng.uniform_int(default_vocab().size() - 1);
    default_vocab().by_id(instruction_id);
    Scene scene = random_scene(rng, size);
    VideoClip source, edited;
    for (int f = 0; f < n_frames; ++f) {
        Tensor frame = render(scene, size);
        source.frames.push_back(frame);
        edited.frames.push_back(apply_instruction(frame, instruction_id));
        advance(scene, size);
    }
    return {std::move(source), std::move(edited)};
}

Tensor encode_instruction(int instruction_id) {
    default_vocab().by_id(instruction_id);
    static const Tensor table = [] {
        Rng rng(0x7ab1e5eedULL);
        return rng.normal_tensor({default_vocab().size() * kTokenSeqLen, kTokenDim}, 0.f, 0.5f);
    }();
    Tensor out({kTokenSeqLen, kTokenDim});
    int64_t row = static_cast<int64_t>(instruction_id) * kTokenSeqLen * kTokenDim;
    out.data = table.data.segment(row, kTokenSeqLen * kTokenDim);
    return out;
}

}  // namespace moviekit
