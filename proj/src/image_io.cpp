#include "moviekit/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace moviekit {

void write_png(const std::string& path, const Tensor& image) {
    if (image.shape.size() != 3 || image.shape[0] != 3)
        throw std::invalid_argument("write_png: expected {3,H,W}");
    int h = image.shape[1], w = image.shape[2];
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw std::runtime_error("cannot open for write: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("png write failed: " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                float v = std::clamp(image.at(c, y, x), 0.f, 1.f);
                row[x * 3 + c] = static_cast<png_byte>(std::lround(v * 255.f));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

Tensor read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw std::runtime_error("cannot open: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("png read failed: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    int w = static_cast<int>(png_get_image_width(png, info));
    int h = static_cast<int>(png_get_image_height(png, info));
    std::vector<png_byte> row(static_cast<size_t>(w) * 3);
    Tensor img({3, h, w});
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = row[x * 3 + c] / 255.f;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

void write_clip_raw(const std::string& path_base, const VideoClip& clip) {
    clip.validate();
    int h = clip.frames[0].shape[1], w = clip.frames[0].shape[2];
    std::ofstream bin(path_base + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write: " + path_base + ".bin");
    for (const Tensor& f : clip.frames)
        bin.write(reinterpret_cast<const char*>(f.data.data()), sizeof(float) * f.size());
    nlohmann::json j;
    j["frames"] = clip.num_frames();
    j["channels"] = 3;
    j["height"] = h;
    j["width"] = w;
    j["fps"] = clip.fps;
    std::ofstream side(path_base + ".json");
    side << j.dump(2) << "\n";
}

VideoClip read_clip_raw(const std::string& path_base) {
    std::ifstream side(path_base + ".json");
    if (!side) throw std::runtime_error("missing sidecar: " + path_base + ".json");
    nlohmann::json j = nlohmann::json::parse(side);
    int n = j.at("frames").get<int>();
    int h = j.at("height").get<int>();
    int w = j.at("width").get<int>();
    VideoClip clip;
    clip.fps = j.value("fps", 8.f);
    std::ifstream bin(path_base + ".bin", std::ios::binary);
    if (!bin) throw std::runtime_error("missing data: " + path_base + ".bin");
    for (int i = 0; i < n; ++i) {
        Tensor f({3, h, w});
        bin.read(reinterpret_cast<char*>(f.data.data()), sizeof(float) * f.size());
        if (!bin) throw std::runtime_error("truncated clip data: " + path_base + ".bin");
        clip.frames.push_back(std::move(f));
    }
    return clip;
}

void write_clip_png_dir(const std::string& dir, const VideoClip& clip) {
    clip.validate();
    fs::create_directories(dir);
    char name[32];
    for (int i = 0; i < clip.num_frames(); ++i) {
        std::snprintf(name, sizeof(name), "frame_%04d.png", i);
        write_png((fs::path(dir) / name).string(), clip.frames[i]);
    }
    nlohmann::json j;
    j["fps"] = clip.fps;
    std::ofstream side(fs::path(dir) / "clip.json");
    side << j.dump(2) << "\n";
}

VideoClip read_clip_png_dir(const std::string& dir) {
    VideoClip clip;
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".png") names.push_back(e.path().string());
    std::sort(names.begin(), names.end());
    if (names.empty()) throw std::runtime_error("no PNG frames in " + dir);
    for (const auto& n : names) clip.frames.push_back(read_png(n));
    fs::path side = fs::path(dir) / "clip.json";
    if (fs::exists(side)) {
        std::ifstream f(side);
        clip.fps = nlohmann::json::parse(f).value("fps", 8.f);
    }
    return clip;
}

VideoClip read_clip(const std::string& path) {
    if (fs::is_directory(path)) return read_clip_png_dir(path);
    return read_clip_raw(path);
}

void write_clip_like(const std::string& out_path, const std::string& input_path,
                     const VideoClip& clip) {
    if (fs::is_directory(input_path))
        write_clip_png_dir(out_path, clip);
    else
        write_clip_raw(out_path, clip);
}

}  // namespace moviekit
