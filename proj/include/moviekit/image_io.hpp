#pragma once

#include <string>

#include "moviekit/tensor.hpp"
#include "moviekit/videoedit.hpp"

namespace moviekit {

void write_png(const std::string& path, const Tensor& image);  // {3,H,W} in [0,1]
Tensor read_png(const std::string& path);

// Raw clip: <path>.bin float32 little-endian frames*3*H*W plus a <path>.json
// sidecar carrying dims and fps.
void write_clip_raw(const std::string& path_base, const VideoClip& clip);
VideoClip read_clip_raw(const std::string& path_base);

// Directory of numbered PNG frames plus clip.json (fps).
void write_clip_png_dir(const std::string& dir, const VideoClip& clip);
VideoClip read_clip_png_dir(const std::string& dir);

// Auto-detects layout: a directory reads as PNG frames, otherwise raw.
VideoClip read_clip(const std::string& path);
void write_clip_like(const std::string& out_path, const std::string& input_path,
                     const VideoClip& clip);

}  // namespace moviekit
