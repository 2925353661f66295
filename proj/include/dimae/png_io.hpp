#pragma once

#include <filesystem>

#include "dimae/image.hpp"

namespace dimae::io {

/// 8-bit PNG (gray, gray+alpha, RGB or RGBA; alpha dropped) to values k / 255.
ImageTensor read_png(const std::filesystem::path& path);

/// Writes 1- or 3-channel images as 8-bit PNG; values are clamped and rounded.
void write_png(const std::filesystem::path& path, const ImageTensor& img);

}  // namespace dimae::io
