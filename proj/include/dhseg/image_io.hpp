#pragma once

#include <filesystem>

#include "dhseg/image.hpp"

namespace dhseg {

/// Reads any format OpenCV understands as 3-channel RGB.
RgbImage read_rgb(const std::filesystem::path& path);
/// Writes a 1- or 3-channel (RGB) raster; the format follows the extension.
void write_rgb(const std::filesystem::path& path, const RgbImage& image);

/// Reads a mask PNG; any nonzero pixel is foreground.
BinaryMask read_mask(const std::filesystem::path& path);
/// Writes an 8-bit PNG with foreground 255.
void write_mask(const std::filesystem::path& path, const BinaryMask& mask);

}  // namespace dhseg
