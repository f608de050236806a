#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lucid/tensor.hpp"

namespace lucid {

// 8-bit RGB (row-major, 3 bytes per pixel) to an in-memory PNG file.
std::vector<std::uint8_t> encode_png(std::span<const std::uint8_t> rgb, int width, int height);

// Original image with the feature map laid over it as a red mask whose alpha
// is map / scale (clamped to [0,1]); the map is resized to the image by
// nearest neighbour. Colour images get the raw image on the left and the
// masked intensity image on the right. Pixels are repeated `zoom` times.
std::vector<std::uint8_t> render_overlay(std::span<const float> image_hwc, int height, int width, int channels,
                                         const Tensor& map, float scale, int zoom = 4);

}  // namespace lucid
