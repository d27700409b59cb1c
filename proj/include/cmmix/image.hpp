// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

namespace cmmix {

/// Interleaved H x W x C float image (row-major, channel fastest).
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 3;
    std::vector<float> data;

    Image() = default;
    Image(std::size_t h, std::size_t w, std::size_t c = 3, float fill = 0.0f)
        : height(h), width(w), channels(c), data(h * w * c, fill) {}

    float& at(std::size_t y, std::size_t x, std::size_t c) { return data[(y * width + x) * channels + c]; }
    float at(std::size_t y, std::size_t x, std::size_t c) const { return data[(y * width + x) * channels + c]; }

    bool same_geometry(const Image& other) const {
        return height == other.height && width == other.width && channels == other.channels;
    }
    friend bool operator==(const Image&, const Image&) = default;
};

/// Bilinear resampling with half-pixel centers (edge pixels clamped).
Image resize_bilinear(const Image& src, std::size_t height, std::size_t width);
Image crop(const Image& src, std::size_t y0, std::size_t x0, std::size_t height, std::size_t width);
Image flip_horizontal(const Image& src);

}  // namespace cmmix
