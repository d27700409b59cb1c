// SPDX-License-Identifier: Apache-2.0
#include "cmmix/image.hpp"

#include <algorithm>
#include <cmath>

#include "cmmix/error.hpp"

namespace cmmix {

Image resize_bilinear(const Image& src, std::size_t height, std::size_t width) {
    if (src.height == 0 || src.width == 0 || height == 0 || width == 0)
        throw InputError("resize_bilinear: empty image");
    Image out(height, width, src.channels);
    const double sy = static_cast<double>(src.height) / static_cast<double>(height);
    const double sx = static_cast<double>(src.width) / static_cast<double>(width);
    for (std::size_t y = 0; y < height; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                     static_cast<double>(src.height - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, src.height - 1);
        const float wy = static_cast<float>(fy - static_cast<double>(y0));
        for (std::size_t x = 0; x < width; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                         static_cast<double>(src.width - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, src.width - 1);
            const float wx = static_cast<float>(fx - static_cast<double>(x0));
            for (std::size_t c = 0; c < src.channels; ++c) {
                const float top = src.at(y0, x0, c) * (1.0f - wx) + src.at(y0, x1, c) * wx;
                const float bottom = src.at(y1, x0, c) * (1.0f - wx) + src.at(y1, x1, c) * wx;
                out.at(y, x, c) = top * (1.0f - wy) + bottom * wy;
            }
        }
    }
    return out;
}

Image crop(const Image& src, std::size_t y0, std::size_t x0, std::size_t height, std::size_t width) {
    if (y0 + height > src.height || x0 + width > src.width || height == 0 || width == 0)
        throw InputError("crop: window outside image");
    Image out(height, width, src.channels);
    for (std::size_t y = 0; y < height; ++y)
        std::copy_n(src.data.begin() + static_cast<long>(((y0 + y) * src.width + x0) * src.channels),
                    width * src.channels, out.data.begin() + static_cast<long>(y * width * src.channels));
    return out;
}

Image flip_horizontal(const Image& src) {
    Image out(src.height, src.width, src.channels);
    for (std::size_t y = 0; y < src.height; ++y)
        for (std::size_t x = 0; x < src.width; ++x)
            for (std::size_t c = 0; c < src.channels; ++c) out.at(y, src.width - 1 - x, c) = src.at(y, x, c);
    return out;
}

}  // namespace cmmix
