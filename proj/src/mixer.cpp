// SPDX-License-Identifier: Apache-2.0
#include "cmmix/mixer.hpp"

#include <algorithm>
#include <cmath>

#include "cmmix/error.hpp"

namespace cmmix::mixer {

std::string to_string(MixerKind kind) {
    switch (kind) {
        case MixerKind::CutMix: return "cutmix";
        case MixerKind::PixelMixup: return "pixel_mixup";
        case MixerKind::Mixup: return "mixup";
    }
    return "unknown";
}

MixerKind mixer_kind_from_string(const std::string& name) {
    if (name == "cutmix") return MixerKind::CutMix;
    if (name == "pixel_mixup") return MixerKind::PixelMixup;
    if (name == "mixup") return MixerKind::Mixup;
    throw ConfigError("mixer.kind", "unknown mixer '" + name + "' (expected cutmix, pixel_mixup or mixup)");
}

bool boxes_overlap(const Box& a, const Box& b) {
    return a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h;
}

CoefficientMatrix mask_from_boxes(std::size_t height, std::size_t width, const std::vector<Box>& boxes) {
    CoefficientMatrix m{height, width, std::vector<float>(height * width, 0.0f)};
    for (const Box& b : boxes) {
        if (b.x + b.w > width || b.y + b.h > height) throw InputError("mask_from_boxes: box outside image");
        for (std::size_t y = b.y; y < b.y + b.h; ++y)
            std::fill_n(m.data.begin() + static_cast<long>(y * width + b.x), b.w, 1.0f);
    }
    return m;
}

CutMixDraw make_cutmix_mask(Rng& rng, std::size_t height, std::size_t width, std::size_t s) {
    std::uniform_real_distribution<double> side(kCutMixMinSide, kCutMixMaxSide);
    auto extent = [&](std::size_t full) {
        const auto v = static_cast<std::size_t>(std::llround(side(rng) * static_cast<double>(full)));
        return std::clamp<std::size_t>(v, 1, full);
    };

    std::vector<Box> boxes;
    for (std::size_t i = 0; i < s; ++i) {
        for (int attempt = 0; attempt < kCutMixRetries; ++attempt) {
            Box b;
            b.w = extent(width);
            b.h = extent(height);
            b.x = std::uniform_int_distribution<std::size_t>(0, width - b.w)(rng);
            b.y = std::uniform_int_distribution<std::size_t>(0, height - b.h)(rng);
            const bool clear = std::none_of(boxes.begin(), boxes.end(), [&](const Box& o) { return boxes_overlap(b, o); });
            if (clear) {
                boxes.push_back(b);
                break;
            }
        }
    }
    return {mask_from_boxes(height, width, boxes), std::move(boxes)};
}

CoefficientMatrix make_pixel_mixup_mask(Rng& rng, std::size_t height, std::size_t width, double p) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("mixer.p", "selection probability must lie in [0, 1]");
    std::bernoulli_distribution pick(p);
    CoefficientMatrix m{height, width, std::vector<float>(height * width)};
    for (float& v : m.data) v = pick(rng) ? 1.0f : 0.0f;
    return m;
}

CoefficientMatrix make_mixup_mask(Rng& rng, std::size_t height, std::size_t width, double alpha) {
    if (!(alpha > 0.0)) throw ConfigError("mixer.alpha", "Beta parameter must be positive");
    std::gamma_distribution<double> gamma(alpha, 1.0);
    const double x = gamma(rng);
    const double y = gamma(rng);
    const double lambda = (x + y) > 0.0 ? x / (x + y) : 0.5;
    return {height, width, std::vector<float>(height * width, static_cast<float>(lambda))};
}

MaskDraw make_mask(Rng& rng, std::size_t height, std::size_t width, const MixerConfig& config) {
    switch (config.kind) {
        case MixerKind::CutMix: {
            auto draw = make_cutmix_mask(rng, height, width, config.s);
            return {std::move(draw.mask), std::move(draw.boxes)};
        }
        case MixerKind::PixelMixup: return {make_pixel_mixup_mask(rng, height, width, config.p), {}};
        case MixerKind::Mixup: return {make_mixup_mask(rng, height, width, config.alpha), {}};
    }
    throw ConfigError("mixer.kind", "unhandled mixer kind");
}

Image fuse(const Image& video, const signal::MelImage& audio, const CoefficientMatrix& mask) {
    const Image& a = audio.image;
    if (!video.same_geometry(a) || mask.height != video.height || mask.width != video.width)
        throw InputError("fuse: video " + std::to_string(video.height) + "x" + std::to_string(video.width) +
                         ", audio " + std::to_string(a.height) + "x" + std::to_string(a.width) + ", mask " +
                         std::to_string(mask.height) + "x" + std::to_string(mask.width) + " disagree");
    Image out(video.height, video.width, video.channels);
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
        const float m = mask.data[i];
        for (std::size_t c = 0; c < video.channels; ++c) {
            const std::size_t at = i * video.channels + c;
            out.data[at] = m * video.data[at] + (1.0f - m) * a.data[at];
        }
    }
    return out;
}

MixedImage mix_clip(const Image& video, const signal::MelImage& audio, const MixerConfig& config,
                    std::uint64_t seed, std::uint64_t video_id, std::size_t clip_index) {
    const std::uint64_t clip_seed = derive_seed(derive_seed(seed, video_id), clip_index);
    Rng rng(clip_seed);
    auto draw = make_mask(rng, video.height, video.width, config);
    MixedImage mixed;
    mixed.image = fuse(video, audio, draw.mask);
    mixed.provenance = {video_id, clip_index, config.kind, clip_seed, std::move(draw.boxes)};
    return mixed;
}

}  // namespace cmmix::mixer
