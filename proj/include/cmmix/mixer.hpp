// SPDX-License-Identifier: Apache-2.0
//
// Coefficient matrices and the cross-modal fusion I = M*V + (1-M)*A.
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "cmmix/image.hpp"
#include "cmmix/random.hpp"
#include "cmmix/signal.hpp"

namespace cmmix::mixer {

/// H x W blending weights in [0,1]; weight 1 selects the video pixel.
struct CoefficientMatrix {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> data;

    float at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
};

enum class MixerKind { CutMix, PixelMixup, Mixup };

std::string to_string(MixerKind kind);
MixerKind mixer_kind_from_string(const std::string& name);

struct MixerConfig {
    MixerKind kind = MixerKind::CutMix;
    std::size_t s = 4;   // CutMix box count
    double p = 0.5;      // Pixel Mixup selection probability
    double alpha = 1.0;  // Mixup Beta(alpha, alpha)
};

/// Axis-aligned box: columns [x, x+w), rows [y, y+h).
struct Box {
    std::size_t x = 0, y = 0, w = 0, h = 0;
    std::size_t area() const { return w * h; }
};

bool boxes_overlap(const Box& a, const Box& b);
CoefficientMatrix mask_from_boxes(std::size_t height, std::size_t width, const std::vector<Box>& boxes);

struct CutMixDraw {
    CoefficientMatrix mask;
    std::vector<Box> boxes;  // fewer than requested when the retry cap was hit
};

inline constexpr int kCutMixRetries = 100;
inline constexpr double kCutMixMinSide = 0.1;
inline constexpr double kCutMixMaxSide = 0.5;

/// Up to `s` disjoint boxes, each side uniform in [0.1, 0.5] of the image
/// side, placed by rejection sampling with 100 retries per box.
CutMixDraw make_cutmix_mask(Rng& rng, std::size_t height, std::size_t width, std::size_t s);
/// Independent Bernoulli(p) per pixel, row-major.
CoefficientMatrix make_pixel_mixup_mask(Rng& rng, std::size_t height, std::size_t width, double p);
/// Constant lambda ~ Beta(alpha, alpha), drawn as G1 / (G1 + G2) with Gi ~ Gamma(alpha, 1).
CoefficientMatrix make_mixup_mask(Rng& rng, std::size_t height, std::size_t width, double alpha);

struct MaskDraw {
    CoefficientMatrix mask;
    std::vector<Box> boxes;
};

/// Validates the config and dispatches on its kind.
MaskDraw make_mask(Rng& rng, std::size_t height, std::size_t width, const MixerConfig& config);

/// Elementwise M*video + (1-M)*audio; M is shared by the three channels.
Image fuse(const Image& video, const signal::MelImage& audio, const CoefficientMatrix& mask);

struct MixProvenance {
    std::uint64_t video_id = 0;
    std::size_t clip_index = 0;
    MixerKind kind = MixerKind::CutMix;
    std::uint64_t seed = 0;
    std::vector<Box> boxes;
};

struct MixedImage {
    Image image;
    MixProvenance provenance;
};

/// Draws a fresh mask from (seed, video id, clip) and fuses one clip pair.
MixedImage mix_clip(const Image& video, const signal::MelImage& audio, const MixerConfig& config,
                    std::uint64_t seed, std::uint64_t video_id, std::size_t clip_index);

}  // namespace cmmix::mixer
