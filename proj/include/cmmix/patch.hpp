// SPDX-License-Identifier: Apache-2.0
//
// Patch tokens, fixed sin-cos positions, random masking plans and decoder
// input assembly.
//
// Token order is clip-major, then row-major patches within a frame; each
// token flattens its P x P x 3 block as (row, col, channel).
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cmmix/image.hpp"
#include "cmmix/random.hpp"
#include "cmmix/tensor.hpp"

namespace cmmix::patch {

struct TokenCoord {
    std::size_t clip = 0, row = 0, col = 0;
    friend bool operator==(const TokenCoord&, const TokenCoord&) = default;
};

struct PatchGeometry {
    std::size_t n_clips = 1;
    std::size_t image_size = 224;
    std::size_t patch = 16;

    /// Throws ConfigError unless image_size is a positive multiple of patch.
    void validate() const;
    std::size_t grid() const { return image_size / patch; }
    std::size_t tokens_per_clip() const { return grid() * grid(); }
    std::size_t n_tokens() const { return n_clips * tokens_per_clip(); }
    std::size_t patch_dim() const { return 3 * patch * patch; }
    TokenCoord coord(std::size_t token) const;
};

struct TokenSequence {
    PatchGeometry geometry;
    std::vector<float> tokens;  // n_tokens x patch_dim, row-major
    std::vector<TokenCoord> coords;

    std::size_t n_tokens() const { return coords.size(); }
    std::size_t dim() const { return geometry.patch_dim(); }
};

/// Frames must be square, 3-channel, equal-sized and divisible by `patch`.
TokenSequence patchify(std::span<const Image> frames, std::size_t patch);
std::vector<Image> unpatchify(const TokenSequence& seq);
/// Inverse of patchify for a bare token matrix of the given geometry.
std::vector<Image> unpatchify(std::span<const float> tokens, const PatchGeometry& geometry);

/// Fixed 2D table, (grid_h * grid_w) x dim. Columns [0, dim/2) encode the row
/// index and [dim/2, dim) the column index, each as dim/4 sines followed by
/// dim/4 cosines at frequencies 10000^(-i / (dim/4)).
std::vector<double> posembed_2d(std::size_t grid_h, std::size_t grid_w, std::size_t dim);
/// 1D clip-index table, n_clips x dim: dim/2 sines then dim/2 (cosines - 1),
/// so clip 0 contributes nothing.
std::vector<double> posembed_clip(std::size_t n_clips, std::size_t dim);
/// Token-ordered table for a whole clip stack: spatial 2D plus clip term.
std::vector<double> posembed_sincos(const PatchGeometry& geometry, std::size_t dim);

struct MaskPlan {
    std::vector<std::size_t> permutation;
    std::size_t n_visible = 0;
    std::vector<std::size_t> visible;  // first n_visible entries of the permutation
    std::vector<std::size_t> masked;   // the rest

    std::size_t n_tokens() const { return permutation.size(); }
};

/// round(ratio * n) with halves rounded up, so ties go to masking.
std::size_t masked_count(std::size_t n_tokens, double ratio);
MaskPlan random_mask(Rng& rng, std::size_t n_tokens, double ratio);

/// Which tokens enter the decoder, in original order. source[i] indexes the
/// encoded visible rows, or is -1 where a mask token goes.
struct DecoderLayout {
    std::vector<std::size_t> positions;
    std::vector<long> source;
};

/// All tokens when keep_masked_fraction == 1; otherwise a random subset of
/// the masked tokens (at least one when any are masked) plus every visible one.
DecoderLayout decoder_layout(const MaskPlan& plan, double keep_masked_fraction = 1.0, Rng* rng = nullptr);

/// Scatters encoded visible rows (ordered as plan.visible) and copies of the
/// mask token back into original token order, then adds `pos` rows for the
/// included positions when `pos` is defined.
template <typename T>
tensor::Tensor<T> assemble_decoder_input(const tensor::Tensor<T>& encoded_visible, const tensor::Tensor<T>& mask_token,
                                         const MaskPlan& plan, const DecoderLayout& layout,
                                         const tensor::Tensor<T>& pos = {});

}  // namespace cmmix::patch
