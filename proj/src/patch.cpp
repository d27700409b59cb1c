// SPDX-License-Identifier: Apache-2.0
#include "cmmix/patch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cmmix/error.hpp"

namespace cmmix::patch {

void PatchGeometry::validate() const {
    if (patch == 0 || image_size == 0 || image_size % patch != 0)
        throw ConfigError("model.patch", "image size " + std::to_string(image_size) + " is not divisible by patch " +
                                             std::to_string(patch));
    if (n_clips == 0) throw ConfigError("data.n_clips", "need at least one clip");
}

TokenCoord PatchGeometry::coord(std::size_t token) const {
    const std::size_t per = tokens_per_clip();
    const std::size_t within = token % per;
    return {token / per, within / grid(), within % grid()};
}

TokenSequence patchify(std::span<const Image> frames, std::size_t patch) {
    if (frames.empty()) throw InputError("patchify: no frames");
    const Image& first = frames.front();
    if (first.height != first.width || first.channels != 3)
        throw InputError("patchify: frames must be square with 3 channels");
    PatchGeometry geo{frames.size(), first.height, patch};
    geo.validate();
    for (const Image& f : frames)
        if (!f.same_geometry(first)) throw InputError("patchify: frames differ in size");

    TokenSequence seq;
    seq.geometry = geo;
    const std::size_t dim = geo.patch_dim();
    seq.tokens.resize(geo.n_tokens() * dim);
    seq.coords.resize(geo.n_tokens());
    for (std::size_t t = 0; t < geo.n_tokens(); ++t) {
        const TokenCoord c = geo.coord(t);
        seq.coords[t] = c;
        const Image& frame = frames[c.clip];
        float* out = seq.tokens.data() + t * dim;
        for (std::size_t py = 0; py < patch; ++py) {
            const float* row = frame.data.data() + ((c.row * patch + py) * frame.width + c.col * patch) * 3;
            std::copy_n(row, patch * 3, out + py * patch * 3);
        }
    }
    return seq;
}

std::vector<Image> unpatchify(std::span<const float> tokens, const PatchGeometry& geo) {
    geo.validate();
    const std::size_t dim = geo.patch_dim();
    if (tokens.size() != geo.n_tokens() * dim)
        throw DimensionError("unpatchify: expected " + std::to_string(geo.n_tokens() * dim) + " values, got " +
                             std::to_string(tokens.size()));
    std::vector<Image> frames(geo.n_clips, Image(geo.image_size, geo.image_size, 3));
    for (std::size_t t = 0; t < geo.n_tokens(); ++t) {
        const TokenCoord c = geo.coord(t);
        Image& frame = frames[c.clip];
        const float* in = tokens.data() + t * dim;
        for (std::size_t py = 0; py < geo.patch; ++py) {
            float* row = frame.data.data() + ((c.row * geo.patch + py) * frame.width + c.col * geo.patch) * 3;
            std::copy_n(in + py * geo.patch * 3, geo.patch * 3, row);
        }
    }
    return frames;
}

std::vector<Image> unpatchify(const TokenSequence& seq) { return unpatchify(seq.tokens, seq.geometry); }

namespace {

void require_divisible(std::size_t dim, std::size_t by, const char* what) {
    if (dim == 0 || dim % by != 0)
        throw ConfigError("model", std::string(what) + ": embedding width " + std::to_string(dim) +
                                       " must be a positive multiple of " + std::to_string(by));
}

}  // namespace

std::vector<double> posembed_2d(std::size_t grid_h, std::size_t grid_w, std::size_t dim) {
    require_divisible(dim, 4, "posembed_2d");
    const std::size_t quarter = dim / 4;
    std::vector<double> omega(quarter);
    for (std::size_t i = 0; i < quarter; ++i)
        omega[i] = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(quarter));

    std::vector<double> table(grid_h * grid_w * dim);
    for (std::size_t r = 0; r < grid_h; ++r) {
        for (std::size_t c = 0; c < grid_w; ++c) {
            double* row = table.data() + (r * grid_w + c) * dim;
            for (std::size_t i = 0; i < quarter; ++i) {
                row[i] = std::sin(static_cast<double>(r) * omega[i]);
                row[quarter + i] = std::cos(static_cast<double>(r) * omega[i]);
                row[2 * quarter + i] = std::sin(static_cast<double>(c) * omega[i]);
                row[3 * quarter + i] = std::cos(static_cast<double>(c) * omega[i]);
            }
        }
    }
    return table;
}

std::vector<double> posembed_clip(std::size_t n_clips, std::size_t dim) {
    require_divisible(dim, 2, "posembed_clip");
    const std::size_t half = dim / 2;
    std::vector<double> table(n_clips * dim);
    for (std::size_t k = 0; k < n_clips; ++k) {
        for (std::size_t i = 0; i < half; ++i) {
            const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(half));
            table[k * dim + i] = std::sin(static_cast<double>(k) * omega);
            table[k * dim + half + i] = std::cos(static_cast<double>(k) * omega) - 1.0;
        }
    }
    return table;
}

std::vector<double> posembed_sincos(const PatchGeometry& geo, std::size_t dim) {
    geo.validate();
    const auto spatial = posembed_2d(geo.grid(), geo.grid(), dim);
    const auto temporal = posembed_clip(geo.n_clips, dim);
    std::vector<double> table(geo.n_tokens() * dim);
    for (std::size_t t = 0; t < geo.n_tokens(); ++t) {
        const TokenCoord c = geo.coord(t);
        const double* s = spatial.data() + (c.row * geo.grid() + c.col) * dim;
        const double* k = temporal.data() + c.clip * dim;
        for (std::size_t j = 0; j < dim; ++j) table[t * dim + j] = s[j] + k[j];
    }
    return table;
}

std::size_t masked_count(std::size_t n_tokens, double ratio) {
    if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("train.mask_ratio", "mask ratio must lie in [0, 1)");
    return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n_tokens) + 0.5));
}

MaskPlan random_mask(Rng& rng, std::size_t n_tokens, double ratio) {
    const std::size_t n_masked = masked_count(n_tokens, ratio);
    MaskPlan plan;
    plan.permutation.resize(n_tokens);
    std::iota(plan.permutation.begin(), plan.permutation.end(), std::size_t{0});
    std::shuffle(plan.permutation.begin(), plan.permutation.end(), rng);
    plan.n_visible = n_tokens - n_masked;
    plan.visible.assign(plan.permutation.begin(), plan.permutation.begin() + static_cast<long>(plan.n_visible));
    plan.masked.assign(plan.permutation.begin() + static_cast<long>(plan.n_visible), plan.permutation.end());
    return plan;
}

DecoderLayout decoder_layout(const MaskPlan& plan, double keep_masked_fraction, Rng* rng) {
    const std::size_t n = plan.n_tokens();
    std::vector<long> source(n, -1);
    for (std::size_t i = 0; i < plan.visible.size(); ++i) source[plan.visible[i]] = static_cast<long>(i);

    std::vector<char> keep(n, 1);
    if (keep_masked_fraction < 1.0 && !plan.masked.empty()) {
        if (!rng) throw ContractError("decoder_layout: subsampling masked tokens needs an rng");
        if (!(keep_masked_fraction > 0.0))
            throw ConfigError("train.keep_masked_fraction", "fraction must lie in (0, 1]");
        std::vector<std::size_t> masked = plan.masked;
        std::shuffle(masked.begin(), masked.end(), *rng);
        const auto n_keep = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::llround(keep_masked_fraction * static_cast<double>(masked.size()))));
        for (std::size_t i = n_keep; i < masked.size(); ++i) keep[masked[i]] = 0;
    }

    DecoderLayout layout;
    for (std::size_t t = 0; t < n; ++t) {
        if (!keep[t]) continue;
        layout.positions.push_back(t);
        layout.source.push_back(source[t]);
    }
    return layout;
}

template <typename T>
tensor::Tensor<T> assemble_decoder_input(const tensor::Tensor<T>& encoded_visible, const tensor::Tensor<T>& mask_token,
                                         const MaskPlan& plan, const DecoderLayout& layout,
                                         const tensor::Tensor<T>& pos) {
    if (encoded_visible.rank() != 2 || encoded_visible.dim(0) != plan.n_visible)
        throw ContractError("assemble_decoder_input: expected " + std::to_string(plan.n_visible) +
                            " encoded visible tokens, got shape " + tensor::shape_str(encoded_visible.shape()));
    auto full = tensor::interleave_rows(encoded_visible, mask_token, std::span<const long>(layout.source));
    if (!pos.defined()) return full;
    return tensor::add(full, tensor::gather_rows(pos, std::span<const std::size_t>(layout.positions)));
}

template tensor::Tensor<float> assemble_decoder_input(const tensor::Tensor<float>&, const tensor::Tensor<float>&,
                                                      const MaskPlan&, const DecoderLayout&,
                                                      const tensor::Tensor<float>&);
template tensor::Tensor<double> assemble_decoder_input(const tensor::Tensor<double>&, const tensor::Tensor<double>&,
                                                       const MaskPlan&, const DecoderLayout&,
                                                       const tensor::Tensor<double>&);

}  // namespace cmmix::patch
