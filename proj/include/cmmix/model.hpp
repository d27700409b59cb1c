// SPDX-License-Identifier: Apache-2.0
//
// ViT-style masked autoencoder over mixed clip stacks.
//
// The encoder sees only visible tokens. A decoder trunk re-embeds them,
// restores mask tokens at masked positions and predicts raw patch pixels for
// both modalities. Solo uses one trunk with two output heads; Duet runs two
// disjoint trunks (video, audio), each with its own mask token and head.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cmmix/optim.hpp"
#include "cmmix/patch.hpp"
#include "cmmix/random.hpp"
#include "cmmix/tensor.hpp"

namespace cmmix::model {

enum class DecoderKind { Solo, Duet };

std::string to_string(DecoderKind kind);
DecoderKind decoder_kind_from_string(const std::string& name);

struct ViTConfig {
    std::size_t enc_depth = 12;
    std::size_t enc_dim = 768;
    std::size_t heads = 12;
    std::size_t mlp_ratio = 4;
    std::size_t patch = 16;
    std::size_t image_size = 224;
    std::size_t n_clips = 8;
    DecoderKind dec_kind = DecoderKind::Solo;
    std::size_t dec_depth = 4;
    std::size_t dec_dim = 512;
    std::size_t dec_heads = 16;
    /// Solo only: one head emitting both modalities side by side instead of two heads.
    bool solo_split_head = false;

    static ViTConfig vit_base();
    static ViTConfig toy();

    /// Throws ConfigError naming the first inconsistent field.
    void validate() const;
    patch::PatchGeometry geometry() const { return {n_clips, image_size, patch}; }
};

template <typename T>
struct Linear {
    tensor::Tensor<T> weight;  // in x out
    tensor::Tensor<T> bias;    // out

    tensor::Tensor<T> operator()(const tensor::Tensor<T>& x) const;
};

template <typename T>
struct LayerNorm {
    tensor::Tensor<T> gamma;
    tensor::Tensor<T> beta;

    tensor::Tensor<T> operator()(const tensor::Tensor<T>& x) const;
};

/// Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)).
template <typename T>
struct Block {
    std::size_t heads = 1;
    LayerNorm<T> norm1;
    Linear<T> qkv;
    Linear<T> proj;
    LayerNorm<T> norm2;
    Linear<T> fc1;
    Linear<T> fc2;

    /// Rows form consecutive independent sequences of `seq_len` tokens (0 = one sequence).
    tensor::Tensor<T> attention(const tensor::Tensor<T>& x, std::size_t seq_len = 0) const;
    tensor::Tensor<T> operator()(const tensor::Tensor<T>& x, std::size_t seq_len = 0) const;
};

template <typename T>
struct Encoder {
    Linear<T> patch_embed;
    std::vector<Block<T>> blocks;
    LayerNorm<T> norm;
    tensor::Tensor<T> pos;  // fixed, n_tokens x enc_dim

    /// Linear patch projection plus positional rows for `positions`.
    tensor::Tensor<T> embed(const tensor::Tensor<T>& patches, std::span<const std::size_t> positions) const;
    /// Blocks and final norm over already-embedded tokens. A stack of several
    /// sequences attends within each run of `seq_len` rows.
    tensor::Tensor<T> encode(const tensor::Tensor<T>& embedded, std::size_t seq_len = 0) const;
    tensor::Tensor<T> operator()(const tensor::Tensor<T>& patches, std::span<const std::size_t> positions) const {
        return encode(embed(patches, positions));
    }

    void collect(optim::ParamList<T>& out, const std::string& prefix) const;
    Encoder clone() const;
};

template <typename T>
struct DecoderTrunk {
    Linear<T> embed;
    tensor::Tensor<T> mask_token;  // 1 x dec_dim
    std::vector<Block<T>> blocks;
    LayerNorm<T> norm;
    tensor::Tensor<T> pos;  // fixed, n_tokens x dec_dim

    /// I^f: re-embedded visible tokens and mask tokens in original order, plus positions.
    tensor::Tensor<T> assemble(const tensor::Tensor<T>& latent_visible, const patch::MaskPlan& plan,
                               const patch::DecoderLayout& layout) const;
    tensor::Tensor<T> operator()(const tensor::Tensor<T>& assembled) const;

    void collect(optim::ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct Reconstruction {
    tensor::Tensor<T> video;  // rows follow layout.positions, 3P^2 columns
    tensor::Tensor<T> audio;
};

/// Weights, mask tokens and heads of the pre-training autoencoder.
template <typename T>
class Model {
public:
    Model() = default;
    Model(const ViTConfig& config, std::uint64_t seed);

    const ViTConfig& config() const { return config_; }
    Encoder<T>& encoder() { return encoder_; }
    const Encoder<T>& encoder() const { return encoder_; }
    std::vector<DecoderTrunk<T>>& trunks() { return trunks_; }
    const std::vector<DecoderTrunk<T>>& trunks() const { return trunks_; }
    std::vector<Linear<T>>& heads() { return heads_; }
    const std::vector<Linear<T>>& heads() const { return heads_; }

    /// Solo: shared trunk output -> (video head, audio head).
    std::pair<tensor::Tensor<T>, tensor::Tensor<T>> decode_solo(const tensor::Tensor<T>& assembled) const;
    /// Duet: R^v = D^v(I^v), R^a = D^a(I^a) on disjoint trunks.
    std::pair<tensor::Tensor<T>, tensor::Tensor<T>> decode_duet(const tensor::Tensor<T>& assembled_video,
                                                                const tensor::Tensor<T>& assembled_audio) const;

    /// Mixed patches (n_tokens x 3P^2) -> encoded visible latents -> both reconstructions.
    Reconstruction<T> forward(const tensor::Tensor<T>& mixed_patches, const patch::MaskPlan& plan,
                              const patch::DecoderLayout& layout) const;

    /// Deterministic parameter order; names are stable checkpoint keys.
    optim::ParamList<T> params() const;

private:
    ViTConfig config_;
    Encoder<T> encoder_;
    std::vector<DecoderTrunk<T>> trunks_;
    std::vector<Linear<T>> heads_;
};

template <typename T>
Encoder<T> make_encoder(const ViTConfig& config, Rng& rng);

template <typename T>
std::size_t count_params(const optim::ParamList<T>& params);

/// Closed-form parameter counts for a configuration (fixed positional tables excluded).
struct ParamBreakdown {
    std::size_t encoder = 0;
    std::size_t decoder = 0;  // trunks, mask tokens and heads
    std::size_t total() const { return encoder + decoder; }
};
ParamBreakdown count_params(const ViTConfig& config);

struct FlopBreakdown {
    double encoder = 0;
    double decoder = 0;
    double total() const { return encoder + decoder; }
};
/// FLOPs (2 per multiply-accumulate) of one pre-training forward pass on one
/// sample. Norms, softmax and activations are not counted.
FlopBreakdown estimate_flops(const ViTConfig& config, double mask_ratio);

/// FLOPs of a dense layer applied to n tokens.
inline double linear_flops(std::size_t n, std::size_t d_in, std::size_t d_out) {
    return 2.0 * static_cast<double>(n) * static_cast<double>(d_in) * static_cast<double>(d_out);
}

}  // namespace cmmix::model
