// SPDX-License-Identifier: Apache-2.0
#include "cmmix/model.hpp"

#include <cmath>

#include "cmmix/error.hpp"

namespace cmmix::model {

using tensor::Shape;
using tensor::Tensor;

std::string to_string(DecoderKind kind) { return kind == DecoderKind::Solo ? "solo" : "duet"; }

DecoderKind decoder_kind_from_string(const std::string& name) {
    if (name == "solo") return DecoderKind::Solo;
    if (name == "duet") return DecoderKind::Duet;
    throw ConfigError("model.dec_kind", "unknown decoder kind '" + name + "' (expected solo or duet)");
}

ViTConfig ViTConfig::vit_base() { return ViTConfig{}; }

ViTConfig ViTConfig::toy() {
    ViTConfig c;
    c.enc_depth = 2;
    c.enc_dim = 64;
    c.heads = 4;
    c.patch = 8;
    c.image_size = 32;
    c.n_clips = 2;
    c.dec_depth = 1;
    c.dec_dim = 64;
    c.dec_heads = 4;
    return c;
}

void ViTConfig::validate() const {
    if (enc_depth == 0) throw ConfigError("model.enc_depth", "must be positive");
    if (heads == 0 || enc_dim % heads != 0) throw ConfigError("model.heads", "enc_dim must be divisible by heads");
    if (enc_dim % 4 != 0) throw ConfigError("model.enc_dim", "must be divisible by 4 for 2D sin-cos positions");
    if (dec_heads == 0 || dec_dim % dec_heads != 0)
        throw ConfigError("model.dec_heads", "dec_dim must be divisible by dec_heads");
    if (dec_dim % 4 != 0) throw ConfigError("model.dec_dim", "must be divisible by 4 for 2D sin-cos positions");
    if (mlp_ratio == 0) throw ConfigError("model.mlp_ratio", "must be positive");
    if (patch == 0 || image_size % patch != 0)
        throw ConfigError("model.patch", "image_size must be divisible by patch");
    if (n_clips == 0) throw ConfigError("model.n_clips", "must be positive");
}

// ---- layers ----------------------------------------------------------------

template <typename T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x) const {
    return tensor::add_bias(tensor::matmul(x, weight), bias);
}

template <typename T>
Tensor<T> LayerNorm<T>::operator()(const Tensor<T>& x) const {
    return tensor::layer_norm(x, gamma, beta, T(1e-6));
}

template <typename T>
Tensor<T> Block<T>::attention(const Tensor<T>& x, std::size_t seq_len) const {
    const std::size_t rows = x.dim(0);
    const std::size_t dim = x.dim(1);
    if (seq_len == 0) seq_len = rows;
    if (rows % seq_len != 0)
        throw DimensionError("attention: " + std::to_string(rows) + " rows do not split into sequences of " +
                             std::to_string(seq_len));
    const std::size_t n_seq = rows / seq_len;
    const std::size_t head_dim = dim / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
    const auto packed = qkv(x);
    std::vector<Tensor<T>> seqs;
    seqs.reserve(n_seq);
    std::vector<std::size_t> idx(seq_len);
    for (std::size_t s = 0; s < n_seq; ++s) {
        Tensor<T> part = packed;
        if (n_seq > 1) {
            for (std::size_t i = 0; i < seq_len; ++i) idx[i] = s * seq_len + i;
            part = tensor::gather_rows(packed, std::span<const std::size_t>(idx));
        }
        std::vector<Tensor<T>> outs;
        outs.reserve(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * head_dim;
            auto q = tensor::slice_cols(part, off, off + head_dim);
            auto k = tensor::slice_cols(part, dim + off, dim + off + head_dim);
            auto v = tensor::slice_cols(part, 2 * dim + off, 2 * dim + off + head_dim);
            auto weights = tensor::softmax(tensor::scale(tensor::matmul_nt(q, k), scale), 1);
            outs.push_back(tensor::matmul(weights, v));
        }
        seqs.push_back(heads == 1 ? outs.front() : tensor::concat_cols(outs));
    }
    return proj(n_seq == 1 ? seqs.front() : tensor::concat_rows(seqs));
}

template <typename T>
Tensor<T> Block<T>::operator()(const Tensor<T>& x, std::size_t seq_len) const {
    auto h = tensor::add(x, attention(norm1(x), seq_len));
    return tensor::add(h, fc2(tensor::gelu(fc1(norm2(h)))));
}

// ---- init ------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> trunc_normal(Rng& rng, Shape shape, double std) {
    std::normal_distribution<double> normal(0.0, std);
    std::vector<T> data(tensor::numel(shape));
    for (T& v : data) {
        double draw = normal(rng);
        while (std::abs(draw) > 2.0 * std) draw = normal(rng);
        v = static_cast<T>(draw);
    }
    return Tensor<T>::from(std::move(shape), std::move(data), true);
}

template <typename T>
Linear<T> make_linear(Rng& rng, std::size_t in, std::size_t out) {
    return {trunc_normal<T>(rng, {in, out}, 0.02), Tensor<T>::zeros({out}, true)};
}

template <typename T>
LayerNorm<T> make_norm(std::size_t dim) {
    return {Tensor<T>::full({dim}, T(1), true), Tensor<T>::zeros({dim}, true)};
}

template <typename T>
Block<T> make_block(Rng& rng, std::size_t dim, std::size_t heads, std::size_t mlp_ratio) {
    Block<T> b;
    b.heads = heads;
    b.norm1 = make_norm<T>(dim);
    b.qkv = make_linear<T>(rng, dim, 3 * dim);
    b.proj = make_linear<T>(rng, dim, dim);
    b.norm2 = make_norm<T>(dim);
    b.fc1 = make_linear<T>(rng, dim, mlp_ratio * dim);
    b.fc2 = make_linear<T>(rng, mlp_ratio * dim, dim);
    return b;
}

template <typename T>
Tensor<T> fixed_table(const patch::PatchGeometry& geo, std::size_t dim) {
    const auto table = patch::posembed_sincos(geo, dim);
    return Tensor<T>::from({geo.n_tokens(), dim}, std::vector<T>(table.begin(), table.end()), false);
}

template <typename T>
void add_linear(optim::ParamList<T>& out, const Linear<T>& l, const std::string& name) {
    out.push_back({name + ".weight", l.weight, true});
    out.push_back({name + ".bias", l.bias, false});
}

template <typename T>
void add_norm(optim::ParamList<T>& out, const LayerNorm<T>& n, const std::string& name) {
    out.push_back({name + ".gamma", n.gamma, false});
    out.push_back({name + ".beta", n.beta, false});
}

template <typename T>
void add_block(optim::ParamList<T>& out, const Block<T>& b, const std::string& name) {
    add_norm(out, b.norm1, name + ".norm1");
    add_linear(out, b.qkv, name + ".attn.qkv");
    add_linear(out, b.proj, name + ".attn.proj");
    add_norm(out, b.norm2, name + ".norm2");
    add_linear(out, b.fc1, name + ".mlp.fc1");
    add_linear(out, b.fc2, name + ".mlp.fc2");
}

template <typename T>
Tensor<T> clone_param(const Tensor<T>& t) {
    return Tensor<T>::from(t.shape(), std::vector<T>(t.data().begin(), t.data().end()), t.requires_grad());
}

template <typename T>
Linear<T> clone_linear(const Linear<T>& l) {
    return {clone_param(l.weight), clone_param(l.bias)};
}

template <typename T>
LayerNorm<T> clone_norm(const LayerNorm<T>& n) {
    return {clone_param(n.gamma), clone_param(n.beta)};
}

template <typename T>
DecoderTrunk<T> make_trunk(const ViTConfig& c, Rng& rng) {
    DecoderTrunk<T> d;
    d.embed = make_linear<T>(rng, c.enc_dim, c.dec_dim);
    d.mask_token = trunc_normal<T>(rng, {1, c.dec_dim}, 0.02);
    for (std::size_t i = 0; i < c.dec_depth; ++i) d.blocks.push_back(make_block<T>(rng, c.dec_dim, c.dec_heads, c.mlp_ratio));
    d.norm = make_norm<T>(c.dec_dim);
    d.pos = fixed_table<T>(c.geometry(), c.dec_dim);
    return d;
}

}  // namespace

template <typename T>
Encoder<T> make_encoder(const ViTConfig& c, Rng& rng) {
    c.validate();
    Encoder<T> e;
    e.patch_embed = make_linear<T>(rng, c.geometry().patch_dim(), c.enc_dim);
    for (std::size_t i = 0; i < c.enc_depth; ++i) e.blocks.push_back(make_block<T>(rng, c.enc_dim, c.heads, c.mlp_ratio));
    e.norm = make_norm<T>(c.enc_dim);
    e.pos = fixed_table<T>(c.geometry(), c.enc_dim);
    return e;
}

// ---- encoder / decoder -----------------------------------------------------

template <typename T>
Tensor<T> Encoder<T>::embed(const Tensor<T>& patches, std::span<const std::size_t> positions) const {
    if (patches.rank() != 2 || patches.dim(0) != positions.size())
        throw DimensionError("encoder: " + std::to_string(positions.size()) + " positions for patches " +
                             tensor::shape_str(patches.shape()));
    return tensor::add(patch_embed(patches), tensor::gather_rows(pos, positions));
}

template <typename T>
Tensor<T> Encoder<T>::encode(const Tensor<T>& embedded, std::size_t seq_len) const {
    Tensor<T> x = embedded;
    for (const auto& b : blocks) x = b(x, seq_len);
    return norm(x);
}

template <typename T>
void Encoder<T>::collect(optim::ParamList<T>& out, const std::string& prefix) const {
    add_linear(out, patch_embed, prefix + ".patch_embed");
    for (std::size_t i = 0; i < blocks.size(); ++i) add_block(out, blocks[i], prefix + ".blocks." + std::to_string(i));
    add_norm(out, norm, prefix + ".norm");
}

template <typename T>
Encoder<T> Encoder<T>::clone() const {
    Encoder<T> e;
    e.patch_embed = clone_linear(patch_embed);
    for (const auto& b : blocks) {
        Block<T> c;
        c.heads = b.heads;
        c.norm1 = clone_norm(b.norm1);
        c.qkv = clone_linear(b.qkv);
        c.proj = clone_linear(b.proj);
        c.norm2 = clone_norm(b.norm2);
        c.fc1 = clone_linear(b.fc1);
        c.fc2 = clone_linear(b.fc2);
        e.blocks.push_back(std::move(c));
    }
    e.norm = clone_norm(norm);
    e.pos = pos;  // constant table, safe to share
    return e;
}

template <typename T>
Tensor<T> DecoderTrunk<T>::assemble(const Tensor<T>& latent_visible, const patch::MaskPlan& plan,
                                    const patch::DecoderLayout& layout) const {
    return patch::assemble_decoder_input(embed(latent_visible), mask_token, plan, layout, pos);
}

template <typename T>
Tensor<T> DecoderTrunk<T>::operator()(const Tensor<T>& assembled) const {
    Tensor<T> x = assembled;
    for (const auto& b : blocks) x = b(x);
    return norm(x);
}

template <typename T>
void DecoderTrunk<T>::collect(optim::ParamList<T>& out, const std::string& prefix) const {
    add_linear(out, embed, prefix + ".embed");
    out.push_back({prefix + ".mask_token", mask_token, false});
    for (std::size_t i = 0; i < blocks.size(); ++i) add_block(out, blocks[i], prefix + ".blocks." + std::to_string(i));
    add_norm(out, norm, prefix + ".norm");
}

// ---- model -----------------------------------------------------------------

template <typename T>
Model<T>::Model(const ViTConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    encoder_ = make_encoder<T>(config_, rng);
    const std::size_t patch_dim = config_.geometry().patch_dim();
    if (config_.dec_kind == DecoderKind::Solo) {
        trunks_.push_back(make_trunk<T>(config_, rng));
        if (config_.solo_split_head) {
            heads_.push_back(make_linear<T>(rng, config_.dec_dim, 2 * patch_dim));
        } else {
            heads_.push_back(make_linear<T>(rng, config_.dec_dim, patch_dim));
            heads_.push_back(make_linear<T>(rng, config_.dec_dim, patch_dim));
        }
    } else {
        trunks_.push_back(make_trunk<T>(config_, rng));
        trunks_.push_back(make_trunk<T>(config_, rng));
        heads_.push_back(make_linear<T>(rng, config_.dec_dim, patch_dim));
        heads_.push_back(make_linear<T>(rng, config_.dec_dim, patch_dim));
    }
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> Model<T>::decode_solo(const Tensor<T>& assembled) const {
    if (config_.dec_kind != DecoderKind::Solo) throw ContractError("decode_solo: model has a Duet decoder");
    const auto features = trunks_[0](assembled);
    if (config_.solo_split_head) {
        const std::size_t patch_dim = config_.geometry().patch_dim();
        const auto both = heads_[0](features);
        return {tensor::slice_cols(both, 0, patch_dim), tensor::slice_cols(both, patch_dim, 2 * patch_dim)};
    }
    return {heads_[0](features), heads_[1](features)};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> Model<T>::decode_duet(const Tensor<T>& assembled_video,
                                                      const Tensor<T>& assembled_audio) const {
    if (config_.dec_kind != DecoderKind::Duet) throw ContractError("decode_duet: model has a Solo decoder");
    return {heads_[0](trunks_[0](assembled_video)), heads_[1](trunks_[1](assembled_audio))};
}

template <typename T>
Reconstruction<T> Model<T>::forward(const Tensor<T>& mixed_patches, const patch::MaskPlan& plan,
                                    const patch::DecoderLayout& layout) const {
    const std::size_t n_tokens = config_.geometry().n_tokens();
    if (mixed_patches.rank() != 2 || mixed_patches.dim(0) != n_tokens || plan.n_tokens() != n_tokens)
        throw DimensionError("model forward: expected " + std::to_string(n_tokens) + " tokens, got patches " +
                             tensor::shape_str(mixed_patches.shape()) + " and a plan over " +
                             std::to_string(plan.n_tokens()));
    const std::span<const std::size_t> visible(plan.visible);
    const auto latent = encoder_(tensor::gather_rows(mixed_patches, visible), visible);
    if (config_.dec_kind == DecoderKind::Solo) {
        auto [video, audio] = decode_solo(trunks_[0].assemble(latent, plan, layout));
        return {video, audio};
    }
    auto [video, audio] = decode_duet(trunks_[0].assemble(latent, plan, layout), trunks_[1].assemble(latent, plan, layout));
    return {video, audio};
}

template <typename T>
optim::ParamList<T> Model<T>::params() const {
    optim::ParamList<T> out;
    encoder_.collect(out, "encoder");
    if (config_.dec_kind == DecoderKind::Solo) {
        trunks_[0].collect(out, "decoder");
        if (config_.solo_split_head) {
            add_linear(out, heads_[0], "head");
        } else {
            add_linear(out, heads_[0], "head_video");
            add_linear(out, heads_[1], "head_audio");
        }
    } else {
        trunks_[0].collect(out, "decoder_video");
        trunks_[1].collect(out, "decoder_audio");
        add_linear(out, heads_[0], "head_video");
        add_linear(out, heads_[1], "head_audio");
    }
    return out;
}

template <typename T>
std::size_t count_params(const optim::ParamList<T>& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
}

// ---- accounting ------------------------------------------------------------

namespace {

std::size_t block_params(std::size_t d, std::size_t r) {
    return 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * r * d + r * d) + (r * d * d + d);
}

double block_flops(std::size_t n, std::size_t d, std::size_t r) {
    const double nn = static_cast<double>(n), dd = static_cast<double>(d);
    const double attention_macs = 4.0 * nn * dd * dd + 2.0 * nn * nn * dd;
    const double mlp_macs = 2.0 * nn * dd * static_cast<double>(r) * dd;
    return 2.0 * (attention_macs + mlp_macs);
}

}  // namespace

ParamBreakdown count_params(const ViTConfig& c) {
    c.validate();
    const std::size_t patch_dim = c.geometry().patch_dim();
    ParamBreakdown out;
    out.encoder = (patch_dim * c.enc_dim + c.enc_dim) + c.enc_depth * block_params(c.enc_dim, c.mlp_ratio) + 2 * c.enc_dim;
    const std::size_t trunk = (c.enc_dim * c.dec_dim + c.dec_dim) + c.dec_dim +
                              c.dec_depth * block_params(c.dec_dim, c.mlp_ratio) + 2 * c.dec_dim;
    const std::size_t head = c.dec_dim * patch_dim + patch_dim;
    out.decoder = (c.dec_kind == DecoderKind::Solo ? 1 : 2) * trunk + 2 * head;
    return out;
}

FlopBreakdown estimate_flops(const ViTConfig& c, double mask_ratio) {
    c.validate();
    const auto geo = c.geometry();
    const std::size_t n_tokens = geo.n_tokens();
    const std::size_t n_visible = n_tokens - patch::masked_count(n_tokens, mask_ratio);
    FlopBreakdown out;
    out.encoder = linear_flops(n_visible, geo.patch_dim(), c.enc_dim) +
                  static_cast<double>(c.enc_depth) * block_flops(n_visible, c.enc_dim, c.mlp_ratio);
    const double trunk = linear_flops(n_visible, c.enc_dim, c.dec_dim) +
                         static_cast<double>(c.dec_depth) * block_flops(n_tokens, c.dec_dim, c.mlp_ratio);
    const double heads = 2.0 * linear_flops(n_tokens, c.dec_dim, geo.patch_dim());
    out.decoder = (c.dec_kind == DecoderKind::Solo ? 1.0 : 2.0) * trunk + heads;
    return out;
}

template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template struct Block<float>;
template struct Block<double>;
template struct Encoder<float>;
template struct Encoder<double>;
template struct DecoderTrunk<float>;
template struct DecoderTrunk<double>;
template class Model<float>;
template class Model<double>;
template Encoder<float> make_encoder<float>(const ViTConfig&, Rng&);
template Encoder<double> make_encoder<double>(const ViTConfig&, Rng&);
template std::size_t count_params(const optim::ParamList<float>&);
template std::size_t count_params(const optim::ParamList<double>&);

}  // namespace cmmix::model
