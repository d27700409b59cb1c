// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cmmix/checkpoint.hpp"
#include "cmmix/error.hpp"
#include "cmmix/model.hpp"
#include "support.hpp"

using namespace cmmix;
using namespace cmmix::model;
using cmmix::testing::random_tensor;
using tensor::Tensor;
using TD = Tensor<double>;

namespace {

ViTConfig toy(DecoderKind kind) {
    auto c = ViTConfig::toy();
    c.dec_kind = kind;
    return c;
}

struct Fixture {
    TD patches;
    patch::MaskPlan plan;
    patch::DecoderLayout layout;
};

Fixture fixture(const ViTConfig& c, std::uint64_t seed) {
    Rng rng(seed);
    const auto geo = c.geometry();
    Fixture f;
    f.patches = random_tensor(rng, {geo.n_tokens(), geo.patch_dim()}, 0, 1, false);
    f.plan = patch::random_mask(rng, geo.n_tokens(), 0.5);
    f.layout = patch::decoder_layout(f.plan);
    return f;
}

bool all_zero(const TD& t) {
    return !t.has_grad() || std::all_of(t.grad().begin(), t.grad().end(), [](double g) { return g == 0.0; });
}

}  // namespace

TEST_CASE("config validation") {
    CHECK_NOTHROW(ViTConfig::vit_base().validate());
    CHECK_NOTHROW(ViTConfig::toy().validate());
    auto c = ViTConfig::toy();
    c.heads = 5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ViTConfig::toy();
    c.patch = 7;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK(decoder_kind_from_string(to_string(DecoderKind::Duet)) == DecoderKind::Duet);
    CHECK_THROWS_AS(decoder_kind_from_string("trio"), ConfigError);

    auto t = ViTConfig::toy();
    CHECK(t.enc_depth == 2);
    CHECK(t.enc_dim == 64);
    CHECK(t.heads == 4);
    CHECK(t.patch == 8);
    CHECK(t.image_size == 32);
    CHECK(t.n_clips == 2);
    CHECK(t.dec_depth == 1);
    CHECK(t.dec_dim == 64);
}

TEST_CASE("encoder shapes and determinism") {
    auto c = ViTConfig::toy();
    Model<double> m(c, 1);
    auto f = fixture(c, 2);
    std::span<const std::size_t> vis(f.plan.visible);
    auto out = m.encoder()(tensor::gather_rows(f.patches, vis), vis);
    CHECK(out.dim(0) == 16);
    CHECK(out.dim(1) == 64);
    auto again = m.encoder()(tensor::gather_rows(f.patches, vis), vis);
    CHECK(std::equal(out.data().begin(), out.data().end(), again.data().begin()));
    CHECK_THROWS_AS(m.encoder().embed(f.patches, vis), DimensionError);
}

TEST_CASE("encoder is permutation equivariant") {
    auto c = ViTConfig::toy();
    Model<double> m(c, 3);
    auto f = fixture(c, 4);
    std::vector<std::size_t> pos(f.plan.visible);
    auto out = m.encoder()(tensor::gather_rows<double>(f.patches, pos), pos);
    std::vector<std::size_t> swapped(pos);
    std::swap(swapped[2], swapped[9]);
    auto out2 = m.encoder()(tensor::gather_rows<double>(f.patches, swapped), swapped);
    const std::size_t d = c.enc_dim;
    for (std::size_t r = 0; r < pos.size(); ++r) {
        const std::size_t src = r == 2 ? 9 : (r == 9 ? 2 : r);
        for (std::size_t j = 0; j < d; ++j) CHECK(out2.data()[r * d + j] == doctest::Approx(out.data()[src * d + j]).epsilon(1e-12));
    }
}

TEST_CASE("zero block weights leave only the final norm") {
    auto c = ViTConfig::toy();
    Model<double> m(c, 5);
    for (auto& b : m.encoder().blocks)
        for (auto* lin : {&b.qkv, &b.proj, &b.fc1, &b.fc2}) {
            std::fill(lin->weight.data().begin(), lin->weight.data().end(), 0.0);
            std::fill(lin->bias.data().begin(), lin->bias.data().end(), 0.0);
        }
    Rng rng(6);
    auto x = random_tensor(rng, {10, 64}, -1, 1, false);
    auto out = m.encoder().encode(x);
    auto ref = tensor::layer_norm(x, TD::full({64}, 1.0), TD::zeros({64}));
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
}

TEST_CASE("stacked sequences attend independently") {
    auto c = ViTConfig::toy();
    Model<double> m(c, 7);
    Rng rng(8);
    auto a = random_tensor(rng, {6, 64}, -1, 1, false);
    auto b = random_tensor(rng, {6, 64}, -1, 1, false);
    auto stacked = m.encoder().encode(tensor::concat_rows<double>({a, b}), 6);
    auto ea = m.encoder().encode(a);
    auto eb = m.encoder().encode(b);
    for (std::size_t i = 0; i < ea.size(); ++i) {
        CHECK(stacked.data()[i] == doctest::Approx(ea.data()[i]).epsilon(1e-12));
        CHECK(stacked.data()[ea.size() + i] == doctest::Approx(eb.data()[i]).epsilon(1e-12));
    }
    CHECK_THROWS(m.encoder().encode(tensor::concat_rows<double>({a, b}), 5));
}

TEST_CASE("decoder output shapes and head distinctness") {
    for (auto kind : {DecoderKind::Solo, DecoderKind::Duet}) {
        auto c = toy(kind);
        Model<double> m(c, 9);
        auto f = fixture(c, 10);
        auto r = m.forward(f.patches, f.plan, f.layout);
        CHECK(r.video.dim(0) == 32);
        CHECK(r.video.dim(1) == 192);
        CHECK(r.audio.dim(0) == 32);
        CHECK(r.audio.dim(1) == 192);
        CHECK_FALSE(std::equal(r.video.data().begin(), r.video.data().end(), r.audio.data().begin()));
    }
    auto split = toy(DecoderKind::Solo);
    split.solo_split_head = true;
    Model<double> m(split, 11);
    CHECK(m.heads().size() == 1);
    auto f = fixture(split, 12);
    auto r = m.forward(f.patches, f.plan, f.layout);
    CHECK(r.video.dim(1) == 192);
    CHECK(r.audio.dim(1) == 192);

    Model<double> solo(toy(DecoderKind::Solo), 1);
    CHECK(solo.trunks().size() == 1);
    CHECK(solo.heads().size() == 2);
    Model<double> duet(toy(DecoderKind::Duet), 1);
    CHECK(duet.trunks().size() == 2);
    CHECK(duet.heads().size() == 2);
    CHECK_THROWS_AS(duet.decode_solo(TD::zeros({32, 64})), ContractError);
}

TEST_CASE("duet trunks are isolated") {
    auto c = toy(DecoderKind::Duet);
    Model<double> m(c, 13);
    auto f = fixture(c, 14);
    auto before = m.forward(f.patches, f.plan, f.layout);
    for (double& w : m.trunks()[1].blocks[0].fc1.weight.data()) w += 0.3;
    for (double& w : m.heads()[1].weight.data()) w *= -1;
    auto after = m.forward(f.patches, f.plan, f.layout);
    CHECK(std::equal(before.video.data().begin(), before.video.data().end(), after.video.data().begin()));
    CHECK_FALSE(std::equal(before.audio.data().begin(), before.audio.data().end(), after.audio.data().begin()));
}

TEST_CASE("audio-only loss gradient flow") {
    for (auto kind : {DecoderKind::Solo, DecoderKind::Duet}) {
        auto c = toy(kind);
        Model<double> m(c, 15);
        auto f = fixture(c, 16);
        auto params = m.params();
        optim::zero_grad(params);
        auto r = m.forward(f.patches, f.plan, f.layout);
        tensor::backward(tensor::mean(tensor::mul(r.audio, r.audio)));
        for (const auto& p : params) {
            INFO(p.name);
            if (p.name.starts_with("decoder_video") || p.name.starts_with("head_video"))
                CHECK(all_zero(p.value));
            if (p.name == "decoder.blocks.0.fc1.weight" || p.name == "decoder_audio.blocks.0.fc1.weight")
                CHECK_FALSE(all_zero(p.value));
            if (p.name == "encoder.patch_embed.weight") CHECK_FALSE(all_zero(p.value));
        }
    }
}

TEST_CASE("end-to-end gradients match finite differences") {
    for (auto kind : {DecoderKind::Solo, DecoderKind::Duet}) {
        auto c = toy(kind);
        Model<double> m(c, 17);
        auto params = m.params();
        Rng rng(18);
        for (int inst = 0; inst < 20; ++inst) {
            auto f = fixture(c, 100 + inst);
            auto tv = random_tensor(rng, {32, 192}, 0, 1, false);
            auto ta = random_tensor(rng, {32, 192}, 0, 1, false);
            auto loss = [&] {
                auto r = m.forward(f.patches, f.plan, f.layout);
                auto dv = tensor::sub(r.video, tv);
                auto da = tensor::sub(r.audio, ta);
                return tensor::add(tensor::mean(tensor::mul(dv, dv)), tensor::mean(tensor::mul(da, da)));
            };
            INFO(to_string(kind) << " instance " << inst);
            CHECK(testing::directional_gradcheck(loss, params, rng) <= 1e-4);
        }
    }
}

TEST_CASE("parameter counts") {
    for (auto kind : {DecoderKind::Solo, DecoderKind::Duet}) {
        auto c = toy(kind);
        Model<float> m(c, 1);
        std::size_t enc = 0, total = 0;
        for (const auto& p : m.params()) {
            total += p.value.size();
            if (p.name.starts_with("encoder.")) enc += p.value.size();
        }
        auto closed = count_params(c);
        CHECK(closed.encoder == enc);
        CHECK(closed.total() == total);
        CHECK(count_params(m.params()) == total);
    }
    auto base = ViTConfig::vit_base();
    const auto enc = count_params(base).encoder;
    CHECK(enc == 85646592);
    CHECK(enc >= 84000000);
    CHECK(enc <= 88000000);
    auto duet = base;
    duet.dec_kind = DecoderKind::Duet;
    CHECK(count_params(duet).total() > count_params(base).total());
}

TEST_CASE("flop estimates") {
    CHECK(linear_flops(10, 3, 4) == 240.0);
    auto base = ViTConfig::vit_base();
    auto duet = base;
    duet.dec_kind = DecoderKind::Duet;
    const auto solo_f = estimate_flops(base, 0.5);
    const auto duet_f = estimate_flops(duet, 0.5);
    CHECK(duet_f.total() > solo_f.total());
    CHECK(duet_f.encoder == solo_f.encoder);

    // one toy encoder block, counted by hand
    auto c = ViTConfig::toy();
    c.enc_depth = 1;
    const double n = 16, d = 64;
    const double expected = 2 * n * 192 * d + 2 * (4 * n * d * d + 2 * n * n * d + 2 * n * d * 4 * d);
    CHECK(estimate_flops(c, 0.5).encoder == doctest::Approx(expected));
}

TEST_CASE("checkpoint round trip is byte exact") {
    auto c = toy(DecoderKind::Duet);
    Model<float> m(c, 21);
    checkpoint::Checkpoint ck;
    ck.config_json = "{\"preset\":\"toy\"}";
    auto params = m.params();
    checkpoint::append_params(ck.records, params);
    const auto bytes = checkpoint::serialize(ck);
    CHECK(bytes.substr(0, 4) == "CMMX");
    auto back = checkpoint::deserialize(bytes);
    CHECK(back.config_json == ck.config_json);
    CHECK(checkpoint::serialize(back) == bytes);

    Model<float> other(c, 22);
    auto other_params = other.params();
    checkpoint::restore_params(other_params, back);
    for (std::size_t i = 0; i < params.size(); ++i)
        CHECK(std::equal(params[i].value.data().begin(), params[i].value.data().end(),
                         other_params[i].value.data().begin()));

    Model<float> solo(toy(DecoderKind::Solo), 1);
    auto solo_params = solo.params();
    CHECK_THROWS_AS(checkpoint::restore_params(solo_params, back), IoError);
    CHECK_THROWS_AS(checkpoint::deserialize("CMMY" + bytes.substr(4)), IoError);
    CHECK_THROWS_AS(checkpoint::deserialize(bytes.substr(0, bytes.size() - 3)), IoError);
}
