// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cmmix/error.hpp"
#include "cmmix/retrieval.hpp"
#include "support.hpp"

using namespace cmmix;
using namespace cmmix::retrieval;
using cmmix::testing::random_tensor;
using tensor::Tensor;
using TD = Tensor<double>;

namespace {

TD one_hot_rows(std::size_t rows, std::size_t dim, std::size_t first) {
    auto t = TD::zeros({rows, dim});
    for (std::size_t r = 0; r < rows; ++r) t.data()[r * dim + first + r] = 1.0;
    return t;
}

SegmentEmbeddings random_table(Rng& rng, std::size_t count, std::size_t segments, std::size_t dim) {
    std::normal_distribution<float> n(0, 1);
    SegmentEmbeddings t{static_cast<std::uint32_t>(count), static_cast<std::uint32_t>(segments),
                        static_cast<std::uint32_t>(dim), std::vector<float>(count * segments * dim)};
    for (float& v : t.data) v = n(rng);
    return t;
}

double cosine(const float* a, const float* b, std::size_t d) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < d; ++i) {
        ab += static_cast<double>(a[i]) * b[i];
        aa += static_cast<double>(a[i]) * a[i];
        bb += static_cast<double>(b[i]) * b[i];
    }
    return (aa == 0 || bb == 0) ? 0.0 : ab / std::sqrt(aa * bb);
}

double cosine_d(const TD& v, const TD& a, std::size_t i, std::size_t j, std::size_t d) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t k = 0; k < d; ++k) {
        const double x = v.data()[i * d + k], y = a.data()[j * d + k];
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    return ab / std::sqrt(aa * bb);
}

// full stable sort by (score desc, index asc)
std::vector<std::size_t> sort_oracle(const std::vector<double>& scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
    });
    return idx;
}

std::vector<pretrain::Sample> toy_samples(std::size_t n, std::size_t clips, std::uint64_t seed) {
    signal::DataConfig d;
    d.n_clips = clips;
    d.image_size = 32;
    Rng rng(seed);
    std::vector<pretrain::Sample> out;
    for (std::size_t i = 0; i < n; ++i)
        out.push_back(pretrain::prepare_sample(signal::synth_pair(signal::draw_synthetic_spec(rng), d), d, i));
    return out;
}

}  // namespace

TEST_CASE("infonce closed forms") {
    Rng rng(1);
    auto v = random_tensor(rng, {1, 8}, -1, 1, false);
    auto a = random_tensor(rng, {1, 8}, -1, 1, false);
    CHECK(std::abs(infonce_loss<double>(v, a, 1, 1).item()) <= 1e-9);

    auto zv = one_hot_rows(8, 16, 0);
    auto za = one_hot_rows(8, 16, 8);
    CHECK(infonce_loss<double>(zv, za, 4, 2).item() == doctest::Approx(8 * std::log(8.0)).epsilon(1e-9));
    CHECK(std::abs(infonce_loss<double>(zv, za, 4, 2).item() - 16.636) <= 1e-3);

    auto pv = one_hot_rows(2, 4, 0);
    const double expected = 2 * std::log(1 + std::exp(-1 / 0.3));
    CHECK(infonce_loss<double>(pv, pv, 2, 1).item() == doctest::Approx(expected).epsilon(1e-12));
    CHECK(std::abs(infonce_loss<double>(pv, pv, 2, 1).item() - 0.0701) <= 1e-4);

    InfoNceOptions sym;
    sym.symmetric = true;
    CHECK(infonce_loss<double>(pv, pv, 2, 1, sym).item() == doctest::Approx(2 * expected).epsilon(1e-12));

    auto zero = TD::zeros({2, 4});
    CHECK_THROWS_AS(infonce_loss<double>(zero, pv, 2, 1), ContractError);
    CHECK_THROWS(infonce_loss<double>(pv, pv, 3, 1));
}

TEST_CASE("infonce matches a scalar loop and is non-negative") {
    Rng rng(2);
    const std::size_t V = 3, L = 2, D = 5, N = V * L;
    for (int inst = 0; inst < 10; ++inst) {
        auto v = random_tensor(rng, {N, D}, -1, 1, false);
        auto a = random_tensor(rng, {N, D}, -1, 1, false);
        for (bool exclude : {false, true}) {
            InfoNceOptions opts;
            opts.tau = 0.3;
            opts.exclude_same_item_negatives = exclude;
            double expected = 0;
            for (std::size_t i = 0; i < N; ++i) {
                const double pos = std::exp(cosine_d(v, a, i, i, D) / 0.3);
                double denom = 0;
                for (std::size_t j = 0; j < N; ++j) {
                    if (exclude && j != i && j / L == i / L) continue;
                    denom += std::exp(cosine_d(v, a, i, j, D) / 0.3);
                }
                expected -= std::log(pos / denom);
            }
            const double got = infonce_loss<double>(v, a, V, L, opts).item();
            CHECK(got == doctest::Approx(expected).epsilon(1e-10));
            CHECK(got >= 0.0);
        }
    }
}

TEST_CASE("infonce gradients match finite differences") {
    Rng rng(3);
    for (int inst = 0; inst < 20; ++inst) {
        auto v = random_tensor(rng, {4, 6});
        auto a = random_tensor(rng, {4, 6});
        InfoNceOptions opts;
        opts.symmetric = inst % 2 == 1;
        const double err = testing::gradcheck(
            [&](const std::vector<TD>& in) { return infonce_loss<double>(in[0], in[1], 2, 2, opts); }, {v, a});
        CHECK(err <= 1e-4);
    }
}

TEST_CASE("track scores and ranking") {
    Rng rng(4);
    auto pool = random_table(rng, 12, 2, 8);
    const std::size_t seg = 2 * 8;
    std::span<const float> q(pool.data.data() + 5 * seg, seg);
    CHECK(rank_candidates(q, 2, pool).front() == 5);

    auto scores = track_scores(q, 2, pool);
    for (std::size_t c = 0; c < 12; ++c) {
        const float* row = pool.data.data() + c * seg;
        const double want = 0.5 * (cosine(q.data(), row, 8) + cosine(q.data() + 8, row + 8, 8));
        CHECK(scores[c] == doctest::Approx(want).epsilon(1e-6));
    }

    for (int inst = 0; inst < 20; ++inst) {
        auto p = random_table(rng, 30, 2, 8);
        auto query = random_table(rng, 1, 2, 8);
        auto s = track_scores(query.data, 2, p);
        CHECK(rank_candidates(query.data, 2, p) == sort_oracle(s));

        // scaling rows before normalization leaves the order unchanged
        auto scaled = p;
        for (std::size_t r = 0; r < 60; ++r)
            for (std::size_t j = 0; j < 8; ++j) scaled.data[r * 8 + j] *= static_cast<float>(1 + r % 7);
        CHECK(rank_candidates(query.data, 2, scaled) == rank_candidates(query.data, 2, p));
    }

    SegmentEmbeddings ortho{4, 1, 4, std::vector<float>(16, 0.0f)};
    for (std::size_t i = 0; i < 4; ++i) ortho.data[i * 4 + i] = 1.0f;
    std::vector<float> dup = {0, 0, 2, 0};
    CHECK(rank_candidates(dup, 1, ortho).front() == 2);
    std::vector<float> zero(4, 0.0f);
    for (double s : track_scores(zero, 1, ortho)) CHECK(s == 0.0);
    CHECK_THROWS_AS(track_scores(dup, 2, ortho), ContractError);
}

TEST_CASE("score report matches a brute-force oracle") {
    Rng rng(5);
    const std::size_t n = 50;
    for (int inst = 0; inst < 100; ++inst) {
        std::vector<double> sim(n * n);
        // every third matrix is coarsely quantized to force ties
        std::uniform_int_distribution<int> coarse(0, 4);
        std::uniform_real_distribution<double> fine(-1, 1);
        for (double& s : sim) s = inst % 3 == 0 ? coarse(rng) / 4.0 : fine(rng);
        if (inst % 5 == 0)
            for (std::size_t i = 0; i < n; ++i) sim[i * n + i] = sim[i * n + (i + 1) % n];

        std::vector<std::size_t> oracle_ranks(n);
        for (std::size_t i = 0; i < n; ++i) {
            auto order = sort_oracle(std::vector<double>(sim.begin() + i * n, sim.begin() + (i + 1) * n));
            oracle_ranks[i] = static_cast<std::size_t>(std::find(order.begin(), order.end(), i) - order.begin()) + 1;
        }
        auto ranks = ranks_from_similarity(sim, n);
        CHECK(ranks == oracle_ranks);

        auto report = score_report(ranks, n, Direction::VideoToMusic);
        for (std::size_t k : {1, 5, 10}) {
            std::size_t hits = 0;
            for (auto r : oracle_ranks) hits += r <= k;
            CHECK(report.recall_at(k) == 100.0 * static_cast<double>(hits) / n);
        }
        auto sorted = oracle_ranks;
        std::sort(sorted.begin(), sorted.end());
        CHECK(report.median_rank == 0.5 * static_cast<double>(sorted[24] + sorted[25]));
        CHECK(report.recall_at(1) <= report.recall_at(5));
        CHECK(report.recall_at(5) <= report.recall_at(10));
        CHECK(report.median_rank >= 1);
        CHECK(report.median_rank <= n);
    }
}

TEST_CASE("score report examples") {
    std::vector<std::size_t> perfect(20, 1);
    auto r = score_report(perfect, 20, Direction::MusicToVideo);
    CHECK(r.recall_at(1) == 100.0);
    CHECK(r.median_rank == 1.0);
    std::vector<std::size_t> worst(2000, 2000);
    CHECK(score_report(worst, 2000, Direction::VideoToMusic).median_rank == 2000.0);
    std::vector<std::size_t> odd = {3, 1, 2};
    CHECK(score_report(odd, 3, Direction::VideoToMusic).median_rank == 2.0);
    CHECK_THROWS_AS(score_report(std::vector<std::size_t>{}, 3, Direction::VideoToMusic), InputError);
    CHECK(to_string(Direction::VideoToMusic) == "V2M");
    CHECK(to_string(Direction::MusicToVideo) == "M2V");

    std::ostringstream out;
    write_report_header(out);
    CHECK(out.str() == "direction,R@1,R@5,R@10,median_rank,N\n");
}

TEST_CASE("evaluate on an identical pool is perfect") {
    Rng rng(6);
    auto pool = random_table(rng, 16, 2, 8);
    auto r = evaluate(pool, pool, Direction::VideoToMusic);
    CHECK(r.n == 16);
    CHECK(r.recall_at(1) == 100.0);
    CHECK(r.median_rank == 1.0);
}

TEST_CASE("flexible query") {
    Rng rng(7);
    auto m = random_table(rng, 1, 2, 4);
    std::vector<float> zeros(8, 0.0f);
    CHECK(flexible_query(m.data, 2, zeros, 2, 4, QueryOp::Add) == m.data);
    auto ma = random_table(rng, 1, 2, 4);
    auto added = flexible_query(m.data, 2, ma.data, 2, 4, QueryOp::Add);
    auto back = flexible_query(added, 2, ma.data, 2, 4, QueryOp::Sub);
    for (std::size_t i = 0; i < 8; ++i) CHECK(back[i] == doctest::Approx(m.data[i]).epsilon(1e-6));

    auto longer = random_table(rng, 1, 3, 4);
    auto padded = flexible_query(m.data, 2, longer.data, 3, 4, QueryOp::Sub);
    REQUIRE(padded.size() == 12);
    for (std::size_t j = 0; j < 4; ++j) CHECK(padded[8 + j] == -longer.data[8 + j]);

    auto pool = random_table(rng, 20, 2, 4);
    auto scores = track_scores(added, 2, pool);
    std::vector<double> oracle(20);
    for (std::size_t c = 0; c < 20; ++c) {
        const float* row = pool.data.data() + c * 8;
        oracle[c] = 0.5 * (cosine(added.data(), row, 4) + cosine(added.data() + 4, row + 4, 4));
    }
    CHECK(rank_candidates(added, 2, pool) == sort_oracle(oracle));
    CHECK(query_op_from_string("add") == QueryOp::Add);
    CHECK(query_op_from_string("sub") == QueryOp::Sub);
    CHECK_THROWS_AS(query_op_from_string("mul"), InputError);
}

TEST_CASE("segment embeddings") {
    auto cfg = model::ViTConfig::toy();
    Rng rng(8);
    auto enc = model::make_encoder<double>(cfg, rng);
    auto samples = toy_samples(2, 2, 9);
    auto clips = modality_images(samples[0], Modality::Video);
    auto e = embed<double>(enc, clips, cfg.patch);
    CHECK(e.dim(0) == 2);
    CHECK(e.dim(1) == 64);
    for (std::size_t r = 0; r < 2; ++r) {
        double n = 0;
        for (std::size_t j = 0; j < 64; ++j) n += e.data()[r * 64 + j] * e.data()[r * 64 + j];
        CHECK(std::abs(std::sqrt(n) - 1) <= 1e-5);
    }

    // naive oracle: encode all tokens, average each clip's rows, normalize
    auto seq = patch::patchify(clips, cfg.patch);
    std::vector<double> tok(seq.tokens.begin(), seq.tokens.end());
    std::vector<std::size_t> all(seq.n_tokens());
    std::iota(all.begin(), all.end(), 0);
    auto full = enc(TD::from({seq.n_tokens(), seq.dim()}, tok), all);
    for (std::size_t k = 0; k < 2; ++k) {
        std::vector<double> avg(64, 0.0);
        for (std::size_t t = k * 16; t < (k + 1) * 16; ++t)
            for (std::size_t j = 0; j < 64; ++j) avg[j] += full.data()[t * 64 + j] / 16;
        double n = 0;
        for (double x : avg) n += x * x;
        for (std::size_t j = 0; j < 64; ++j)
            CHECK(e.data()[k * 64 + j] == doctest::Approx(avg[j] / std::sqrt(n)).epsilon(1e-9));
    }

    // duplicate items embed identically, and batching matches single-item embedding
    auto other = modality_images(samples[1], Modality::Audio);
    auto batch = embed_items<double>(enc, {clips, other, clips}, cfg.patch);
    auto single = embed<double>(enc, other, cfg.patch);
    for (std::size_t i = 0; i < 128; ++i) {
        CHECK(batch.data()[i] == batch.data()[256 + i]);
        CHECK(batch.data()[128 + i] == doctest::Approx(single.data()[i]).epsilon(1e-9));
    }
}

TEST_CASE("two streams start identical") {
    auto cfg = model::ViTConfig::toy();
    model::Model<float> m(cfg, 10);
    auto ts = TwoStream<float>::from_encoder(m.encoder(), cfg.patch);
    auto p = ts.params();
    const std::size_t half = p.size() / 2;
    for (std::size_t i = 0; i < half; ++i) {
        CHECK(p[i].name.starts_with("video."));
        CHECK(p[half + i].name.starts_with("audio."));
        CHECK(std::equal(p[i].value.data().begin(), p[i].value.data().end(), p[half + i].value.data().begin()));
        CHECK(&p[i].value.node() != &p[half + i].value.node());
    }
    auto samples = toy_samples(1, 2, 11);
    auto clips = modality_images(samples[0], Modality::Video);
    auto ev = embed<float>(ts.video, clips, cfg.patch);
    auto ea = embed<float>(ts.audio, clips, cfg.patch);
    CHECK(std::equal(ev.data().begin(), ev.data().end(), ea.data().begin()));
}

TEST_CASE("finetuner: single pair loss and determinism") {
    auto cfg = model::ViTConfig::toy();
    cfg.n_clips = 1;
    model::Model<float> m(cfg, 12);
    auto one = toy_samples(1, 1, 13);
    RetrievalConfig rc;
    rc.epochs = 4;
    rc.warmup_epochs = 1;
    rc.batch_size = 4;
    auto ts = TwoStream<float>::from_encoder(m.encoder(), cfg.patch);
    Finetuner single(ts, one, rc, 1);
    CHECK(std::abs(single.step().loss) <= 1e-6);

    auto samples = toy_samples(8, 1, 14);
    auto run = [&] {
        auto streams = TwoStream<float>::from_encoder(m.encoder(), cfg.patch);
        Finetuner ft(streams, samples, rc, 7);
        CHECK(ft.total_steps() == 8);
        std::vector<double> losses;
        ft.run([&](const FinetuneMetrics& x) { losses.push_back(x.loss); });
        return losses;
    };
    auto a = run();
    CHECK(a == run());
    CHECK(a.size() == 8);
    for (double l : a) CHECK(std::isfinite(l));

    std::ostringstream out;
    write_finetune_header(out);
    CHECK(out.str() == "step,lr,loss\n");
}

TEST_CASE("retrieval config validation") {
    CHECK_NOTHROW(RetrievalConfig{}.validate());
    RetrievalConfig rc;
    rc.tau = 0;
    CHECK_THROWS_AS(rc.validate(), ConfigError);
}
