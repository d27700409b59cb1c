// SPDX-License-Identifier: Apache-2.0
#include "cmmix/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cmmix/patch.hpp"
#include "cmmix/signal.hpp"

namespace cmmix::retrieval {

using tensor::Tensor;

void RetrievalConfig::validate() const {
    if (!(tau > 0)) throw ConfigError("retrieval.tau", "must be positive");
    if (!(lr > 0)) throw ConfigError("retrieval.lr", "must be positive");
    if (!(min_lr >= 0) || min_lr > lr) throw ConfigError("retrieval.min_lr", "must lie in [0, retrieval.lr]");
    if (epochs == 0) throw ConfigError("retrieval.epochs", "must be at least 1");
    if (warmup_epochs >= epochs) throw ConfigError("retrieval.warmup_epochs", "must be smaller than retrieval.epochs");
    if (batch_size == 0) throw ConfigError("retrieval.batch_size", "must be at least 1");
    if (!(weight_decay >= 0)) throw ConfigError("retrieval.weight_decay", "must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
        throw ConfigError("retrieval.betas", "each beta must lie in [0, 1)");
}

template <typename T>
TwoStream<T> TwoStream<T>::from_encoder(const model::Encoder<T>& encoder, std::size_t patch) {
    return {encoder.clone(), encoder.clone(), patch};
}

template <typename T>
optim::ParamList<T> TwoStream<T>::params() const {
    optim::ParamList<T> out;
    video.collect(out, "video");
    audio.collect(out, "audio");
    return out;
}

template struct TwoStream<float>;
template struct TwoStream<double>;

template <typename T>
Tensor<T> embed_items(const model::Encoder<T>& encoder, const std::vector<std::vector<Image>>& items,
                      std::size_t patch) {
    if (items.empty()) throw InputError("embed: no items");
    const std::size_t n_clips = items.front().size();
    std::vector<T> tokens;
    std::size_t per_item = 0;
    std::size_t per_clip = 0;
    std::size_t dim = 0;
    for (const auto& clips : items) {
        if (clips.size() != n_clips) throw ContractError("embed: items disagree on the number of clips");
        const auto seq = patch::patchify(clips, patch);
        per_item = seq.n_tokens();
        per_clip = seq.geometry.tokens_per_clip();
        dim = seq.dim();
        tokens.insert(tokens.end(), seq.tokens.begin(), seq.tokens.end());
    }
    const std::size_t rows = items.size() * per_item;
    std::vector<std::size_t> positions(rows);
    std::vector<std::size_t> group(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        positions[r] = r % per_item;
        group[r] = r / per_clip;
    }
    const auto patches = Tensor<T>::from({rows, dim}, std::move(tokens));
    const auto encoded = encoder.encode(encoder.embed(patches, positions), per_item);
    return tensor::l2_normalize_rows(tensor::segment_mean(encoded, group, items.size() * n_clips));
}

template <typename T>
Tensor<T> embed(const model::Encoder<T>& encoder, std::span<const Image> clips, std::size_t patch) {
    return embed_items(encoder, {std::vector<Image>(clips.begin(), clips.end())}, patch);
}

template Tensor<float> embed_items(const model::Encoder<float>&, const std::vector<std::vector<Image>>&, std::size_t);
template Tensor<double> embed_items(const model::Encoder<double>&, const std::vector<std::vector<Image>>&, std::size_t);
template Tensor<float> embed(const model::Encoder<float>&, std::span<const Image>, std::size_t);
template Tensor<double> embed(const model::Encoder<double>&, std::span<const Image>, std::size_t);

std::vector<Image> modality_images(const pretrain::Sample& sample, Modality m) {
    if (m == Modality::Video) return sample.frames;
    std::vector<Image> out;
    for (const auto& mel : sample.mels) out.push_back(mel.image);
    return out;
}

SegmentEmbeddings embed_samples(const model::Encoder<float>& encoder, const std::vector<pretrain::Sample>& samples,
                                Modality m, std::size_t patch, std::size_t chunk) {
    if (samples.empty()) throw InputError("embed: no samples");
    tensor::NoGradGuard no_grad;
    SegmentEmbeddings table;
    table.count = static_cast<std::uint32_t>(samples.size());
    table.segments = static_cast<std::uint32_t>(samples.front().n_clips());
    chunk = std::max<std::size_t>(chunk, 1);
    for (std::size_t begin = 0; begin < samples.size(); begin += chunk) {
        std::vector<std::vector<Image>> items;
        for (std::size_t i = begin; i < std::min(begin + chunk, samples.size()); ++i)
            items.push_back(modality_images(samples[i], m));
        const auto e = embed_items(encoder, items, patch);
        table.dim = static_cast<std::uint32_t>(e.dim(1));
        table.data.insert(table.data.end(), e.data().begin(), e.data().end());
    }
    return table;
}

template <typename T>
Tensor<T> infonce_loss(const Tensor<T>& video, const Tensor<T>& audio, std::size_t n_items, std::size_t n_segments,
                       const InfoNceOptions& opts) {
    const std::size_t n = n_items * n_segments;
    if (video.rank() != 2 || video.shape() != audio.shape() || video.dim(0) != n)
        throw DimensionError("infonce: expected two " + std::to_string(n) + " x D inputs, got " +
                             tensor::shape_str(video.shape()) + " and " + tensor::shape_str(audio.shape()));
    if (!(opts.tau > 0)) throw ConfigError("retrieval.tau", "must be positive");
    const auto sim = tensor::scale(tensor::matmul_nt(tensor::l2_normalize_rows(video), tensor::l2_normalize_rows(audio)),
                                   static_cast<T>(1.0 / opts.tau));
    std::vector<T> eye(n * n, T(0));
    for (std::size_t r = 0; r < n; ++r) eye[r * n + r] = T(1);
    const auto pick = Tensor<T>::from({n, n}, std::move(eye));
    Tensor<T> exclusion;
    if (opts.exclude_same_item_negatives) {
        std::vector<T> bias(n * n, T(0));
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < n; ++c)
                if (r != c && r / n_segments == c / n_segments) bias[r * n + c] = T(-1e9);
        exclusion = Tensor<T>::from({n, n}, std::move(bias));
    }
    const auto direction_loss = [&](const Tensor<T>& logits) {
        const auto masked = exclusion.defined() ? tensor::add(logits, exclusion) : logits;
        return tensor::scale(tensor::sum(tensor::mul(tensor::log_softmax(masked), pick)), T(-1));
    };
    auto loss = direction_loss(sim);
    if (opts.symmetric) loss = tensor::add(loss, direction_loss(tensor::transpose(sim)));
    return loss;
}

template Tensor<float> infonce_loss(const Tensor<float>&, const Tensor<float>&, std::size_t, std::size_t,
                                    const InfoNceOptions&);
template Tensor<double> infonce_loss(const Tensor<double>&, const Tensor<double>&, std::size_t, std::size_t,
                                     const InfoNceOptions&);

namespace {

double row_cosine(const float* a, const float* b, std::size_t dim) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t d = 0; d < dim; ++d) {
        dot += static_cast<double>(a[d]) * b[d];
        na += static_cast<double>(a[d]) * a[d];
        nb += static_cast<double>(b[d]) * b[d];
    }
    if (na == 0 || nb == 0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

std::vector<double> track_scores(std::span<const float> query, std::size_t segments, const SegmentEmbeddings& pool) {
    const std::size_t dim = pool.dim;
    if (segments != pool.segments)
        throw ContractError("rank: query has " + std::to_string(segments) + " segments, pool items have " +
                            std::to_string(pool.segments));
    if (query.size() != segments * dim) throw DimensionError("rank: query size does not match L x D");
    std::vector<double> scores(pool.count);
    for (std::size_t j = 0; j < pool.count; ++j) {
        double total = 0;
        for (std::size_t l = 0; l < segments; ++l)
            total += row_cosine(query.data() + l * dim, pool.data.data() + (j * segments + l) * dim, dim);
        scores[j] = total / static_cast<double>(segments);
    }
    return scores;
}

std::vector<std::size_t> rank_candidates(std::span<const float> query, std::size_t segments,
                                         const SegmentEmbeddings& pool) {
    const auto scores = track_scores(query, segments, pool);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

std::vector<double> similarity_matrix(const SegmentEmbeddings& queries, const SegmentEmbeddings& pool) {
    if (queries.dim != pool.dim) throw ContractError("similarity: embedding widths differ");
    const std::size_t row = static_cast<std::size_t>(queries.segments) * queries.dim;
    std::vector<double> sim;
    sim.reserve(static_cast<std::size_t>(queries.count) * pool.count);
    for (std::size_t i = 0; i < queries.count; ++i) {
        const auto s = track_scores(std::span<const float>(queries.data).subspan(i * row, row), queries.segments, pool);
        sim.insert(sim.end(), s.begin(), s.end());
    }
    return sim;
}

std::vector<std::size_t> ranks_from_similarity(std::span<const double> sim, std::size_t n) {
    if (sim.size() != n * n) throw DimensionError("ranks: similarity matrix is not n x n");
    std::vector<std::size_t> ranks(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double target = sim[i * n + i];
        std::size_t ahead = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const double s = sim[i * n + j];
            if (s > target || (s == target && j < i)) ++ahead;
        }
        ranks[i] = ahead + 1;
    }
    return ranks;
}

std::string to_string(Direction d) { return d == Direction::VideoToMusic ? "V2M" : "M2V"; }

double RetrievalReport::recall_at(std::size_t k) const {
    for (std::size_t i = 0; i < ks.size(); ++i)
        if (ks[i] == k) return recall[i];
    throw ContractError("report has no Recall@" + std::to_string(k));
}

RetrievalReport score_report(std::span<const std::size_t> ranks, std::size_t n_candidates, Direction direction,
                             std::vector<std::size_t> ks) {
    if (ranks.empty()) throw InputError("score report: no ranks");
    RetrievalReport r;
    r.direction = direction;
    r.n = n_candidates;
    r.ks = std::move(ks);
    for (std::size_t k : r.ks) {
        const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t rank) { return rank <= k; });
        r.recall.push_back(100.0 * static_cast<double>(hits) / static_cast<double>(ranks.size()));
    }
    std::vector<std::size_t> sorted(ranks.begin(), ranks.end());
    std::sort(sorted.begin(), sorted.end());
    const std::size_t m = sorted.size();
    r.median_rank = m % 2 == 1 ? static_cast<double>(sorted[m / 2])
                               : 0.5 * static_cast<double>(sorted[m / 2 - 1] + sorted[m / 2]);
    return r;
}

RetrievalReport evaluate(const SegmentEmbeddings& queries, const SegmentEmbeddings& pool, Direction direction) {
    if (queries.count != pool.count) throw ContractError("evaluate: queries and pool must be aligned one to one");
    const auto ranks = ranks_from_similarity(similarity_matrix(queries, pool), pool.count);
    return score_report(ranks, pool.count, direction);
}

void write_report_header(std::ostream& out) { out << "direction,R@1,R@5,R@10,median_rank,N\n"; }

void write_report_row(std::ostream& out, const RetrievalReport& r) {
    out << to_string(r.direction) << ',' << r.recall_at(1) << ',' << r.recall_at(5) << ',' << r.recall_at(10) << ','
        << r.median_rank << ',' << r.n << '\n';
}

QueryOp query_op_from_string(const std::string& name) {
    if (name == "add") return QueryOp::Add;
    if (name == "sub") return QueryOp::Sub;
    throw InputError("unknown query op '" + name + "' (expected add or sub)");
}

std::vector<float> flexible_query(std::span<const float> m, std::size_t lm, std::span<const float> m_a,
                                  std::size_t la, std::size_t dim, QueryOp op) {
    if (m.size() != lm * dim || m_a.size() != la * dim) throw DimensionError("flexible query: sizes do not match L x D");
    const std::size_t rows = std::max(lm, la);
    std::vector<float> out(rows * dim, 0.0f);
    std::copy(m.begin(), m.end(), out.begin());
    const float sign = op == QueryOp::Add ? 1.0f : -1.0f;
    for (std::size_t i = 0; i < m_a.size(); ++i) out[i] += sign * m_a[i];
    return out;
}

Finetuner::Finetuner(TwoStream<float>& streams, const std::vector<pretrain::Sample>& samples, RetrievalConfig cfg,
                     std::uint64_t seed)
    : streams_(streams), samples_(samples), cfg_(cfg), seed_(seed), params_(streams.params()),
      adam_(params_, {cfg.beta1, cfg.beta2, cfg.weight_decay, 1e-8}) {
    cfg_.validate();
    if (samples_.empty()) throw InputError("fine-tuning needs at least one sample");
}

std::size_t Finetuner::steps_per_epoch() const { return (samples_.size() + cfg_.batch_size - 1) / cfg_.batch_size; }

std::size_t Finetuner::total_steps() const { return cfg_.epochs * steps_per_epoch(); }

FinetuneMetrics Finetuner::step() {
    const std::size_t spe = steps_per_epoch();
    FinetuneMetrics m;
    m.step = step_;
    m.lr = optim::lr_schedule(step_, cfg_.warmup_epochs * spe, total_steps(), cfg_.lr, cfg_.min_lr);

    std::vector<std::size_t> order(samples_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = make_rng(derive_seed(seed_, 0xf17e), step_ / spe);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const std::size_t begin = (step_ % spe) * cfg_.batch_size;
    const std::size_t end = std::min(begin + cfg_.batch_size, order.size());

    std::vector<std::vector<Image>> videos;
    std::vector<std::vector<Image>> audios;
    const std::uint64_t step_seed = derive_seed(seed_, step_);
    for (std::size_t i = begin; i < end; ++i) {
        const auto& s = samples_[order[i]];
        auto frames = s.frames;
        if (cfg_.augment) {
            Rng rng = make_rng(step_seed, s.id);
            for (auto& f : frames) f = signal::augment_frame(f, rng);
        }
        videos.push_back(std::move(frames));
        audios.push_back(modality_images(s, Modality::Audio));
    }
    optim::zero_grad(params_);
    const auto pv = embed_items(streams_.video, videos, streams_.patch);
    const auto pm = embed_items(streams_.audio, audios, streams_.patch);
    const auto loss = infonce_loss(pv, pm, videos.size(), videos.front().size(),
                                   {cfg_.tau, cfg_.symmetric, cfg_.exclude_same_item_negatives});
    m.loss = loss.item();
    if (!std::isfinite(m.loss))
        throw NonFiniteError("non-finite contrastive loss at step " + std::to_string(step_));
    tensor::backward(loss);
    adam_.step(params_, m.lr);
    ++step_;
    return m;
}

void Finetuner::run(const std::function<void(const FinetuneMetrics&)>& on_step, std::size_t max_steps) {
    std::size_t done = 0;
    while (step_ < total_steps() && (max_steps == 0 || done < max_steps)) {
        const auto m = step();
        ++done;
        if (on_step) on_step(m);
    }
}

void write_finetune_header(std::ostream& out) { out << "step,lr,loss\n"; }

void write_finetune_row(std::ostream& out, const FinetuneMetrics& m) {
    out << m.step << ',' << m.lr << ',' << m.loss << '\n';
}

}  // namespace cmmix::retrieval
