// SPDX-License-Identifier: Apache-2.0
//
// Two-stream contrastive retrieval on top of a pre-trained encoder: segment
// embeddings, InfoNCE fine-tuning, candidate ranking, Recall@K / median rank
// and embedding arithmetic for flexible queries.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cmmix/formats.hpp"
#include "cmmix/image.hpp"
#include "cmmix/model.hpp"
#include "cmmix/optim.hpp"
#include "cmmix/pretrain.hpp"

namespace cmmix::retrieval {

struct RetrievalConfig {
    double tau = 0.3;
    bool symmetric = false;
    bool exclude_same_item_negatives = false;
    // fine-tuning schedule
    double lr = 2e-4;
    double min_lr = 1e-5;
    std::size_t epochs = 100;
    std::size_t warmup_epochs = 10;
    std::size_t batch_size = 32;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.95;
    bool augment = false;

    void validate() const;
};

enum class Modality { Video, Audio };

/// f^v and f^a: independent copies of one pre-trained encoder.
template <typename T>
struct TwoStream {
    model::Encoder<T> video;
    model::Encoder<T> audio;
    std::size_t patch = 16;

    static TwoStream from_encoder(const model::Encoder<T>& encoder, std::size_t patch);
    const model::Encoder<T>& stream(Modality m) const { return m == Modality::Video ? video : audio; }
    /// "video.*" then "audio.*".
    optim::ParamList<T> params() const;
};

/// Encodes the full, unmasked token sequence of each item and mean-pools the
/// tokens of every clip. Items are stacked; returns (items * clips) x D rows,
/// each L2-normalized.
template <typename T>
tensor::Tensor<T> embed_items(const model::Encoder<T>& encoder, const std::vector<std::vector<Image>>& items,
                              std::size_t patch);

/// L x D segment embeddings of one item.
template <typename T>
tensor::Tensor<T> embed(const model::Encoder<T>& encoder, std::span<const Image> clips, std::size_t patch);

/// V x L x D table of normalized segment embeddings.
using SegmentEmbeddings = formats::EmbeddingTable;

std::vector<Image> modality_images(const pretrain::Sample& sample, Modality m);
/// Forward-only embedding of every sample with one stream.
SegmentEmbeddings embed_samples(const model::Encoder<float>& encoder, const std::vector<pretrain::Sample>& samples,
                                Modality m, std::size_t patch, std::size_t chunk = 16);

struct InfoNceOptions {
    double tau = 0.3;
    bool symmetric = false;
    bool exclude_same_item_negatives = false;
};

/// Sum over (i, l) of -log softmax over every (j, l') of cosine / tau, with
/// the positive itself in the denominator. Inputs are (V * L) x D, item-major;
/// rows are normalized here, and a zero row is a contract error.
template <typename T>
tensor::Tensor<T> infonce_loss(const tensor::Tensor<T>& video, const tensor::Tensor<T>& audio, std::size_t n_items,
                               std::size_t n_segments, const InfoNceOptions& opts = {});

/// Score of each candidate: mean over aligned segments of the cosine between
/// query and candidate rows (both renormalized; a zero row scores 0).
std::vector<double> track_scores(std::span<const float> query, std::size_t segments, const SegmentEmbeddings& pool);
/// Candidate indices by descending score; ties go to the lower index.
std::vector<std::size_t> rank_candidates(std::span<const float> query, std::size_t segments,
                                         const SegmentEmbeddings& pool);

/// N x N query-by-candidate track scores, row-major.
std::vector<double> similarity_matrix(const SegmentEmbeddings& queries, const SegmentEmbeddings& pool);
/// 1-based rank of candidate i for query i under the documented tie-break.
std::vector<std::size_t> ranks_from_similarity(std::span<const double> sim, std::size_t n);

enum class Direction { VideoToMusic, MusicToVideo };
std::string to_string(Direction d);

struct RetrievalReport {
    Direction direction = Direction::VideoToMusic;
    std::size_t n = 0;
    std::vector<std::size_t> ks;
    std::vector<double> recall;  // percent, aligned with ks
    double median_rank = 0;

    double recall_at(std::size_t k) const;
};

RetrievalReport score_report(std::span<const std::size_t> ranks, std::size_t n_candidates, Direction direction,
                             std::vector<std::size_t> ks = {1, 5, 10});
/// Ranks and report for queries[i] against pool, ground truth pool[i].
RetrievalReport evaluate(const SegmentEmbeddings& queries, const SegmentEmbeddings& pool, Direction direction);

void write_report_header(std::ostream& out);
void write_report_row(std::ostream& out, const RetrievalReport& r);

enum class QueryOp { Add, Sub };
QueryOp query_op_from_string(const std::string& name);

/// Elementwise m +/- m_a over max(lm, la) segments, the shorter input padded
/// with zero rows. Not renormalized.
std::vector<float> flexible_query(std::span<const float> m, std::size_t lm, std::span<const float> m_a,
                                  std::size_t la, std::size_t dim, QueryOp op);

struct FinetuneMetrics {
    std::size_t step = 0;
    double lr = 0;
    double loss = 0;
};

/// Contrastive fine-tuning of both streams on aligned, unmixed, unmasked pairs.
class Finetuner {
public:
    Finetuner(TwoStream<float>& streams, const std::vector<pretrain::Sample>& samples, RetrievalConfig cfg,
              std::uint64_t seed);

    std::size_t steps_per_epoch() const;
    std::size_t total_steps() const;
    std::size_t steps_done() const { return step_; }

    FinetuneMetrics step();
    void run(const std::function<void(const FinetuneMetrics&)>& on_step, std::size_t max_steps = 0);

    optim::Adam<float>& optimizer() { return adam_; }
    optim::ParamList<float>& params() { return params_; }

private:
    TwoStream<float>& streams_;
    const std::vector<pretrain::Sample>& samples_;
    RetrievalConfig cfg_;
    std::uint64_t seed_;
    optim::ParamList<float> params_;
    optim::Adam<float> adam_;
    std::size_t step_ = 0;
};

void write_finetune_header(std::ostream& out);
void write_finetune_row(std::ostream& out, const FinetuneMetrics& m);

}  // namespace cmmix::retrieval
