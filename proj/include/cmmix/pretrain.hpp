// SPDX-License-Identifier: Apache-2.0
//
// Fuse-then-separate pre-training: mix video and audio clips, mask the
// mixture, and reconstruct the two ORIGINAL modalities from what is visible.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <vector>

#include "cmmix/mixer.hpp"
#include "cmmix/model.hpp"
#include "cmmix/optim.hpp"
#include "cmmix/patch.hpp"
#include "cmmix/signal.hpp"

namespace cmmix::pretrain {

struct TrainRunConfig {
    std::size_t epochs = 400;
    std::size_t batch_size = 32;
    std::size_t warmup_epochs = 80;
    double lr = 2e-4;
    double min_lr = 1e-5;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double mask_ratio = 0.5;
    std::uint64_t seed = 0;
    bool augment = true;
    bool loss_on_all = false;
    bool norm_pix_loss = false;
    double keep_masked_fraction = 1.0;

    void validate() const;
    optim::AdamOptions adam() const { return {beta1, beta2, weight_decay, 1e-8}; }
};

/// Base learning rate for each decoder kind.
double default_lr(model::DecoderKind kind);

/// One video ready for training: raw mid-frames and their mel images.
struct Sample {
    std::uint64_t id = 0;
    std::vector<Image> frames;
    std::vector<signal::MelImage> mels;

    std::size_t n_clips() const { return frames.size(); }
};

Sample prepare_sample(const std::vector<signal::ClipPair>& clips, const signal::DataConfig& data, std::uint64_t id);

/// Reads every *.cmmd record in `dir` (sorted by name); sample ids follow that order.
std::vector<Sample> load_samples(const std::filesystem::path& dir, const signal::DataConfig& data);

/// Everything one pre-training forward needs for one sample.
struct PretrainItem {
    std::vector<float> mixed;          // n_tokens x 3P^2, encoder input before masking
    std::vector<float> video_targets;  // n_tokens x 3P^2, from the (augmented) frames
    std::vector<float> audio_targets;  // n_tokens x 3P^2, from the mel images
    patch::MaskPlan plan;
    patch::DecoderLayout layout;
    std::vector<mixer::MixProvenance> provenance;
};

/// Augments frames (when enabled), fuses every clip with a fresh mask, patchifies
/// and draws a masking plan. Mixer, augmentation and masking use independent
/// streams derived from `item_seed`, so the mixer choice never changes targets.
PretrainItem make_pretrain_item(const Sample& sample, const model::ViTConfig& model_cfg,
                                const mixer::MixerConfig& mixer_cfg, const TrainRunConfig& train,
                                std::uint64_t item_seed);

template <typename T>
struct LossParts {
    tensor::Tensor<T> loss;  // (loss_v + loss_a) / 2
    tensor::Tensor<T> loss_v;
    tensor::Tensor<T> loss_a;
    bool used_all_positions = false;
};

/// Mean squared error over masked positions only (all positions when
/// `loss_on_all` or when nothing is masked), averaged over the two
/// modalities. Prediction rows follow `layout.positions`; targets hold
/// every token.
template <typename T>
LossParts<T> reconstruction_loss(const tensor::Tensor<T>& pred_video, const tensor::Tensor<T>& pred_audio,
                                 std::span<const float> video_targets, std::span<const float> audio_targets,
                                 const patch::DecoderLayout& layout, bool loss_on_all = false);

/// Forward pass plus loss for one item.
template <typename T>
LossParts<T> pretrain_loss(const model::Model<T>& model, const PretrainItem& item, bool loss_on_all = false);

struct StepMetrics {
    std::size_t step = 0;
    double lr = 0;
    double loss = 0;
    double loss_v = 0;
    double loss_a = 0;
    bool used_all_positions = false;  // nothing was masked, loss fell back to every token
};

/// Sequential trainer over a fixed sample set. Epoch = one pass; the
/// schedule runs in steps = epochs * ceil(n / batch).
class Pretrainer {
public:
    Pretrainer(model::Model<float>& model, const std::vector<Sample>& samples, mixer::MixerConfig mixer_cfg,
               TrainRunConfig train);

    std::size_t steps_per_epoch() const;
    std::size_t total_steps() const;
    std::size_t steps_done() const { return step_; }

    /// One optimizer step over the next batch.
    StepMetrics step();
    /// Runs the remaining steps (or `max_steps` of them when non-zero).
    void run(const std::function<void(const StepMetrics&)>& on_step, std::size_t max_steps = 0);

    optim::Adam<float>& optimizer() { return adam_; }
    optim::ParamList<float>& params() { return params_; }

    /// Where a diagnostic dump goes when a loss turns non-finite (none when empty).
    std::filesystem::path diagnostic_dir;

private:
    std::vector<std::size_t> batch_indices(std::size_t step) const;

    model::Model<float>& model_;
    const std::vector<Sample>& samples_;
    mixer::MixerConfig mixer_;
    TrainRunConfig train_;
    optim::ParamList<float> params_;
    optim::Adam<float> adam_;
    std::size_t step_ = 0;
};

void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const StepMetrics& m);

struct ModalityDump {
    std::vector<Image> original;
    std::vector<Image> masked_mixture;
    std::vector<Image> reconstruction;  // visible patches copied from the original
    std::vector<float> prediction;      // raw head output, n_tokens x 3P^2
};

struct ReconstructionDump {
    ModalityDump video;
    ModalityDump audio;
    patch::MaskPlan plan;
};

/// Reconstructs both modalities of one sample with a fresh mask (no augmentation).
ReconstructionDump reconstruct(const model::Model<float>& model, const Sample& sample,
                               const mixer::MixerConfig& mixer_cfg, double mask_ratio, std::uint64_t seed);

/// n_clips rows of (original | masked mixture | reconstruction) panels.
Image triptych(const ModalityDump& dump);
/// Writes video.ppm and audio.ppm into `dir`.
void write_reconstruction(const ReconstructionDump& dump, const std::filesystem::path& dir);

}  // namespace cmmix::pretrain
