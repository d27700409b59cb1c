// SPDX-License-Identifier: Apache-2.0
#include "cmmix/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

#include "cmmix/bytes.hpp"
#include "cmmix/formats.hpp"

namespace cmmix::pretrain {

using tensor::Tensor;

void TrainRunConfig::validate() const {
    if (epochs == 0) throw ConfigError("train.epochs", "must be at least 1");
    if (batch_size == 0) throw ConfigError("train.batch_size", "must be at least 1");
    if (warmup_epochs >= epochs) throw ConfigError("train.warmup_epochs", "must be smaller than train.epochs");
    if (!(lr > 0)) throw ConfigError("train.lr", "must be positive");
    if (!(min_lr >= 0) || min_lr > lr) throw ConfigError("train.min_lr", "must lie in [0, train.lr]");
    if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay", "must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
        throw ConfigError("train.betas", "each beta must lie in [0, 1)");
    if (!(mask_ratio >= 0 && mask_ratio < 1)) throw ConfigError("train.mask_ratio", "must lie in [0, 1)");
    if (!(keep_masked_fraction > 0 && keep_masked_fraction <= 1))
        throw ConfigError("train.keep_masked_fraction", "must lie in (0, 1]");
}

double default_lr(model::DecoderKind kind) { return kind == model::DecoderKind::Solo ? 2e-4 : 1e-4; }

Sample prepare_sample(const std::vector<signal::ClipPair>& clips, const signal::DataConfig& data, std::uint64_t id) {
    if (clips.empty()) throw InputError("sample " + std::to_string(id) + " has no clips");
    Sample s;
    s.id = id;
    const auto mel_opts = signal::mel_options(data);
    for (const auto& clip : clips) {
        const Image& f = clip.frame;
        s.frames.push_back(f.height == data.image_size && f.width == data.image_size
                               ? f
                               : resize_bilinear(f, data.image_size, data.image_size));
        s.mels.push_back(signal::compute_mel(clip.waveform, mel_opts));
    }
    return s;
}

std::vector<Sample> load_samples(const std::filesystem::path& dir, const signal::DataConfig& data) {
    std::vector<Sample> out;
    for (const auto& path : formats::list_cmmd(dir)) {
        const auto rec = formats::read_cmmd(path);
        if (rec.n_clips != data.n_clips)
            throw InputError(path.string() + ": " + std::to_string(rec.n_clips) + " clips, config expects " +
                             std::to_string(data.n_clips));
        out.push_back(prepare_sample(rec.clips, data, out.size()));
    }
    if (out.empty()) throw IoError("no .cmmd records in '" + dir.string() + "'");
    return out;
}

PretrainItem make_pretrain_item(const Sample& sample, const model::ViTConfig& model_cfg,
                                const mixer::MixerConfig& mixer_cfg, const TrainRunConfig& train,
                                std::uint64_t item_seed) {
    if (sample.n_clips() != model_cfg.n_clips)
        throw InputError("sample " + std::to_string(sample.id) + " has " + std::to_string(sample.n_clips()) +
                         " clips, model expects " + std::to_string(model_cfg.n_clips));
    Rng aug_rng = make_rng(item_seed, 1);
    Rng mask_rng = make_rng(item_seed, 2);
    Rng layout_rng = make_rng(item_seed, 3);
    const std::uint64_t mix_seed = derive_seed(item_seed, 4);

    std::vector<Image> frames;
    std::vector<Image> mels;
    std::vector<Image> mixed;
    PretrainItem item;
    for (std::size_t k = 0; k < sample.n_clips(); ++k) {
        frames.push_back(train.augment ? signal::augment_frame(sample.frames[k], aug_rng) : sample.frames[k]);
        mels.push_back(sample.mels[k].image);
        auto m = mixer::mix_clip(frames.back(), sample.mels[k], mixer_cfg, mix_seed, sample.id, k);
        mixed.push_back(std::move(m.image));
        item.provenance.push_back(std::move(m.provenance));
    }
    item.mixed = patch::patchify(mixed, model_cfg.patch).tokens;
    item.video_targets = patch::patchify(frames, model_cfg.patch).tokens;
    item.audio_targets = patch::patchify(mels, model_cfg.patch).tokens;
    if (train.norm_pix_loss) {
        const std::size_t pd = model_cfg.geometry().patch_dim();
        for (auto* targets : {&item.video_targets, &item.audio_targets}) {
            for (std::size_t r = 0; r < targets->size() / pd; ++r) {
                float* row = targets->data() + r * pd;
                double mean = 0, var = 0;
                for (std::size_t c = 0; c < pd; ++c) mean += row[c];
                mean /= static_cast<double>(pd);
                for (std::size_t c = 0; c < pd; ++c) var += (row[c] - mean) * (row[c] - mean);
                var /= static_cast<double>(pd);
                const double inv = 1.0 / std::sqrt(var + 1e-6);
                for (std::size_t c = 0; c < pd; ++c) row[c] = static_cast<float>((row[c] - mean) * inv);
            }
        }
    }
    item.plan = patch::random_mask(mask_rng, model_cfg.geometry().n_tokens(), train.mask_ratio);
    item.layout = patch::decoder_layout(item.plan, train.keep_masked_fraction, &layout_rng);
    return item;
}

namespace {

template <typename T>
Tensor<T> modality_mse(const Tensor<T>& pred, std::span<const float> targets, std::span<const std::size_t> rows,
                       std::span<const std::size_t> positions) {
    const std::size_t pd = pred.dim(1);
    std::vector<T> tgt(rows.size() * pd);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::size_t token = positions[rows[i]];
        if ((token + 1) * pd > targets.size()) throw DimensionError("reconstruction loss: target rows out of range");
        std::copy_n(targets.begin() + static_cast<std::ptrdiff_t>(token * pd), pd,
                    tgt.begin() + static_cast<std::ptrdiff_t>(i * pd));
    }
    const auto diff = tensor::sub(tensor::gather_rows(pred, rows), Tensor<T>::from({rows.size(), pd}, std::move(tgt)));
    return tensor::mean(tensor::mul(diff, diff));
}

}  // namespace

template <typename T>
LossParts<T> reconstruction_loss(const Tensor<T>& pred_video, const Tensor<T>& pred_audio,
                                 std::span<const float> video_targets, std::span<const float> audio_targets,
                                 const patch::DecoderLayout& layout, bool loss_on_all) {
    const std::size_t n = layout.positions.size();
    if (pred_video.rank() != 2 || pred_audio.rank() != 2 || pred_video.shape() != pred_audio.shape() ||
        pred_video.dim(0) != n || layout.source.size() != n)
        throw DimensionError("reconstruction loss: predictions " + tensor::shape_str(pred_video.shape()) + " and " +
                             tensor::shape_str(pred_audio.shape()) + " do not match a layout of " +
                             std::to_string(n) + " rows");
    if (video_targets.size() != audio_targets.size())
        throw DimensionError("reconstruction loss: target sizes differ");
    std::vector<std::size_t> rows;
    if (!loss_on_all)
        for (std::size_t i = 0; i < n; ++i)
            if (layout.source[i] < 0) rows.push_back(i);
    LossParts<T> out;
    if (rows.empty()) {
        rows.resize(n);
        std::iota(rows.begin(), rows.end(), std::size_t{0});
        out.used_all_positions = true;
    }
    out.loss_v = modality_mse(pred_video, video_targets, rows, layout.positions);
    out.loss_a = modality_mse(pred_audio, audio_targets, rows, layout.positions);
    out.loss = tensor::scale(tensor::add(out.loss_v, out.loss_a), T(0.5));
    return out;
}

template <typename T>
LossParts<T> pretrain_loss(const model::Model<T>& model, const PretrainItem& item, bool loss_on_all) {
    const std::size_t pd = model.config().geometry().patch_dim();
    std::vector<T> mixed(item.mixed.begin(), item.mixed.end());
    const auto patches = Tensor<T>::from({item.mixed.size() / pd, pd}, std::move(mixed));
    const auto rec = model.forward(patches, item.plan, item.layout);
    return reconstruction_loss(rec.video, rec.audio, item.video_targets, item.audio_targets, item.layout, loss_on_all);
}

template LossParts<float> reconstruction_loss(const Tensor<float>&, const Tensor<float>&, std::span<const float>,
                                              std::span<const float>, const patch::DecoderLayout&, bool);
template LossParts<double> reconstruction_loss(const Tensor<double>&, const Tensor<double>&, std::span<const float>,
                                               std::span<const float>, const patch::DecoderLayout&, bool);
template LossParts<float> pretrain_loss(const model::Model<float>&, const PretrainItem&, bool);
template LossParts<double> pretrain_loss(const model::Model<double>&, const PretrainItem&, bool);

Pretrainer::Pretrainer(model::Model<float>& model, const std::vector<Sample>& samples, mixer::MixerConfig mixer_cfg,
                       TrainRunConfig train)
    : model_(model), samples_(samples), mixer_(mixer_cfg), train_(train), params_(model.params()),
      adam_(params_, train.adam()) {
    train_.validate();
    if (samples_.empty()) throw InputError("pre-training needs at least one sample");
}

std::size_t Pretrainer::steps_per_epoch() const {
    return (samples_.size() + train_.batch_size - 1) / train_.batch_size;
}

std::size_t Pretrainer::total_steps() const { return train_.epochs * steps_per_epoch(); }

std::vector<std::size_t> Pretrainer::batch_indices(std::size_t step) const {
    const std::size_t spe = steps_per_epoch();
    std::vector<std::size_t> order(samples_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = make_rng(derive_seed(train_.seed, 0xba7c4), step / spe);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t begin = (step % spe) * train_.batch_size;
    const std::size_t end = std::min(begin + train_.batch_size, order.size());
    return {order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end)};
}

StepMetrics Pretrainer::step() {
    const std::size_t spe = steps_per_epoch();
    StepMetrics m;
    m.step = step_;
    m.lr = optim::lr_schedule(step_, train_.warmup_epochs * spe, total_steps(), train_.lr, train_.min_lr);
    const auto batch = batch_indices(step_);
    const float weight = 1.0f / static_cast<float>(batch.size());
    optim::zero_grad(params_);
    const std::uint64_t step_seed = derive_seed(train_.seed, step_);
    for (std::size_t idx : batch) {
        const Sample& s = samples_[idx];
        const auto item = make_pretrain_item(s, model_.config(), mixer_, train_, derive_seed(step_seed, s.id));
        auto parts = pretrain_loss(model_, item, train_.loss_on_all);
        const double l = parts.loss.item();
        if (!std::isfinite(l)) {
            nlohmann::json diag = {{"step", step_},
                                   {"lr", m.lr},
                                   {"sample_id", s.id},
                                   {"loss_v", static_cast<double>(parts.loss_v.item())},
                                   {"loss_a", static_cast<double>(parts.loss_a.item())}};
            if (!diagnostic_dir.empty())
                bytes::write_file(diagnostic_dir / "nonfinite.json", diag.dump(2) + "\n");
            throw NonFiniteError("non-finite loss at step " + std::to_string(step_) + ": " + diag.dump());
        }
        m.used_all_positions = m.used_all_positions || parts.used_all_positions;
        m.loss += l * weight;
        m.loss_v += parts.loss_v.item() * weight;
        m.loss_a += parts.loss_a.item() * weight;
        tensor::backward(tensor::scale(parts.loss, weight));
    }
    adam_.step(params_, m.lr);
    ++step_;
    return m;
}

void Pretrainer::run(const std::function<void(const StepMetrics&)>& on_step, std::size_t max_steps) {
    std::size_t done = 0;
    while (step_ < total_steps() && (max_steps == 0 || done < max_steps)) {
        const auto m = step();
        ++done;
        if (on_step) on_step(m);
    }
}

void write_metrics_header(std::ostream& out) { out << "step,lr,loss,loss_v,loss_a\n"; }

void write_metrics_row(std::ostream& out, const StepMetrics& m) {
    out << m.step << ',' << m.lr << ',' << m.loss << ',' << m.loss_v << ',' << m.loss_a << '\n';
}

namespace {

ModalityDump dump_modality(std::span<const float> targets, std::span<const float> mixed, std::span<const float> pred,
                           const patch::MaskPlan& plan, const patch::PatchGeometry& geo) {
    const std::size_t pd = geo.patch_dim();
    ModalityDump d;
    d.prediction.assign(pred.begin(), pred.end());
    std::vector<float> recon(targets.begin(), targets.end());
    std::vector<float> masked(mixed.begin(), mixed.end());
    for (std::size_t t : plan.masked) {
        std::copy_n(pred.begin() + static_cast<std::ptrdiff_t>(t * pd), pd,
                    recon.begin() + static_cast<std::ptrdiff_t>(t * pd));
        std::fill_n(masked.begin() + static_cast<std::ptrdiff_t>(t * pd), pd, 0.0f);
    }
    d.original = patch::unpatchify(targets, geo);
    d.masked_mixture = patch::unpatchify(masked, geo);
    d.reconstruction = patch::unpatchify(recon, geo);
    return d;
}

}  // namespace

ReconstructionDump reconstruct(const model::Model<float>& model, const Sample& sample,
                               const mixer::MixerConfig& mixer_cfg, double mask_ratio, std::uint64_t seed) {
    TrainRunConfig eval;
    eval.augment = false;
    eval.mask_ratio = mask_ratio;
    const auto item = make_pretrain_item(sample, model.config(), mixer_cfg, eval, derive_seed(seed, sample.id));
    const auto geo = model.config().geometry();
    const std::size_t pd = geo.patch_dim();
    tensor::NoGradGuard no_grad;
    const auto patches = Tensor<float>::from({geo.n_tokens(), pd}, item.mixed);
    const auto rec = model.forward(patches, item.plan, item.layout);
    ReconstructionDump out;
    out.plan = item.plan;
    out.video = dump_modality(item.video_targets, item.mixed, rec.video.data(), item.plan, geo);
    out.audio = dump_modality(item.audio_targets, item.mixed, rec.audio.data(), item.plan, geo);
    return out;
}

Image triptych(const ModalityDump& dump) {
    if (dump.original.empty()) throw InputError("triptych: no clips");
    const std::size_t s = dump.original.front().height;
    const std::size_t n = dump.original.size();
    Image out(n * s, 3 * s, 3);
    for (std::size_t k = 0; k < n; ++k) {
        const Image* panels[3] = {&dump.original[k], &dump.masked_mixture[k], &dump.reconstruction[k]};
        for (std::size_t p = 0; p < 3; ++p)
            for (std::size_t y = 0; y < s; ++y)
                for (std::size_t x = 0; x < s; ++x)
                    for (std::size_t c = 0; c < 3; ++c) out.at(k * s + y, p * s + x, c) = panels[p]->at(y, x, c);
    }
    return out;
}

void write_reconstruction(const ReconstructionDump& dump, const std::filesystem::path& dir) {
    formats::write_ppm(dir / "video.ppm", triptych(dump.video));
    formats::write_ppm(dir / "audio.ppm", triptych(dump.audio));
}

}  // namespace cmmix::pretrain
