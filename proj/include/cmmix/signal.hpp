// SPDX-License-Identifier: Apache-2.0
//
// Raw media -> image-like inputs: clip partitioning, log-mel spectrograms
// replicated to three channels, frame augmentation, and a synthetic paired
// video/audio generator whose two modalities share latent factors.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cmmix/image.hpp"
#include "cmmix/random.hpp"

namespace cmmix::signal {

struct DataConfig {
    int sample_rate = 16000;
    double clip_seconds = 2.6;
    std::size_t n_clips = 8;
    std::size_t n_mels = 128;
    std::size_t image_size = 224;

    std::size_t waveform_length() const;
};

/// One clip of one video: mid-frame and the waveform slice around it.
struct ClipPair {
    std::size_t clip_index = 0;
    Image frame;
    std::vector<float> waveform;
};

/// Log-mel spectrogram rendered as an image; the three channels are identical.
struct MelImage {
    Image image;
};

/// Midpoints (seconds) of `n_clips` equal clips covering `duration_s`.
std::vector<double> partition_clips(double duration_s, std::size_t n_clips);

struct StftOptions {
    std::size_t win_length = 400;
    std::size_t hop_length = 160;
    std::size_t n_fft = 1024;
};

/// Frames fully inside the signal: 1 + (n - win) / hop.
std::size_t stft_frame_count(std::size_t n_samples, std::size_t win_length, std::size_t hop_length);

/// Magnitude STFT with a symmetric Hann window and no padding.
/// Result is frames x (n_fft/2 + 1), row-major.
std::vector<double> stft_magnitude(std::span<const float> waveform, const StftOptions& opts,
                                   std::size_t& n_frames);

double hz_to_mel(double hz);
double mel_to_hz(double mel);
/// Triangular HTK filter centers in Hz, lowest first.
std::vector<double> mel_center_frequencies(std::size_t n_mels, double sample_rate);
/// n_mels x (n_fft/2 + 1) triangular filterbank over [0, sample_rate/2].
std::vector<double> mel_filterbank(std::size_t n_mels, std::size_t n_fft, double sample_rate);

struct MelOptions {
    int sample_rate = 16000;
    double win_ms = 25.0;
    double hop_ms = 10.0;
    std::size_t n_mels = 128;
    std::size_t n_fft = 1024;
    std::size_t image_size = 224;
};

/// Log-mel matrix before resizing: n_mels rows (row = mel bin, low
/// frequencies first) by n_frames columns, floored at 1e-10 before the log.
std::vector<double> log_mel(std::span<const float> waveform, const MelOptions& opts, std::size_t& n_frames);

/// Full pipeline: log-mel -> per-image min-max to [0,1] -> bilinear resize
/// to image_size^2 -> three identical channels. A constant spectrogram maps to 0.
MelImage compute_mel(std::span<const float> waveform, const MelOptions& opts = {});

struct AugmentOptions {
    double min_scale = 0.5;
    double max_scale = 1.0;
    double min_ratio = 3.0 / 4.0;
    double max_ratio = 4.0 / 3.0;
    double flip_probability = 0.5;
};

struct CropFlip {
    std::size_t y0 = 0, x0 = 0, height = 0, width = 0;
    bool flip = false;
};

CropFlip sample_crop_flip(Rng& rng, std::size_t height, std::size_t width, const AugmentOptions& opts = {});
Image apply_crop_flip(const Image& frame, const CropFlip& params);
/// Random resized crop followed by an optional horizontal flip. Frames only.
Image augment_frame(const Image& frame, Rng& rng, const AugmentOptions& opts = {});

/// Latent factors shared by the two modalities of one synthetic video.
struct SyntheticSpec {
    double base_frequency = 440.0;  // Hz, in [200, 2000]
    double am_rate = 1.0;           // Hz
    double hue = 0.0;               // [0, 1)
    double motion_speed = 0.5;      // [0, 1]
    std::uint64_t seed = 0;
};

/// Draws a spec whose visual factors are tied to its audio factors
/// (hue follows log base frequency, motion follows modulation rate).
SyntheticSpec draw_synthetic_spec(Rng& rng);

struct SynthOptions {
    double duration_s = 20.0;
    double amplitude = 8000.0;
    double noise = 40.0;
};

std::vector<ClipPair> synth_pair(const SyntheticSpec& spec, const DataConfig& data, const SynthOptions& opts = {});

MelOptions mel_options(const DataConfig& data);

}  // namespace cmmix::signal
