// SPDX-License-Identifier: Apache-2.0
#include "cmmix/signal.hpp"

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <mutex>
#include <numbers>

#include "cmmix/error.hpp"

namespace cmmix::signal {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kLogFloor = 1e-10;

// FFTW planning is not thread-safe; execution with new-array APIs is.
std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    const double i = std::floor(h * 6.0);
    const double f = h * 6.0 - i;
    const double p = v * (1.0 - s);
    const double q = v * (1.0 - f * s);
    const double t = v * (1.0 - (1.0 - f) * s);
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(i) % 6) {
        case 0: r = v, g = t, b = p; break;
        case 1: r = q, g = v, b = p; break;
        case 2: r = p, g = v, b = t; break;
        case 3: r = p, g = q, b = v; break;
        case 4: r = t, g = p, b = v; break;
        default: r = v, g = p, b = q; break;
    }
    return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

}  // namespace

std::size_t DataConfig::waveform_length() const {
    return static_cast<std::size_t>(std::llround(clip_seconds * sample_rate));
}

MelOptions mel_options(const DataConfig& data) {
    MelOptions opts;
    opts.sample_rate = data.sample_rate;
    opts.n_mels = data.n_mels;
    opts.image_size = data.image_size;
    return opts;
}

std::vector<double> partition_clips(double duration_s, std::size_t n_clips) {
    if (!(duration_s > 0.0)) throw InputError("partition_clips: duration must be positive");
    if (n_clips == 0) throw InputError("partition_clips: need at least one clip");
    const double t = duration_s / static_cast<double>(n_clips);
    std::vector<double> mids(n_clips);
    for (std::size_t k = 0; k < n_clips; ++k) mids[k] = (static_cast<double>(k) + 0.5) * t;
    return mids;
}

std::size_t stft_frame_count(std::size_t n_samples, std::size_t win_length, std::size_t hop_length) {
    if (n_samples < win_length) return 0;
    return 1 + (n_samples - win_length) / hop_length;
}

std::vector<double> stft_magnitude(std::span<const float> waveform, const StftOptions& opts, std::size_t& n_frames) {
    if (opts.win_length == 0 || opts.hop_length == 0 || opts.n_fft < opts.win_length)
        throw InputError("stft: invalid window configuration");
    if (waveform.size() < opts.win_length)
        throw InputError("stft: waveform of " + std::to_string(waveform.size()) +
                         " samples is shorter than one window (" + std::to_string(opts.win_length) + ")");
    n_frames = stft_frame_count(waveform.size(), opts.win_length, opts.hop_length);
    const std::size_t n_bins = opts.n_fft / 2 + 1;

    std::vector<double> window(opts.win_length);
    for (std::size_t i = 0; i < window.size(); ++i)
        window[i] = 0.5 - 0.5 * std::cos(kTwoPi * static_cast<double>(i) / static_cast<double>(opts.win_length - 1));

    auto* in = static_cast<double*>(fftw_malloc(sizeof(double) * opts.n_fft));
    auto* out = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n_bins));
    fftw_plan plan;
    {
        std::lock_guard lock(fftw_planner_mutex());
        plan = fftw_plan_dft_r2c_1d(static_cast<int>(opts.n_fft), in, out, FFTW_ESTIMATE);
    }

    std::vector<double> mag(n_frames * n_bins);
    for (std::size_t f = 0; f < n_frames; ++f) {
        const std::size_t start = f * opts.hop_length;
        std::fill(in, in + opts.n_fft, 0.0);
        for (std::size_t i = 0; i < opts.win_length; ++i) in[i] = window[i] * waveform[start + i];
        fftw_execute(plan);
        for (std::size_t b = 0; b < n_bins; ++b) mag[f * n_bins + b] = std::hypot(out[b][0], out[b][1]);
    }

    {
        std::lock_guard lock(fftw_planner_mutex());
        fftw_destroy_plan(plan);
    }
    fftw_free(in);
    fftw_free(out);
    return mag;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

namespace {

std::vector<double> mel_edge_frequencies(std::size_t n_mels, double sample_rate) {
    const double top = hz_to_mel(sample_rate / 2.0);
    std::vector<double> edges(n_mels + 2);
    for (std::size_t i = 0; i < edges.size(); ++i)
        edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(n_mels + 1));
    return edges;
}

}  // namespace

std::vector<double> mel_center_frequencies(std::size_t n_mels, double sample_rate) {
    auto edges = mel_edge_frequencies(n_mels, sample_rate);
    return {edges.begin() + 1, edges.end() - 1};
}

std::vector<double> mel_filterbank(std::size_t n_mels, std::size_t n_fft, double sample_rate) {
    const auto edges = mel_edge_frequencies(n_mels, sample_rate);
    const std::size_t n_bins = n_fft / 2 + 1;
    std::vector<double> bank(n_mels * n_bins, 0.0);
    for (std::size_t m = 0; m < n_mels; ++m) {
        const double lo = edges[m], center = edges[m + 1], hi = edges[m + 2];
        for (std::size_t b = 0; b < n_bins; ++b) {
            const double f = static_cast<double>(b) * sample_rate / static_cast<double>(n_fft);
            const double up = (f - lo) / (center - lo);
            const double down = (hi - f) / (hi - center);
            bank[m * n_bins + b] = std::max(0.0, std::min(up, down));
        }
    }
    return bank;
}

std::vector<double> log_mel(std::span<const float> waveform, const MelOptions& opts, std::size_t& n_frames) {
    StftOptions stft;
    stft.win_length = static_cast<std::size_t>(std::llround(opts.win_ms * opts.sample_rate / 1000.0));
    stft.hop_length = static_cast<std::size_t>(std::llround(opts.hop_ms * opts.sample_rate / 1000.0));
    stft.n_fft = std::max(opts.n_fft, stft.win_length);
    const auto mag = stft_magnitude(waveform, stft, n_frames);
    const std::size_t n_bins = stft.n_fft / 2 + 1;
    const auto bank = mel_filterbank(opts.n_mels, stft.n_fft, opts.sample_rate);

    std::vector<double> out(opts.n_mels * n_frames);
    for (std::size_t m = 0; m < opts.n_mels; ++m) {
        const double* filter = bank.data() + m * n_bins;
        for (std::size_t f = 0; f < n_frames; ++f) {
            const double* frame = mag.data() + f * n_bins;
            double energy = 0.0;
            for (std::size_t b = 0; b < n_bins; ++b) energy += filter[b] * frame[b];
            out[m * n_frames + f] = std::log(std::max(energy, kLogFloor));
        }
    }
    return out;
}

MelImage compute_mel(std::span<const float> waveform, const MelOptions& opts) {
    std::size_t n_frames = 0;
    const auto spec = log_mel(waveform, opts, n_frames);
    const auto [lo_it, hi_it] = std::minmax_element(spec.begin(), spec.end());
    const double lo = *lo_it, range = *hi_it - *lo_it;

    Image gray(opts.n_mels, n_frames, 1);
    for (std::size_t i = 0; i < spec.size(); ++i)
        gray.data[i] = range > 0.0 ? static_cast<float>((spec[i] - lo) / range) : 0.0f;
    const Image resized = resize_bilinear(gray, opts.image_size, opts.image_size);

    MelImage mel{Image(opts.image_size, opts.image_size, 3)};
    for (std::size_t i = 0; i < resized.data.size(); ++i)
        for (std::size_t c = 0; c < 3; ++c) mel.image.data[i * 3 + c] = std::clamp(resized.data[i], 0.0f, 1.0f);
    return mel;
}

CropFlip sample_crop_flip(Rng& rng, std::size_t height, std::size_t width, const AugmentOptions& opts) {
    std::uniform_real_distribution<double> scale_dist(opts.min_scale, opts.max_scale);
    std::uniform_real_distribution<double> log_ratio_dist(std::log(opts.min_ratio), std::log(opts.max_ratio));
    std::bernoulli_distribution flip_dist(opts.flip_probability);
    const double area = static_cast<double>(height * width);

    CropFlip params{0, 0, height, width, false};
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * scale_dist(rng);
        const double ratio = std::exp(log_ratio_dist(rng));
        const auto w = static_cast<std::size_t>(std::llround(std::sqrt(target * ratio)));
        const auto h = static_cast<std::size_t>(std::llround(std::sqrt(target / ratio)));
        if (w == 0 || h == 0 || w > width || h > height) continue;
        params.height = h;
        params.width = w;
        params.y0 = std::uniform_int_distribution<std::size_t>(0, height - h)(rng);
        params.x0 = std::uniform_int_distribution<std::size_t>(0, width - w)(rng);
        break;
    }
    params.flip = flip_dist(rng);
    return params;
}

Image apply_crop_flip(const Image& frame, const CropFlip& params) {
    Image out = resize_bilinear(crop(frame, params.y0, params.x0, params.height, params.width), frame.height,
                                frame.width);
    return params.flip ? flip_horizontal(out) : out;
}

Image augment_frame(const Image& frame, Rng& rng, const AugmentOptions& opts) {
    return apply_crop_flip(frame, sample_crop_flip(rng, frame.height, frame.width, opts));
}

SyntheticSpec draw_synthetic_spec(Rng& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double u = unit(rng);
    const double v = unit(rng);
    SyntheticSpec spec;
    spec.base_frequency = 200.0 * std::pow(10.0, u);
    spec.hue = 0.8 * u;
    spec.am_rate = 0.5 + 3.5 * v;
    spec.motion_speed = v;
    spec.seed = rng();
    return spec;
}

std::vector<ClipPair> synth_pair(const SyntheticSpec& spec, const DataConfig& data, const SynthOptions& opts) {
    const auto mids = partition_clips(opts.duration_s, data.n_clips);
    const std::size_t n_samples = data.waveform_length();
    const std::size_t size = data.image_size;
    const double sr = data.sample_rate;

    // nuisance factors fixed per video
    Rng video_rng = make_rng(spec.seed, 0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double x_start = unit(video_rng);
    const double y_center = 0.3 + 0.4 * unit(video_rng);
    const double phase1 = kTwoPi * unit(video_rng);
    const double phase2 = kTwoPi * unit(video_rng);

    const auto disc = hsv_to_rgb(spec.hue + 0.5, 0.9, 0.95);
    std::vector<ClipPair> clips;
    clips.reserve(data.n_clips);
    for (std::size_t k = 0; k < data.n_clips; ++k) {
        ClipPair clip;
        clip.clip_index = k;
        const double t_mid = mids[k];

        clip.frame = Image(size, size, 3);
        const double cx = std::fmod(x_start + 0.15 * spec.motion_speed * t_mid, 1.0);
        const double radius = 0.2;
        const double edge = 0.08;
        for (std::size_t y = 0; y < size; ++y) {
            const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(size);
            for (std::size_t x = 0; x < size; ++x) {
                const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(size);
                double dx = std::abs(fx - cx);
                dx = std::min(dx, 1.0 - dx);  // wrap around horizontally
                const double dy = fy - y_center;
                // soft edge: full disc color inside radius - edge, background beyond radius + edge
                const double dist = std::sqrt(dx * dx + dy * dy);
                const double w = std::clamp((radius + edge - dist) / (2.0 * edge), 0.0, 1.0);
                const double blend = w * w * (3.0 - 2.0 * w);
                const auto bg = hsv_to_rgb(spec.hue, 0.6, 0.3 + 0.5 * fx);
                for (std::size_t c = 0; c < 3; ++c)
                    clip.frame.at(y, x, c) = static_cast<float>(blend * disc[c] + (1.0 - blend) * bg[c]);
            }
        }

        Rng noise_rng = make_rng(spec.seed, k + 1);
        std::normal_distribution<double> noise(0.0, 1.0);
        clip.waveform.resize(n_samples);
        const double t_begin = t_mid - data.clip_seconds / 2.0;
        for (std::size_t n = 0; n < n_samples; ++n) {
            const double t = t_begin + static_cast<double>(n) / sr;
            const double envelope = 1.0 - 0.4 * (1.0 - std::cos(kTwoPi * spec.am_rate * t));
            const double tone = std::sin(kTwoPi * spec.base_frequency * t + phase1) +
                                0.5 * std::sin(kTwoPi * 2.0 * spec.base_frequency * t + phase2);
            const double jitter = opts.noise > 0.0 ? opts.noise * noise(noise_rng) : 0.0;
            clip.waveform[n] = static_cast<float>(opts.amplitude * envelope * tone + jitter);
        }
        clips.push_back(std::move(clip));
    }
    return clips;
}

}  // namespace cmmix::signal
