// SPDX-License-Identifier: Apache-2.0
#include "cmmix/formats.hpp"

#include <algorithm>
#include <cmath>

#include "cmmix/bytes.hpp"

namespace cmmix::formats {

VideoRecord make_record(std::vector<signal::ClipPair> clips) {
    if (clips.empty()) throw InputError("cmmd: a record needs at least one clip");
    VideoRecord rec;
    rec.n_clips = static_cast<std::uint32_t>(clips.size());
    rec.image_size = static_cast<std::uint32_t>(clips.front().frame.height);
    rec.clips = std::move(clips);
    return rec;
}

std::string encode_cmmd(const VideoRecord& record) {
    if (record.clips.size() != record.n_clips) throw InputError("cmmd: clip count does not match header");
    bytes::Writer w;
    w.magic("CMMD");
    w.integer<std::uint32_t>(kCmmdVersion);
    w.integer<std::uint32_t>(record.n_clips);
    w.integer<std::uint32_t>(record.image_size);
    for (const auto& clip : record.clips) {
        const Image& f = clip.frame;
        if (f.height != record.image_size || f.width != record.image_size || f.channels != 3)
            throw InputError("cmmd: frame of clip " + std::to_string(clip.clip_index) + " is not " +
                             std::to_string(record.image_size) + "^2 x 3");
        if (clip.waveform.size() != kCmmdWaveformLength)
            throw InputError("cmmd: waveform of clip " + std::to_string(clip.clip_index) + " has " +
                             std::to_string(clip.waveform.size()) + " samples, format requires " +
                             std::to_string(kCmmdWaveformLength));
        w.f32s(f.data);
        w.f32s(clip.waveform);
    }
    return w.take();
}

VideoRecord decode_cmmd(const std::string& bytes) {
    bytes::Reader r(bytes, "cmmd");
    r.expect_magic("CMMD");
    const auto version = r.integer<std::uint32_t>();
    if (version != kCmmdVersion) throw IoError("cmmd: unsupported version " + std::to_string(version));
    VideoRecord rec;
    rec.n_clips = r.integer<std::uint32_t>();
    rec.image_size = r.integer<std::uint32_t>();
    const std::size_t frame_values = static_cast<std::size_t>(rec.image_size) * rec.image_size * 3;
    if ((frame_values + kCmmdWaveformLength) * sizeof(float) * rec.n_clips != r.remaining())
        throw IoError("cmmd: payload size does not match header");
    for (std::uint32_t k = 0; k < rec.n_clips; ++k) {
        signal::ClipPair clip;
        clip.clip_index = k;
        clip.frame = Image(rec.image_size, rec.image_size, 3);
        r.f32s(clip.frame.data);
        clip.waveform.resize(kCmmdWaveformLength);
        r.f32s(clip.waveform);
        rec.clips.push_back(std::move(clip));
    }
    return rec;
}

void write_cmmd(const std::filesystem::path& path, const VideoRecord& record) {
    bytes::write_file(path, encode_cmmd(record));
}

VideoRecord read_cmmd(const std::filesystem::path& path) {
    try {
        return decode_cmmd(bytes::read_file(path));
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

std::vector<std::filesystem::path> list_cmmd(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw IoError("data directory '" + dir.string() + "' does not exist");
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".cmmd") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    return files;
}

std::string encode_cmme(const EmbeddingTable& table) {
    if (table.data.size() != static_cast<std::size_t>(table.count) * table.segments * table.dim)
        throw InputError("cmme: payload size does not match V x L x D");
    bytes::Writer w;
    w.magic("CMME");
    w.integer<std::uint32_t>(table.count);
    w.integer<std::uint32_t>(table.segments);
    w.integer<std::uint32_t>(table.dim);
    w.f32s(table.data);
    return w.take();
}

EmbeddingTable decode_cmme(const std::string& bytes) {
    bytes::Reader r(bytes, "cmme");
    r.expect_magic("CMME");
    EmbeddingTable t;
    t.count = r.integer<std::uint32_t>();
    t.segments = r.integer<std::uint32_t>();
    t.dim = r.integer<std::uint32_t>();
    const std::size_t n = static_cast<std::size_t>(t.count) * t.segments * t.dim;
    if (n * sizeof(float) != r.remaining()) throw IoError("cmme: payload size does not match header");
    t.data.resize(n);
    r.f32s(t.data);
    return t;
}

void write_cmme(const std::filesystem::path& path, const EmbeddingTable& table) {
    bytes::write_file(path, encode_cmme(table));
}

EmbeddingTable read_cmme(const std::filesystem::path& path) { return decode_cmme(bytes::read_file(path)); }

std::string encode_ppm(const Image& image) {
    if (image.channels != 3) throw InputError("ppm: expected a 3-channel image");
    std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
    out.reserve(out.size() + image.data.size());
    for (float v : image.data)
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
    return out;
}

void write_ppm(const std::filesystem::path& path, const Image& image) { bytes::write_file(path, encode_ppm(image)); }

}  // namespace cmmix::formats
