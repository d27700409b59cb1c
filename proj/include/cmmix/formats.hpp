// SPDX-License-Identifier: Apache-2.0
//
// On-disk interchange formats other than checkpoints.
//
// CMMD (one video):  "CMMD" | u32 version | u32 n_clips | u32 image_size |
//                    per clip: f32 frame[image_size^2 * 3] then f32 waveform[41600]
// CMME (embeddings): "CMME" | u32 V | u32 L | u32 D | f32 payload[V*L*D]
// P6 portable pixmaps for image dumps.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cmmix/image.hpp"
#include "cmmix/signal.hpp"

namespace cmmix::formats {

inline constexpr std::uint32_t kCmmdVersion = 1;
inline constexpr std::size_t kCmmdWaveformLength = 41600;

struct VideoRecord {
    std::uint32_t n_clips = 0;
    std::uint32_t image_size = 0;
    std::vector<signal::ClipPair> clips;
};

VideoRecord make_record(std::vector<signal::ClipPair> clips);
std::string encode_cmmd(const VideoRecord& record);
VideoRecord decode_cmmd(const std::string& bytes);
void write_cmmd(const std::filesystem::path& path, const VideoRecord& record);
VideoRecord read_cmmd(const std::filesystem::path& path);
/// Every *.cmmd file in `dir`, sorted by file name. A missing directory raises IoError.
std::vector<std::filesystem::path> list_cmmd(const std::filesystem::path& dir);

struct EmbeddingTable {
    std::uint32_t count = 0;
    std::uint32_t segments = 0;
    std::uint32_t dim = 0;
    std::vector<float> data;
};

std::string encode_cmme(const EmbeddingTable& table);
EmbeddingTable decode_cmme(const std::string& bytes);
void write_cmme(const std::filesystem::path& path, const EmbeddingTable& table);
EmbeddingTable read_cmme(const std::filesystem::path& path);

/// Values are clamped to [0,1] and quantized to 8 bits.
std::string encode_ppm(const Image& image);
void write_ppm(const std::filesystem::path& path, const Image& image);

}  // namespace cmmix::formats
