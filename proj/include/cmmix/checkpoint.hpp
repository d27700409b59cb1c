// SPDX-License-Identifier: Apache-2.0
//
// CMMX checkpoint container:
//   "CMMX" | u32 version | u32 config length | config JSON bytes |
//   repeated { u16 name length | name | u8 dtype (0 = f32) | u8 rank | u32 dims[rank] | f32 payload }
// All integers and floats little-endian.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cmmix/optim.hpp"

namespace cmmix::checkpoint {

inline constexpr std::uint32_t kVersion = 1;

struct ArrayRecord {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
};

struct Checkpoint {
    std::string config_json;
    std::vector<ArrayRecord> records;

    const ArrayRecord* find(const std::string& name) const;
};

std::string serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::string& bytes);

void save(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load(const std::filesystem::path& path);

template <typename T>
void append_params(std::vector<ArrayRecord>& out, const optim::ParamList<T>& params, const std::string& prefix = "");

/// Copies records named prefix + param.name into the parameters. Missing
/// records or shape mismatches raise IoError.
template <typename T>
void restore_params(optim::ParamList<T>& params, const Checkpoint& ckpt, const std::string& prefix = "");

/// Adam moments are stored as "<prefix>adam.m/<name>" and "<prefix>adam.v/<name>".
template <typename T>
void append_adam(std::vector<ArrayRecord>& out, const optim::ParamList<T>& params, const optim::Adam<T>& adam,
                 const std::string& prefix = "");
template <typename T>
void restore_adam(optim::Adam<T>& adam, const optim::ParamList<T>& params, const Checkpoint& ckpt,
                  const std::string& prefix = "");

}  // namespace cmmix::checkpoint
