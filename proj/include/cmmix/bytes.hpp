// SPDX-License-Identifier: Apache-2.0
//
// Little-endian packing helpers shared by the binary file formats.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <type_traits>

#include "cmmix/error.hpp"

namespace cmmix::bytes {

template <typename U>
U to_little(U v) {
    static_assert(std::is_integral_v<U>);
    if constexpr (std::endian::native == std::endian::big) {
        U out = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) out = static_cast<U>((out << 8) | ((v >> (8 * i)) & 0xff));
        return out;
    }
    return v;
}

class Writer {
public:
    void raw(const void* p, std::size_t n) { buffer_.append(static_cast<const char*>(p), n); }
    void magic(const char (&tag)[5]) { raw(tag, 4); }

    template <typename U>
    void integer(U v) {
        const U le = to_little(v);
        raw(&le, sizeof(U));
    }

    void f32(float v) { integer(std::bit_cast<std::uint32_t>(v)); }
    void f32s(std::span<const float> values) {
        if constexpr (std::endian::native == std::endian::little) {
            raw(values.data(), values.size_bytes());
        } else {
            for (float v : values) f32(v);
        }
    }

    const std::string& str() const { return buffer_; }
    std::string take() { return std::move(buffer_); }

private:
    std::string buffer_;
};

class Reader {
public:
    Reader(const std::string& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    void raw(void* p, std::size_t n) {
        if (pos_ + n > bytes_.size()) throw IoError(what_ + ": truncated at byte " + std::to_string(pos_));
        std::memcpy(p, bytes_.data() + pos_, n);
        pos_ += n;
    }

    void expect_magic(const char (&tag)[5]) {
        char got[4];
        raw(got, 4);
        if (std::memcmp(got, tag, 4) != 0) throw IoError(what_ + ": bad magic, expected " + std::string(tag, 4));
    }

    template <typename U>
    U integer() {
        U v;
        raw(&v, sizeof(U));
        return to_little(v);
    }

    float f32() { return std::bit_cast<float>(integer<std::uint32_t>()); }
    void f32s(std::span<float> out) {
        if constexpr (std::endian::native == std::endian::little) {
            raw(out.data(), out.size_bytes());
        } else {
            for (float& v : out) v = f32();
        }
    }

    std::string string(std::size_t n) {
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    const std::string& bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

/// Whole-file read; a missing file raises IoError.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace cmmix::bytes
