// SPDX-License-Identifier: Apache-2.0
#include "cmmix/checkpoint.hpp"

#include <fstream>
#include <limits>
#include <sstream>

#include "cmmix/bytes.hpp"

namespace cmmix::bytes {

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + path.string() + "'");
}

}  // namespace cmmix::bytes

namespace cmmix::checkpoint {

namespace {

constexpr std::uint8_t kDtypeF32 = 0;

std::size_t element_count(const std::vector<std::uint32_t>& dims) {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

}  // namespace

const ArrayRecord* Checkpoint::find(const std::string& name) const {
    for (const auto& r : records)
        if (r.name == name) return &r;
    return nullptr;
}

std::string serialize(const Checkpoint& ckpt) {
    bytes::Writer w;
    w.magic("CMMX");
    w.integer<std::uint32_t>(kVersion);
    w.integer<std::uint32_t>(static_cast<std::uint32_t>(ckpt.config_json.size()));
    w.raw(ckpt.config_json.data(), ckpt.config_json.size());
    for (const auto& r : ckpt.records) {
        if (r.name.size() > std::numeric_limits<std::uint16_t>::max())
            throw IoError("checkpoint: record name too long: " + r.name.substr(0, 32) + "...");
        if (r.dims.size() > std::numeric_limits<std::uint8_t>::max())
            throw IoError("checkpoint: rank too large for '" + r.name + "'");
        if (element_count(r.dims) != r.data.size())
            throw IoError("checkpoint: dims of '" + r.name + "' do not match its payload");
        w.integer<std::uint16_t>(static_cast<std::uint16_t>(r.name.size()));
        w.raw(r.name.data(), r.name.size());
        w.integer<std::uint8_t>(kDtypeF32);
        w.integer<std::uint8_t>(static_cast<std::uint8_t>(r.dims.size()));
        for (auto d : r.dims) w.integer<std::uint32_t>(d);
        w.f32s(r.data);
    }
    return w.take();
}

Checkpoint deserialize(const std::string& bytes) {
    bytes::Reader r(bytes, "checkpoint");
    r.expect_magic("CMMX");
    const auto version = r.integer<std::uint32_t>();
    if (version != kVersion) throw IoError("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ckpt;
    ckpt.config_json = r.string(r.integer<std::uint32_t>());
    while (!r.done()) {
        ArrayRecord rec;
        rec.name = r.string(r.integer<std::uint16_t>());
        const auto dtype = r.integer<std::uint8_t>();
        if (dtype != kDtypeF32) throw IoError("checkpoint: record '" + rec.name + "' has unknown dtype");
        rec.dims.resize(r.integer<std::uint8_t>());
        for (auto& d : rec.dims) d = r.integer<std::uint32_t>();
        const std::size_t n = element_count(rec.dims);
        if (n * sizeof(float) > r.remaining()) throw IoError("checkpoint: record '" + rec.name + "' is truncated");
        rec.data.resize(n);
        r.f32s(rec.data);
        ckpt.records.push_back(std::move(rec));
    }
    return ckpt;
}

void save(const std::filesystem::path& path, const Checkpoint& ckpt) { bytes::write_file(path, serialize(ckpt)); }

Checkpoint load(const std::filesystem::path& path) { return deserialize(bytes::read_file(path)); }

template <typename T>
void append_params(std::vector<ArrayRecord>& out, const optim::ParamList<T>& params, const std::string& prefix) {
    for (const auto& p : params) {
        ArrayRecord rec;
        rec.name = prefix + p.name;
        for (auto d : p.value.shape()) rec.dims.push_back(static_cast<std::uint32_t>(d));
        rec.data.assign(p.value.data().begin(), p.value.data().end());
        out.push_back(std::move(rec));
    }
}

namespace {

const ArrayRecord& require_record(const Checkpoint& ckpt, const std::string& name, std::size_t size,
                                  const tensor::Shape* shape) {
    const ArrayRecord* rec = ckpt.find(name);
    if (!rec) throw IoError("checkpoint: missing record '" + name + "'");
    bool ok = rec->data.size() == size;
    if (ok && shape) {
        ok = rec->dims.size() == shape->size();
        for (std::size_t i = 0; ok && i < shape->size(); ++i) ok = rec->dims[i] == (*shape)[i];
    }
    if (!ok) throw IoError("checkpoint: record '" + name + "' has the wrong shape");
    return *rec;
}

}  // namespace

template <typename T>
void restore_params(optim::ParamList<T>& params, const Checkpoint& ckpt, const std::string& prefix) {
    for (auto& p : params) {
        const auto& rec = require_record(ckpt, prefix + p.name, p.value.size(), &p.value.shape());
        auto data = p.value.data();
        for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(rec.data[i]);
    }
}

template <typename T>
void append_adam(std::vector<ArrayRecord>& out, const optim::ParamList<T>& params, const optim::Adam<T>& adam,
                 const std::string& prefix) {
    const auto& m = adam.first_moments();
    const auto& v = adam.second_moments();
    for (std::size_t k = 0; k < params.size() && k < m.size(); ++k) {
        std::vector<std::uint32_t> dims;
        for (auto d : params[k].value.shape()) dims.push_back(static_cast<std::uint32_t>(d));
        out.push_back({prefix + "adam.m/" + params[k].name, dims, {m[k].begin(), m[k].end()}});
        out.push_back({prefix + "adam.v/" + params[k].name, dims, {v[k].begin(), v[k].end()}});
    }
}

template <typename T>
void restore_adam(optim::Adam<T>& adam, const optim::ParamList<T>& params, const Checkpoint& ckpt,
                  const std::string& prefix) {
    auto& m = adam.first_moments();
    auto& v = adam.second_moments();
    for (std::size_t k = 0; k < params.size() && k < m.size(); ++k) {
        const auto& rm = require_record(ckpt, prefix + "adam.m/" + params[k].name, m[k].size(), nullptr);
        const auto& rv = require_record(ckpt, prefix + "adam.v/" + params[k].name, v[k].size(), nullptr);
        m[k].assign(rm.data.begin(), rm.data.end());
        v[k].assign(rv.data.begin(), rv.data.end());
    }
}

template void append_params(std::vector<ArrayRecord>&, const optim::ParamList<float>&, const std::string&);
template void restore_params(optim::ParamList<float>&, const Checkpoint&, const std::string&);
template void restore_params(optim::ParamList<double>&, const Checkpoint&, const std::string&);
template void append_adam(std::vector<ArrayRecord>&, const optim::ParamList<float>&, const optim::Adam<float>&,
                          const std::string&);
template void restore_adam(optim::Adam<float>&, const optim::ParamList<float>&, const Checkpoint&, const std::string&);

}  // namespace cmmix::checkpoint
