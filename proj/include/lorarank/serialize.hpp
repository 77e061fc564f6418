#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lorarank/error.hpp"
#include "lorarank/tensor.hpp"

namespace lorarank {

// Artifact emission goes through a temporary file in the same directory
// followed by an atomic rename, so readers never observe partial writes.
inline void atomic_write_file(const std::string& path, const std::string& contents) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp);
        throw IoError("cannot rename " + tmp.string() + " to " + path + ": " + ec.message());
    }
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return out;
}

// Binary checkpoint container: a JSON metadata blob plus named f64 tensors,
// all little-endian, bit-exact across save/load.
namespace ckpt {

inline constexpr std::uint64_t kMagic = 0x314B434B4E41524CULL;  // "LRANKCK1"
inline constexpr std::uint32_t kVersion = 1;

namespace detail {

template <typename T>
void put(std::string& out, T value) {
    out.append(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& cursor) {
    if (cursor + sizeof(T) > in.size()) throw IoError("checkpoint truncated");
    T value;
    std::memcpy(&value, in.data() + cursor, sizeof(T));
    cursor += sizeof(T);
    return value;
}

}  // namespace detail

inline void save(const std::string& path, const nlohmann::json& meta,
                 const std::vector<std::pair<std::string, Tensor>>& tensors) {
    std::string out;
    detail::put(out, kMagic);
    detail::put(out, kVersion);
    const std::string meta_str = meta.dump();
    detail::put<std::uint64_t>(out, meta_str.size());
    out += meta_str;
    detail::put<std::uint64_t>(out, tensors.size());
    for (const auto& [name, tensor] : tensors) {
        detail::put<std::uint64_t>(out, name.size());
        out += name;
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.ndim()));
        for (std::size_t d : tensor.shape()) detail::put<std::uint64_t>(out, d);
        out.append(reinterpret_cast<const char*>(tensor.data().data()),
                   tensor.numel() * sizeof(double));
    }
    atomic_write_file(path, out);
}

struct Loaded {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

inline Loaded load(const std::string& path) {
    const std::string in = read_file(path);
    std::size_t cursor = 0;
    if (detail::take<std::uint64_t>(in, cursor) != kMagic) {
        throw IoError(path + " is not a checkpoint (bad magic)");
    }
    const auto version = detail::take<std::uint32_t>(in, cursor);
    if (version != kVersion) {
        throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
    }
    Loaded result;
    const auto meta_len = detail::take<std::uint64_t>(in, cursor);
    if (cursor + meta_len > in.size()) throw IoError("checkpoint truncated");
    try {
        result.meta = nlohmann::json::parse(in.substr(cursor, meta_len));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": corrupt metadata: " + e.what());
    }
    cursor += meta_len;
    const auto n_tensors = detail::take<std::uint64_t>(in, cursor);
    for (std::uint64_t i = 0; i < n_tensors; ++i) {
        const auto name_len = detail::take<std::uint64_t>(in, cursor);
        if (cursor + name_len > in.size()) throw IoError("checkpoint truncated");
        std::string name = in.substr(cursor, name_len);
        cursor += name_len;
        const auto ndim = detail::take<std::uint32_t>(in, cursor);
        Shape shape(ndim);
        for (auto& d : shape) d = detail::take<std::uint64_t>(in, cursor);
        const std::size_t numel = shape_numel(shape);
        if (cursor + numel * sizeof(double) > in.size()) throw IoError("checkpoint truncated");
        std::vector<double> data(numel);
        std::memcpy(data.data(), in.data() + cursor, numel * sizeof(double));
        cursor += numel * sizeof(double);
        result.tensors.emplace_back(std::move(name), Tensor::from(shape, std::move(data)));
    }
    return result;
}

}  // namespace ckpt

}  // namespace lorarank
