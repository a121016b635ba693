#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctrl/graph.hpp"

namespace ctrl {

// Flat container: one version byte, a header listing (name, dtype, shape)
// per tensor, then the payloads as little-endian f64 in header order.

inline constexpr std::uint8_t kCheckpointVersion = 1;

namespace detail {

inline void write_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void write_u32(std::ostream& os, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void write_f64(std::ostream& os, double d) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(d));
    std::memcpy(&bits, &d, sizeof(bits));
    write_u64(os, bits);
}

inline std::uint8_t read_u8(std::istream& is) {
    const int c = is.get();
    if (c == EOF) throw std::runtime_error("checkpoint: unexpected end of file");
    return static_cast<std::uint8_t>(c);
}

inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(read_u8(is)) << (8 * i);
    return v;
}

inline std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(read_u8(is)) << (8 * i);
    return v;
}

inline double read_f64(std::istream& is) {
    const std::uint64_t bits = read_u64(is);
    double d;
    std::memcpy(&d, &bits, sizeof(d));
    return d;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const diff::ParameterStore& store) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    detail::write_u8(os, kCheckpointVersion);
    const auto& names = store.names();
    detail::write_u32(os, static_cast<std::uint32_t>(names.size()));
    for (const std::string& name : names) {
        const diff::Tensor& t = store.value(name);
        detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        const std::string dtype = "f64";
        detail::write_u8(os, static_cast<std::uint8_t>(dtype.size()));
        os.write(dtype.data(), static_cast<std::streamsize>(dtype.size()));
        detail::write_u32(os, static_cast<std::uint32_t>(t.shape.size()));
        for (std::size_t d : t.shape) detail::write_u64(os, d);
    }
    for (const std::string& name : names) {
        const diff::Tensor& t = store.value(name);
        for (double v : t.data) detail::write_f64(os, v);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

/// Loads every tensor in the file. Existing parameters are overwritten
/// (shapes must match); unknown names are created.
inline void load_checkpoint(const std::string& path, diff::ParameterStore& store) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    const std::uint8_t version = detail::read_u8(is);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t count = detail::read_u32(is);
    std::vector<std::string> names(count);
    std::vector<diff::Shape> shapes(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::read_u32(is);
        names[i].resize(name_len);
        is.read(names[i].data(), name_len);
        const std::uint8_t dtype_len = detail::read_u8(is);
        std::string dtype(dtype_len, '\0');
        is.read(dtype.data(), dtype_len);
        if (dtype != "f64") throw std::runtime_error("checkpoint: unsupported dtype '" + dtype + "'");
        const std::uint32_t ndim = detail::read_u32(is);
        shapes[i].resize(ndim);
        for (std::uint32_t d = 0; d < ndim; ++d) shapes[i][d] = static_cast<std::size_t>(detail::read_u64(is));
        if (!is) throw std::runtime_error("checkpoint: truncated header");
    }
    for (std::uint32_t i = 0; i < count; ++i) {
        diff::Tensor t(shapes[i]);
        for (double& v : t.data) v = detail::read_f64(is);
        if (store.has(names[i])) {
            diff::Tensor& dst = store.value(names[i]);
            if (dst.shape != t.shape)
                throw std::runtime_error("checkpoint: shape mismatch for '" + names[i] + "'");
            dst = std::move(t);
        } else {
            store.add(names[i], std::move(t));
        }
    }
}

}  // namespace ctrl
