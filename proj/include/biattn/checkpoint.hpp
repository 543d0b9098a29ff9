#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "biattn/binary_io.hpp"
#include "biattn/params.hpp"
#include "biattn/tensor.hpp"

namespace biattn {

// Checkpoint layout, all little-endian:
//   "FSWT" | version u16 | count u32 |
//   count x { name_len u16 | name bytes | rank u8 | dims u32 x rank | f64 x numel }
inline constexpr char kCheckpointMagic[] = "FSWT";
inline constexpr std::uint16_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline Bytes encode_checkpoint(const NamedTensors& entries) {
    ByteWriter w;
    w.raw(std::string_view(kCheckpointMagic, 4));
    w.u16(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, t] : entries) {
        if (name.size() > UINT16_MAX) throw FormatError("tensor name too long: " + name);
        if (t.rank() > UINT8_MAX) throw FormatError("tensor rank too large: " + name);
        w.u16(static_cast<std::uint16_t>(name.size()));
        w.raw(name);
        w.u8(static_cast<std::uint8_t>(t.rank()));
        for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
        for (double v : t.data()) w.f64(v);
    }
    return w.take();
}

inline NamedTensors decode_checkpoint(const Bytes& bytes) {
    ByteReader r(bytes);
    if (bytes.size() < 4 || r.raw(4) != std::string_view(kCheckpointMagic, 4)) {
        throw BadMagicError("not a weight checkpoint (bad magic)");
    }
    const std::uint16_t version = r.u16();
    if (version != kCheckpointVersion) {
        throw HeaderMismatchError("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t count = r.u32();
    NamedTensors out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t len = r.u16();
        std::string name = r.raw(len);
        const std::uint8_t rank = r.u8();
        if (rank == 0) throw HeaderMismatchError("tensor " + name + " has rank 0");
        Shape shape(rank);
        for (auto& d : shape) {
            d = r.u32();
            if (d == 0) throw HeaderMismatchError("tensor " + name + " has a zero dimension");
        }
        const std::size_t n = numel(shape);
        if (r.remaining() / 8 < n) throw TruncatedError("checkpoint truncated inside tensor " + name);
        std::vector<double> data(n);
        for (double& v : data) v = r.f64();
        out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    if (r.remaining() != 0) throw HeaderMismatchError("trailing bytes after checkpoint tensors");
    return out;
}

inline NamedTensors to_named(const ParameterStore& store, const std::string& prefix = "") {
    NamedTensors out;
    for (const auto& name : store.names()) {
        Tensor t(store.get(name).shape(), store.get(name).data());
        out.emplace_back(prefix + name, std::move(t));
    }
    return out;
}

/// Copies matching entries into an existing store; shapes must agree and
/// every store parameter must be present.
inline void load_into(ParameterStore& store, const NamedTensors& entries, const std::string& prefix = "") {
    for (const auto& name : store.names()) {
        const std::string key = prefix + name;
        bool found = false;
        for (const auto& [n, t] : entries) {
            if (n != key) continue;
            Tensor& dst = store.get(name);
            if (dst.shape() != t.shape()) {
                throw HeaderMismatchError("checkpoint tensor " + key + " has shape " + to_string(t.shape()) +
                                          ", expected " + to_string(dst.shape()));
            }
            dst.data() = t.data();
            found = true;
            break;
        }
        if (!found) throw HeaderMismatchError("checkpoint is missing tensor " + key);
    }
}

inline void save_checkpoint(const std::string& path, const NamedTensors& entries) {
    write_file(path, encode_checkpoint(entries));
}

inline NamedTensors load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace biattn
