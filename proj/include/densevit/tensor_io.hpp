#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "densevit/params.hpp"
#include "densevit/tensor.hpp"

namespace densevit {

// "TNSR" dump format: 8-byte magic "TNSR\0\0\0\1", u32 little-endian rank,
// rank x u64 little-endian extents, then row-major f64 little-endian payload.

namespace detail {

inline const unsigned char kTnsrMagic[8] = {'T', 'N', 'S', 'R', 0, 0, 0, 1};

inline void write_u32_le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64_le(std::ostream& os, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    write_u64_le(os, bits);
}

inline std::uint32_t read_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t read_u64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline double read_f64_le(std::istream& is) {
    std::uint64_t bits = read_u64_le(is);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

} // namespace detail

inline void write_tnsr(std::ostream& os, const Tensor& t) {
    os.write(reinterpret_cast<const char*>(detail::kTnsrMagic), 8);
    detail::write_u32_le(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::write_u64_le(os, static_cast<std::uint64_t>(d));
    for (double v : t.values()) detail::write_f64_le(os, v);
}

inline void write_tnsr(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    detail::check(os.good(), "cannot open '" + path + "' for writing");
    write_tnsr(os, t);
    detail::check(os.good(), "write failed for '" + path + "'");
}

inline Tensor read_tnsr(std::istream& is) {
    unsigned char magic[8];
    is.read(reinterpret_cast<char*>(magic), 8);
    detail::check(is.good() && std::memcmp(magic, detail::kTnsrMagic, 8) == 0,
                  "not a TNSR stream (bad magic)");
    const std::uint32_t rank = detail::read_u32_le(is);
    detail::check(rank <= 8, "TNSR rank too large: " + std::to_string(rank));
    Shape shape(rank);
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        shape[i] = static_cast<std::size_t>(detail::read_u64_le(is));
        n *= shape[i];
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = detail::read_f64_le(is);
    detail::check(is.good(), "truncated TNSR stream");
    return Tensor(shape, std::move(data));
}

inline Tensor read_tnsr(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    detail::check(is.good(), "cannot open '" + path + "' for reading");
    return read_tnsr(is);
}

// Checkpoint container: u64 little-endian header length, JSON header
// (metadata + per-parameter name/offset/no_decay; offsets are relative to the
// first blob byte), then the TNSR blobs back to back in registry order.

inline void save_checkpoint(const std::string& path, const ParamRegistry& params,
                            const nlohmann::json& meta) {
    nlohmann::json header;
    header["format"] = "densevit-checkpoint-v1";
    header["meta"] = meta;
    nlohmann::json plist = nlohmann::json::array();

    std::vector<std::string> blobs;
    std::size_t offset = 0;
    for (const Param& p : params.list()) {
        std::ostringstream blob(std::ios::binary);
        write_tnsr(blob, p.tensor);
        std::string bytes = blob.str();
        plist.push_back({{"name", p.name},
                         {"offset", offset},
                         {"bytes", bytes.size()},
                         {"no_decay", p.no_decay}});
        offset += bytes.size();
        blobs.push_back(std::move(bytes));
    }
    header["params"] = std::move(plist);

    std::ofstream os(path, std::ios::binary);
    detail::check(os.good(), "cannot open checkpoint '" + path + "' for writing");
    const std::string hs = header.dump();
    detail::write_u64_le(os, hs.size());
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const std::string& b : blobs) os.write(b.data(), static_cast<std::streamsize>(b.size()));
    detail::check(os.good(), "checkpoint write failed for '" + path + "'");
}

// Loads parameter values into an already-built registry; every registry entry
// must be present with a matching shape. Returns the stored metadata.
inline nlohmann::json load_checkpoint(const std::string& path, ParamRegistry& params) {
    std::ifstream is(path, std::ios::binary);
    detail::check(is.good(), "cannot open checkpoint '" + path + "'");
    const std::uint64_t hlen = detail::read_u64_le(is);
    detail::check(is.good() && hlen > 0 && hlen < (1ull << 30), "corrupt checkpoint header");
    std::string hs(hlen, '\0');
    is.read(hs.data(), static_cast<std::streamsize>(hlen));
    nlohmann::json header = nlohmann::json::parse(hs);
    detail::check(header.value("format", "") == std::string("densevit-checkpoint-v1"),
                  "unknown checkpoint format in '" + path + "'");

    const std::streampos blob_base = is.tellg();
    for (Param& p : params.list()) {
        bool found = false;
        for (const auto& e : header["params"]) {
            if (e["name"] == p.name) {
                is.seekg(blob_base + static_cast<std::streamoff>(e["offset"].get<std::size_t>()));
                Tensor t = read_tnsr(is);
                detail::check(t.shape() == p.tensor.shape(),
                              "checkpoint/model-config mismatch: parameter '" + p.name +
                                  "' has shape " + detail::shape_str(t.shape()) +
                                  " on disk but " + detail::shape_str(p.tensor.shape()) +
                                  " in the model");
                p.tensor.mutable_values() = t.values();
                found = true;
                break;
            }
        }
        detail::check(found, "checkpoint/model-config mismatch: parameter '" + p.name +
                                 "' missing from '" + path + "'");
    }
    return header["meta"];
}

} // namespace densevit
