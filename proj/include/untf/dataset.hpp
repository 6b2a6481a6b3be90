#pragma once

// Dataset file: magic "EEGB", u32 version, u32 B, R, E, T, fs, u8 label flag,
// L length-prefixed slot names (empty = padding), f32 payload [B, R, E, T],
// then B u32 labels when the flag is set. Little-endian throughout.

#include <fstream>
#include <string>
#include <vector>

#include "untf/numerics/serialize.hpp"
#include "untf/preprocess.hpp"

namespace untf {

inline constexpr char kDatasetMagic[4] = {'E', 'E', 'G', 'B'};
inline constexpr std::uint32_t kDatasetVersion = 1;

struct Dataset {
    EegBatch samples;
    std::vector<std::string> slot_names;  // L entries

    std::size_t size() const { return samples.B; }
    bool labeled() const { return !samples.labels.empty(); }

    std::size_t classes() const {
        std::int32_t mx = -1;
        for (auto y : samples.labels) mx = std::max(mx, y);
        return static_cast<std::size_t>(mx + 1);
    }

    /// The listed samples as a batch, in the given order.
    EegBatch subset(std::span<const std::size_t> idx) const {
        const auto& s = samples;
        EegBatch out = EegBatch::zeros(idx.size(), s.R, s.E, s.T);
        out.fs = s.fs;
        const std::size_t L = s.L(), row = L * s.T;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= s.B) throw ValidationError("dataset: sample index out of range");
            std::copy_n(s.data.begin() + static_cast<std::ptrdiff_t>(idx[i] * row), row,
                        out.data.begin() + static_cast<std::ptrdiff_t>(i * row));
            std::copy_n(s.valid.begin() + static_cast<std::ptrdiff_t>(idx[i] * L), L,
                        out.valid.begin() + static_cast<std::ptrdiff_t>(i * L));
            if (labeled()) out.labels.push_back(s.labels[idx[i]]);
        }
        return out;
    }
};

inline void write_dataset(const std::string& path, const Dataset& ds) {
    const auto& s = ds.samples;
    if (s.B == 0) throw ValidationError("dataset: no samples to write");
    if (ds.slot_names.size() != s.L()) throw ValidationError("dataset: slot name table does not match L");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot create " + path);
    BinaryWriter w(f);
    w.bytes(kDatasetMagic, 4);
    w.put<std::uint32_t>(kDatasetVersion);
    for (auto v : {s.B, s.R, s.E, s.T}) w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(std::lround(s.fs)));
    w.put<std::uint8_t>(ds.labeled() ? 1 : 0);
    for (const auto& n : ds.slot_names) w.string(n);
    w.bytes(s.data.data(), s.data.size() * sizeof(float));
    for (auto y : s.labels) w.put<std::uint32_t>(static_cast<std::uint32_t>(y));
}

inline Dataset read_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open dataset " + path);
    BinaryReader r(f, path);
    char magic[4];
    r.bytes(magic, 4);
    if (!std::equal(magic, magic + 4, kDatasetMagic)) throw CorruptionError(path + ": not a dataset file (bad magic)");
    if (auto v = r.get<std::uint32_t>(); v != kDatasetVersion)
        throw CorruptionError(path + ": unsupported dataset version " + std::to_string(v));
    Dataset ds;
    auto& s = ds.samples;
    s.B = r.get<std::uint32_t>();
    s.R = r.get<std::uint32_t>();
    s.E = r.get<std::uint32_t>();
    s.T = r.get<std::uint32_t>();
    s.fs = r.get<std::uint32_t>();
    const auto flag = r.get<std::uint8_t>();
    if (s.B == 0) throw ValidationError(path + ": empty dataset");
    if (s.R == 0 || s.E == 0 || s.T == 0 || flag > 1) throw CorruptionError(path + ": invalid header");
    const std::size_t L = s.L();
    if (static_cast<double>(s.B) * static_cast<double>(L) * static_cast<double>(s.T) > 4e9)
        throw CorruptionError(path + ": header declares an implausible payload");
    std::vector<std::uint8_t> slot_valid(L);
    for (std::size_t l = 0; l < L; ++l) {
        ds.slot_names.push_back(r.string(256));
        slot_valid[l] = ds.slot_names.back().empty() ? 0 : 1;
    }
    s.data.resize(s.B * L * s.T);
    r.bytes(s.data.data(), s.data.size() * sizeof(float));
    for (float v : s.data)
        if (!std::isfinite(v)) throw CorruptionError(path + ": non-finite sample value");
    s.valid.resize(s.B * L);
    for (std::size_t b = 0; b < s.B; ++b) std::copy(slot_valid.begin(), slot_valid.end(), s.valid.begin() + static_cast<std::ptrdiff_t>(b * L));
    if (flag) {
        for (std::size_t b = 0; b < s.B; ++b) s.labels.push_back(static_cast<std::int32_t>(r.get<std::uint32_t>()));
    }
    if (!r.at_end()) throw CorruptionError(path + ": trailing bytes after payload");
    return ds;
}

}  // namespace untf
