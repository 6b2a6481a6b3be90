#pragma once

// Little-endian binary framing shared by the dataset and checkpoint files.
// A named tensor is: u32 name length, UTF-8 name, u8 dtype (0 = f32,
// 1 = f64), u32 rank, u32 extents[rank], payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "untf/numerics/tensor.hpp"

namespace untf {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

class BinaryWriter {
public:
    explicit BinaryWriter(std::ostream& os) : os_(os) {}

    template <class V>
    void put(V v) {
        os_.write(reinterpret_cast<const char*>(&v), sizeof(V));
        check();
    }
    void bytes(const void* p, std::size_t n) {
        os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        check();
    }
    void string(const std::string& s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

private:
    void check() {
        if (!os_) throw IoError("write failed");
    }
    std::ostream& os_;
};

class BinaryReader {
public:
    explicit BinaryReader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

    template <class V>
    V get() {
        V v{};
        bytes(&v, sizeof(V));
        return v;
    }
    void bytes(void* p, std::size_t n) {
        is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n)
            throw CorruptionError(what_ + ": truncated (wanted " + std::to_string(n) + " more bytes)");
    }
    std::string string(std::size_t max_len = 1u << 24) {
        const auto n = get<std::uint32_t>();
        if (n > max_len) throw CorruptionError(what_ + ": implausible string length " + std::to_string(n));
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }
    const std::string& what() const { return what_; }

private:
    std::istream& is_;
    std::string what_;
};

/// Writes values as f32 regardless of T: checkpoints are 32-bit.
template <class T>
void write_tensor(BinaryWriter& w, const std::string& name, const Tensor<T>& t) {
    w.string(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(DType::f32));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
    std::vector<float> buf(t.values().begin(), t.values().end());
    w.bytes(buf.data(), buf.size() * sizeof(float));
}

struct NamedValues {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

inline NamedValues read_tensor(BinaryReader& r) {
    NamedValues out;
    out.name = r.string(4096);
    const auto tag = r.get<std::uint8_t>();
    if (tag > 1) throw CorruptionError(r.what() + ": unknown dtype tag " + std::to_string(tag) + " for " + out.name);
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 8) throw CorruptionError(r.what() + ": bad rank for " + out.name);
    out.shape.resize(rank);
    std::size_t n = 1;
    for (auto& e : out.shape) {
        e = r.get<std::uint32_t>();
        if (e == 0 || e > (1u << 28)) throw CorruptionError(r.what() + ": bad extent for " + out.name);
        n *= e;
        if (n > (std::size_t{1} << 30)) throw CorruptionError(r.what() + ": tensor too large: " + out.name);
    }
    out.values.resize(n);
    if (static_cast<DType>(tag) == DType::f32) {
        std::vector<float> buf(n);
        r.bytes(buf.data(), n * sizeof(float));
        for (std::size_t i = 0; i < n; ++i) out.values[i] = buf[i];
    } else {
        r.bytes(out.values.data(), n * sizeof(double));
    }
    return out;
}

}  // namespace untf
