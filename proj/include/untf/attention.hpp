#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "untf/numerics/layers.hpp"

namespace untf {

inline constexpr double kRopeBase = 10000.0;

/// Rotary position encoding over the last axis of x [..., L, d]: pair
/// (2i, 2i+1) at position m is rotated by m * base^(-2i/d).
template <class T>
Tensor<T> rope_rotate(const Tensor<T>& x, std::span<const std::int64_t> positions, double base = kRopeBase) {
    if (x.rank() < 2) shape_error("rope", "expected [..., L, d], got " + to_string(x.shape()));
    const std::size_t d = x.shape().back(), L = x.shape()[x.rank() - 2];
    if (d % 2) shape_error("rope", "feature dimension " + std::to_string(d) + " is odd");
    if (positions.size() != L)
        shape_error("rope", std::to_string(positions.size()) + " positions for sequence length " + std::to_string(L));
    const std::size_t half = d / 2, groups = x.size() / (L * d);
    std::vector<T> cs(L * half), sn(L * half);
    for (std::size_t m = 0; m < L; ++m)
        for (std::size_t i = 0; i < half; ++i) {
            const double theta = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
            const double ang = static_cast<double>(positions[m]) * theta;
            cs[m * half + i] = static_cast<T>(std::cos(ang));
            sn[m * half + i] = static_cast<T>(std::sin(ang));
        }
    auto rotate = [=](const T* in, T* out, T sign) {
        for (std::size_t g = 0; g < groups; ++g)
            for (std::size_t m = 0; m < L; ++m)
                for (std::size_t i = 0; i < half; ++i) {
                    const std::size_t o = (g * L + m) * d + 2 * i;
                    const T c = cs[m * half + i], s = sign * sn[m * half + i];
                    const T a = in[o], b = in[o + 1];
                    out[o] += c * a - s * b;
                    out[o + 1] += s * a + c * b;
                }
    };
    std::vector<T> out(x.size(), T(0));
    rotate(x.values().data(), out.data(), T(1));
    return make_result<T>("rope", x.shape(), std::move(out), {x.node()}, [rotate](detail::Node<T>& self) {
        // Rotations are orthogonal: the adjoint rotates back.
        rotate(self.grad.data(), detail::gbuf(self.inputs[0]), T(-1));
    });
}

/// Multi-head scaled dot-product attention with queries from one sequence
/// and keys/values from another. Keys flagged invalid are excluded; RoPE is
/// applied to queries and keys when positions are supplied.
template <class T>
struct MultiHeadAttention {
    Linear<T> q, k, v, o;
    std::size_t heads = 1;

    MultiHeadAttention() = default;
    MultiHeadAttention(std::size_t D, std::size_t h, Rng& rng) : q(D, D, rng), k(D, D, rng), v(D, D, rng), o(D, D, rng), heads(h) {
        if (h == 0 || D % h) throw ValidationError("attention: heads " + std::to_string(h) + " must divide D=" + std::to_string(D));
    }

    /// weights_out, when given, receives the [B, h, L, L] attention matrix.
    Tensor<T> operator()(const Tensor<T>& q_src, const Tensor<T>& kv_src, std::span<const std::uint8_t> key_valid,
                         std::span<const std::int64_t> positions = {}, std::vector<T>* weights_out = nullptr) const {
        if (q_src.rank() != 3 || q_src.shape() != kv_src.shape()) shape_error("attention", q_src.shape(), kv_src.shape());
        const std::size_t B = q_src.dim(0), L = q_src.dim(1), D = q_src.dim(2), dh = D / heads;
        if (key_valid.size() != B * L)
            shape_error("attention", "key mask holds " + std::to_string(key_valid.size()) + " flags for B*L=" + std::to_string(B * L));
        for (std::size_t b = 0; b < B; ++b) {
            bool any = false;
            for (std::size_t j = 0; j < L; ++j) any = any || key_valid[b * L + j];
            if (!any) throw ValidationError("attention: every key of sample " + std::to_string(b) + " is masked");
        }
        auto split = [&](const Tensor<T>& t) { return permute(reshape(t, {B, L, heads, dh}), {0, 2, 1, 3}); };
        auto Q = split(q(q_src));
        auto K = split(k(kv_src));
        auto V = split(v(kv_src));
        if (!positions.empty()) {
            Q = rope_rotate(Q, positions);
            K = rope_rotate(K, positions);
        }
        auto scores = scale(bmm(Q, transpose(K, 2, 3)), T(1) / std::sqrt(static_cast<T>(dh)));
        std::vector<std::uint8_t> mask(B * heads * L * L);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t i = 0; i < L; ++i)
                    for (std::size_t j = 0; j < L; ++j) mask[((b * heads + h) * L + i) * L + j] = key_valid[b * L + j];
        auto P = softmax(scores, mask);
        if (weights_out) weights_out->assign(P.values().begin(), P.values().end());
        auto ctx = reshape(permute(bmm(P, V), {0, 2, 1, 3}), {B, L, D});
        return o(ctx);
    }

    void collect(ParamList<T>& out, const std::string& prefix) {
        q.collect(out, prefix + ".q");
        k.collect(out, prefix + ".k");
        v.collect(out, prefix + ".v");
        o.collect(out, prefix + ".o");
    }
};

}  // namespace untf
