#pragma once

// Dual-domain cross-attention: time features query frequency features and
// vice versa, each with a post-residual LayerNorm, then a two-layer FFN over
// the concatenated pair produces the fused sequence.

#include "untf/attention.hpp"

namespace untf {

template <class T>
struct DcmOutput {
    Tensor<T> time_prime, freq_prime, fused;
};

template <class T>
struct Dcm {
    MultiHeadAttention<T> time_queries_freq, freq_queries_time;
    LayerNorm<T> ln_time, ln_freq;
    Linear<T> ffn1, ffn2;

    Dcm() = default;
    Dcm(std::size_t D, std::size_t heads, std::size_t ffn_mult, Rng& rng)
        : time_queries_freq(D, heads, rng),
          freq_queries_time(D, heads, rng),
          ln_time(D),
          ln_freq(D),
          ffn1(2 * D, ffn_mult * D, rng),
          ffn2(ffn_mult * D, D, rng) {}

    DcmOutput<T> forward(const Tensor<T>& h_time, const Tensor<T>& h_freq, std::span<const std::uint8_t> valid) const {
        if (h_time.shape() != h_freq.shape()) shape_error("dcm", h_time.shape(), h_freq.shape());
        DcmOutput<T> out;
        out.time_prime = ln_time(add(h_time, time_queries_freq(h_time, h_freq, valid)));
        out.freq_prime = ln_freq(add(h_freq, freq_queries_time(h_freq, h_time, valid)));
        out.fused = ffn2(relu(ffn1(concat_last(out.time_prime, out.freq_prime))));
        return out;
    }

    Tensor<T> operator()(const Tensor<T>& h_time, const Tensor<T>& h_freq, std::span<const std::uint8_t> valid) const {
        return forward(h_time, h_freq, valid).fused;
    }

    void collect(ParamList<T>& out, const std::string& prefix) {
        time_queries_freq.collect(out, prefix + ".attn_tf");
        freq_queries_time.collect(out, prefix + ".attn_ft");
        ln_time.collect(out, prefix + ".ln_t");
        ln_freq.collect(out, prefix + ".ln_f");
        ffn1.collect(out, prefix + ".ffn1");
        ffn2.collect(out, prefix + ".ffn2");
    }
};

}  // namespace untf
