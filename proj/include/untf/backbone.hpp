#pragma once

// Pre-norm Transformer blocks with RoPE self-attention over the electrode
// axis and a sparsely-routed mixture-of-experts FFN.

#include <algorithm>
#include <numeric>
#include <vector>

#include "untf/attention.hpp"

namespace untf {

/// Per-expert routing counts over valid tokens plus the (differentiable)
/// sum of full-softmax gate probabilities over the same tokens.
template <class T>
struct RoutingStats {
    std::size_t k = 1;
    std::size_t tokens = 0;
    std::vector<std::size_t> counts;  // tokens with expert j in their top-k
    Tensor<T> prob_sum;               // [N_e]

    std::size_t experts() const { return counts.size(); }

    /// f_j, normalized so that sum_j f_j = 1.
    std::vector<double> fractions() const {
        std::vector<double> f(counts.size(), 0.0);
        for (std::size_t j = 0; j < counts.size(); ++j)
            f[j] = static_cast<double>(counts[j]) / static_cast<double>(k * tokens);
        return f;
    }

    std::vector<double> mean_probs() const {
        std::vector<double> p(counts.size());
        for (std::size_t j = 0; j < p.size(); ++j) p[j] = static_cast<double>(prob_sum[j]) / static_cast<double>(tokens);
        return p;
    }

    RoutingStats merged(const RoutingStats& o) const {
        if (o.counts.size() != counts.size() || o.k != k) throw ValidationError("routing stats: incompatible merge");
        RoutingStats out{k, tokens + o.tokens, counts, add(prob_sum, o.prob_sum)};
        for (std::size_t j = 0; j < counts.size(); ++j) out.counts[j] += o.counts[j];
        return out;
    }
};

/// L_aux = alpha * N_e * sum_j f_j * mean_prob_j.
template <class T>
Tensor<T> aux_loss(const RoutingStats<T>& stats, double alpha) {
    if (stats.tokens == 0) throw ValidationError("aux_loss: no routed tokens");
    const auto f = stats.fractions();
    const double c = alpha * static_cast<double>(stats.experts()) / static_cast<double>(stats.tokens);
    std::vector<T> w(f.size());
    for (std::size_t j = 0; j < f.size(); ++j) w[j] = static_cast<T>(c * f[j]);
    const std::size_t n = w.size();
    return sum(mul(stats.prob_sum, Tensor<T>::from({n}, std::move(w))));
}

/// Top-k experts of one logit row, ties to the lowest index.
template <class T>
std::vector<std::size_t> top_k(std::span<const T> logits, std::size_t k) {
    std::vector<std::size_t> idx(logits.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
    idx.resize(k);
    return idx;
}

/// probs [N, N_e] -> gate weights [N, N_e]: selected probabilities
/// renormalized to sum to one, zeros elsewhere.
template <class T>
Tensor<T> renormalized_gates(const Tensor<T>& probs, const std::vector<std::vector<std::size_t>>& selected) {
    const std::size_t N = probs.dim(0), Ne = probs.dim(1);
    std::vector<T> out(N * Ne, T(0)), denom(N);
    for (std::size_t n = 0; n < N; ++n) {
        T s = 0;
        for (auto j : selected[n]) s += probs[n * Ne + j];
        denom[n] = s;
        for (auto j : selected[n]) out[n * Ne + j] = probs[n * Ne + j] / s;
    }
    return make_result<T>("topk_gates", {N, Ne}, out, {probs.node()}, [N, Ne, selected, denom, w = out](detail::Node<T>& self) {
        T* gp = detail::gbuf(self.inputs[0]);
        for (std::size_t n = 0; n < N; ++n) {
            T dot = 0;
            for (auto j : selected[n]) dot += self.grad[n * Ne + j] * w[n * Ne + j];
            for (auto j : selected[n]) gp[n * Ne + j] += (self.grad[n * Ne + j] - dot) / denom[n];
        }
    });
}

/// out[rows[r]] = gates[rows[r], expert] * y[r]; other rows zero. Shape [N, D].
template <class T>
Tensor<T> scatter_weighted(const Tensor<T>& y, const Tensor<T>& gates, const std::vector<std::size_t>& rows, std::size_t expert,
                           std::size_t N) {
    const std::size_t D = y.dim(1), Ne = gates.dim(1);
    std::vector<T> out(N * D, T(0));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const T g = gates[rows[r] * Ne + expert];
        for (std::size_t d = 0; d < D; ++d) out[rows[r] * D + d] = g * y[r * D + d];
    }
    return make_result<T>("scatter_weighted", {N, D}, std::move(out), {y.node(), gates.node()},
                          [rows, expert, D, Ne](detail::Node<T>& self) {
                              const auto& yv = self.inputs[0]->value;
                              const auto& gv = self.inputs[1]->value;
                              T* gy = detail::gbuf(self.inputs[0]);
                              T* gg = detail::gbuf(self.inputs[1]);
                              for (std::size_t r = 0; r < rows.size(); ++r) {
                                  const T* go = self.grad.data() + rows[r] * D;
                                  if (gy)
                                      for (std::size_t d = 0; d < D; ++d) gy[r * D + d] += gv[rows[r] * Ne + expert] * go[d];
                                  if (gg) {
                                      T s = 0;
                                      for (std::size_t d = 0; d < D; ++d) s += go[d] * yv[r * D + d];
                                      gg[rows[r] * Ne + expert] += s;
                                  }
                              }
                          });
}

template <class T>
struct Expert {
    Linear<T> fc1, fc2;
    Expert() = default;
    Expert(std::size_t D, std::size_t hidden, Rng& rng) : fc1(D, hidden, rng), fc2(hidden, D, rng) {}
    Tensor<T> operator()(const Tensor<T>& x) const { return fc2(relu(fc1(x))); }
};

template <class T>
struct MoeOutput {
    Tensor<T> out;
    RoutingStats<T> stats;
    Tensor<T> probs;  // full softmax [N, N_e]
    std::vector<std::vector<std::size_t>> selected;
};

template <class T>
struct Moe {
    Tensor<T> gate;  // W_g [D, N_e]
    std::vector<Expert<T>> experts;

    Moe() = default;
    Moe(std::size_t D, std::size_t n_experts, std::size_t hidden, Rng& rng) {
        if (n_experts == 0) throw ValidationError("moe: need at least one expert");
        gate = uniform_param<T>({D, n_experts}, 1.0 / std::sqrt(static_cast<double>(D)), rng);
        for (std::size_t j = 0; j < n_experts; ++j) experts.emplace_back(D, hidden, rng);
    }

    /// h [..., D]; token_valid (one flag per token, empty = all valid)
    /// limits which tokens enter the routing statistics.
    MoeOutput<T> forward(const Tensor<T>& h, std::size_t k, std::span<const std::uint8_t> token_valid = {}) const {
        const std::size_t Ne = experts.size(), D = h.shape().back(), N = h.size() / D;
        if (k < 1 || k > Ne) throw ValidationError("moe: top_k " + std::to_string(k) + " outside [1, " + std::to_string(Ne) + "]");
        if (!token_valid.empty() && token_valid.size() != N) shape_error("moe", "token mask does not match token count");
        auto x = reshape(h, {N, D});
        auto logits = matmul(x, gate);
        auto probs = softmax(logits);
        MoeOutput<T> res;
        res.selected.resize(N);
        std::vector<std::vector<std::size_t>> rows(Ne);
        for (std::size_t n = 0; n < N; ++n) {
            res.selected[n] = top_k<T>(logits.values().subspan(n * Ne, Ne), k);
            for (auto j : res.selected[n]) rows[j].push_back(n);
        }
        auto gates = renormalized_gates(probs, res.selected);
        Tensor<T> out;
        for (std::size_t j = 0; j < Ne; ++j) {
            if (rows[j].empty()) continue;
            auto y = experts[j](gather_rows(x, rows[j]));
            auto part = scatter_weighted(y, gates, rows[j], j, N);
            out = out.defined() ? add(out, part) : part;
        }
        res.out = reshape(out, h.shape());

        std::vector<T> tokmask(N, T(1));
        res.stats.k = k;
        res.stats.counts.assign(Ne, 0);
        for (std::size_t n = 0; n < N; ++n) {
            const bool ok = token_valid.empty() || token_valid[n];
            tokmask[n] = ok ? T(1) : T(0);
            if (!ok) continue;
            ++res.stats.tokens;
            for (auto j : res.selected[n]) ++res.stats.counts[j];
        }
        res.stats.prob_sum = reshape(matmul(Tensor<T>::from({1, N}, tokmask), probs), {Ne});
        res.probs = probs;
        return res;
    }

    void collect(ParamList<T>& out, const std::string& prefix) {
        out.push_back({prefix + ".gate", &gate});
        for (std::size_t j = 0; j < experts.size(); ++j) {
            experts[j].fc1.collect(out, prefix + ".expert" + std::to_string(j) + ".fc1");
            experts[j].fc2.collect(out, prefix + ".expert" + std::to_string(j) + ".fc2");
        }
    }
};

template <class T>
struct BlockOutput {
    Tensor<T> out;
    RoutingStats<T> stats;
};

/// H' = H + Attn(LN(H)); H_out = H' + MoE(LN(H')).
template <class T>
struct TransformerBlock {
    LayerNorm<T> ln_attn, ln_moe;
    MultiHeadAttention<T> attn;
    Moe<T> moe;

    TransformerBlock() = default;
    TransformerBlock(std::size_t D, std::size_t heads, std::size_t n_experts, std::size_t ffn_mult, Rng& rng)
        : ln_attn(D), ln_moe(D), attn(D, heads, rng), moe(D, n_experts, ffn_mult * D, rng) {}

    BlockOutput<T> forward(const Tensor<T>& h, std::span<const std::uint8_t> valid, std::span<const std::int64_t> positions,
                           std::size_t k) const {
        auto n1 = ln_attn(h);
        auto h1 = add(h, attn(n1, n1, valid, positions));
        auto m = moe.forward(ln_moe(h1), k, valid);
        return {add(h1, m.out), std::move(m.stats)};
    }

    void collect(ParamList<T>& out, const std::string& prefix) {
        ln_attn.collect(out, prefix + ".ln_attn");
        attn.collect(out, prefix + ".attn");
        ln_moe.collect(out, prefix + ".ln_moe");
        moe.collect(out, prefix + ".moe");
    }
};

template <class T>
struct BackboneOutput {
    Tensor<T> out;
    RoutingStats<T> stats;  // summed over layers
    std::vector<RoutingStats<T>> per_layer;
};

template <class T>
struct Backbone {
    std::vector<TransformerBlock<T>> blocks;
    std::size_t experts = 1;

    Backbone() = default;
    Backbone(std::size_t depth, std::size_t D, std::size_t heads, std::size_t n_experts, std::size_t ffn_mult, Rng& rng)
        : experts(n_experts) {
        for (std::size_t i = 0; i < depth; ++i) blocks.emplace_back(D, heads, n_experts, ffn_mult, rng);
    }

    BackboneOutput<T> forward(const Tensor<T>& h, std::span<const std::uint8_t> valid, std::span<const std::int64_t> positions,
                              std::size_t k) const {
        BackboneOutput<T> res;
        res.out = h;
        res.stats.k = k;
        res.stats.counts.assign(experts, 0);
        res.stats.prob_sum = Tensor<T>::zeros({experts});
        for (const auto& b : blocks) {
            auto o = b.forward(res.out, valid, positions, k);
            res.out = o.out;
            res.stats = res.stats.merged(o.stats);
            res.per_layer.push_back(std::move(o.stats));
        }
        return res;
    }

    void collect(ParamList<T>& out, const std::string& prefix) {
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, prefix + ".block" + std::to_string(i));
    }
};

}  // namespace untf
