#pragma once

// The full network: feature projection, dual-domain fusion, topological
// embedding, masking, MoE backbone and the two reconstruction heads.

#include <numeric>

#include "untf/backbone.hpp"
#include "untf/config.hpp"
#include "untf/fusion.hpp"
#include "untf/hfpm.hpp"
#include "untf/objective.hpp"
#include "untf/topology.hpp"

namespace untf {

/// Reconstruction targets h_R and h_F as plain values [B, L, D].
template <class T>
struct Targets {
    std::vector<T> raw, freq;
};

template <class T>
struct PretrainOutput {
    Tensor<T> total, l_time, l_freq, l_aux;
    MaskPlan plan;
    RoutingStats<T> stats;
    std::vector<RoutingStats<T>> per_layer;
    Targets<T> targets;
    Tensor<T> pred_time;  // Head_T output [B, L, D]
};

template <class T>
struct EncodeOutput {
    FeatureTriple<T> features;
    Tensor<T> h_in;  // after topological embedding
};

template <class T>
class Model {
public:
    ArchConfig arch;
    Hfpm<T> hfpm;
    Dcm<T> dcm;
    EmbeddingTables<T> topo;
    Backbone<T> backbone;
    Tensor<T> mask_embedding;  // e_mask [D]
    Linear<T> head_time, head_freq;

    Model() = default;
    Model(const ArchConfig& a, std::uint64_t seed) : arch(a) {
        Rng rng = make_rng(seed, 0x1417);
        hfpm = Hfpm<T>(a.samples, a.dim, a.bands, a.fs, rng);
        dcm = Dcm<T>(a.dim, a.dcm_heads, a.dcm_ffn_mult, rng);
        topo = EmbeddingTables<T>(a.regions, a.electrodes, a.dim, rng);
        backbone = Backbone<T>(a.depth, a.dim, a.heads, a.experts, a.ffn_mult, rng);
        mask_embedding = normal_param<T>({a.dim}, 0.02, rng);
        head_time = Linear<T>(a.dim, a.dim, rng);
        head_freq = Linear<T>(a.dim, a.dim, rng);
        if (!a.topology) topo.disable();
    }

    std::size_t L() const { return arch.seq_len(); }

    /// Every parameter in a fixed order, named for checkpoints.
    ParamList<T> parameters() {
        ParamList<T> out;
        hfpm.collect(out, "hfpm");
        dcm.collect(out, "dcm");
        topo.collect(out, "topo");
        backbone.collect(out, "backbone");
        out.push_back({"mask_embedding", &mask_embedding});
        head_time.collect(out, "head_time");
        head_freq.collect(out, "head_freq");
        return out;
    }

    std::vector<std::int64_t> positions() const {
        std::vector<std::int64_t> p(L());
        std::iota(p.begin(), p.end(), std::int64_t{0});
        return p;
    }

    /// x [B, L, T] -> H_in [B, L, D].
    EncodeOutput<T> encode(const Tensor<T>& x, std::span<const std::uint8_t> valid) const {
        if (x.rank() != 3 || x.dim(1) != L())
            shape_error("model", "expected [B, " + std::to_string(L()) + ", T], got " + to_string(x.shape()));
        EncodeOutput<T> out;
        out.features = hfpm(x);
        auto fused = dcm(out.features.time, out.features.freq, valid);
        auto idx = generate_indices(x.dim(0), L(), arch.regions, arch.electrodes);
        out.h_in = apply_topological_embedding(fused, out.features.raw, topo, idx);
        return out;
    }

    /// Masked-reconstruction forward pass. With `frozen`, those targets are
    /// used instead of the ones computed from this forward pass.
    PretrainOutput<T> pretrain_forward(const Tensor<T>& x, std::span<const std::uint8_t> valid, const MaskPlan& plan,
                                       const LossWeights& w, const Targets<T>* frozen = nullptr) const {
        auto enc = encode(x, valid);
        PretrainOutput<T> out;
        out.plan = plan;
        out.targets = frozen ? *frozen
                             : Targets<T>{{enc.features.raw.values().begin(), enc.features.raw.values().end()},
                                          {enc.features.freq.values().begin(), enc.features.freq.values().end()}};
        auto h = apply_mask(enc.h_in, plan, mask_embedding);
        const auto pos = positions();
        auto bb = backbone.forward(h, valid, pos, arch.top_k);
        out.pred_time = head_time(bb.out);
        out.l_time = masked_reconstruction(out.pred_time, std::span<const T>(out.targets.raw), plan);
        out.l_freq = masked_reconstruction(head_freq(bb.out), std::span<const T>(out.targets.freq), plan);
        out.l_aux = aux_loss(bb.stats, arch.aux_alpha);
        out.total = total_loss(out.l_time, out.l_freq, out.l_aux, w);
        out.stats = std::move(bb.stats);
        out.per_layer = std::move(bb.per_layer);
        return out;
    }

    /// Unmasked forward pass: H_out [B, L, D] and routing statistics.
    BackboneOutput<T> represent(const Tensor<T>& x, std::span<const std::uint8_t> valid) const {
        auto enc = encode(x, valid);
        const auto pos = positions();
        return backbone.forward(enc.h_in, valid, pos, arch.top_k);
    }

    /// Mean of H_out over valid positions: [B, D].
    Tensor<T> pooled(const Tensor<T>& x, std::span<const std::uint8_t> valid) const {
        return masked_mean_rows(represent(x, valid).out, valid);
    }
};

/// Same weights in another scalar type.
template <class To, class From>
Model<To> convert_model(Model<From>& src) {
    Model<To> dst(src.arch, 0);
    auto sp = src.parameters();
    auto dp = dst.parameters();
    for (std::size_t i = 0; i < sp.size(); ++i) {
        auto& d = dp[i].tensor->mutable_values();
        auto s = sp[i].tensor->values();
        for (std::size_t j = 0; j < d.size(); ++j) d[j] = static_cast<To>(s[j]);
        dp[i].tensor->set_requires_grad(sp[i].tensor->requires_grad());
    }
    return dst;
}

}  // namespace untf
