#pragma once

// Masked-autoencoding objective: token masking, reconstruction and
// classification losses, and the AdamW optimizer with warmup and clipping.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "untf/numerics/layers.hpp"

namespace untf {

struct MaskPlan {
    double ratio = 0;
    std::vector<std::size_t> rows;  // flat b * L + l, ascending
    std::size_t B = 0, L = 0;

    bool contains(std::size_t b, std::size_t l) const { return std::binary_search(rows.begin(), rows.end(), b * L + l); }
};

/// Number of positions masked in a sample with `valid` usable positions.
inline std::size_t masked_count(double ratio, std::size_t valid) {
    return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(valid)));
}

/// Choose round(ratio * valid) valid positions per sample uniformly without
/// replacement.
inline MaskPlan plan_mask(std::size_t B, std::size_t L, std::span<const std::uint8_t> valid, double ratio, Rng& rng) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ValidationError("mask_tokens: ratio " + std::to_string(ratio) + " outside [0, 1]");
    if (valid.size() != B * L) shape_error("mask_tokens", "validity mask does not match B*L");
    MaskPlan plan{ratio, {}, B, L};
    std::vector<std::size_t> pool;
    for (std::size_t b = 0; b < B; ++b) {
        pool.clear();
        for (std::size_t l = 0; l < L; ++l)
            if (valid[b * L + l]) pool.push_back(l);
        const std::size_t m = masked_count(ratio, pool.size());
        for (std::size_t i = 0; i < m; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
            std::swap(pool[i], pool[pick(rng)]);
        }
        std::sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(m));
        for (std::size_t i = 0; i < m; ++i) plan.rows.push_back(b * L + pool[i]);
    }
    return plan;
}

/// Replace the planned rows of H [B, L, D] with e_mask [D].
template <class T>
Tensor<T> apply_mask(const Tensor<T>& h, const MaskPlan& plan, const Tensor<T>& e_mask) {
    if (h.rank() != 3 || h.dim(0) != plan.B || h.dim(1) != plan.L) shape_error("mask_tokens", "plan does not match input grid");
    if (plan.rows.empty()) return h;
    return replace_rows(h, plan.rows, e_mask);
}

template <class T>
std::pair<Tensor<T>, MaskPlan> mask_tokens(const Tensor<T>& h, double ratio, std::span<const std::uint8_t> valid,
                                           const Tensor<T>& e_mask, Rng& rng) {
    if (h.rank() != 3) shape_error("mask_tokens", "expected [B, L, D], got " + to_string(h.shape()));
    auto plan = plan_mask(h.dim(0), h.dim(1), valid, ratio, rng);
    return {apply_mask(h, plan, e_mask), std::move(plan)};
}

/// (1/|M|) sum over masked rows of ||pred_i - target_i||^2. The target is a
/// constant.
template <class T>
Tensor<T> masked_reconstruction(const Tensor<T>& pred, std::span<const T> target, const MaskPlan& plan) {
    if (plan.rows.empty()) throw ValidationError("reconstruction loss: no masked positions");
    const std::size_t D = pred.shape().back();
    if (target.size() != pred.size()) shape_error("reconstruction loss", "target size differs from prediction");
    std::vector<T> picked;
    picked.reserve(plan.rows.size() * D);
    for (auto r : plan.rows) picked.insert(picked.end(), target.begin() + r * D, target.begin() + (r + 1) * D);
    auto p = gather_rows(pred, plan.rows);
    return scale(squared_error_sum(p, std::span<const T>(picked)), T(1) / static_cast<T>(plan.rows.size()));
}

struct LossWeights {
    double time = 0.8, freq = 0.2, aux = 1.0;

    void validate() const {
        if (time < 0 || freq < 0 || aux < 0) throw ValidationError("loss weights must be non-negative");
        if (time + freq <= 0) throw ValidationError("loss weights: lambda_t + lambda_f must be positive");
    }
};

template <class T>
Tensor<T> total_loss(const Tensor<T>& l_time, const Tensor<T>& l_freq, const Tensor<T>& l_aux, const LossWeights& w) {
    return add(add(scale(l_time, static_cast<T>(w.time)), scale(l_freq, static_cast<T>(w.freq))), scale(l_aux, static_cast<T>(w.aux)));
}

/// Mean negative log-likelihood of the true class. logits [B, C].
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
    if (logits.rank() != 2) shape_error("cross_entropy", "expected [B, C], got " + to_string(logits.shape()));
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    if (labels.size() != B) shape_error("cross_entropy", std::to_string(labels.size()) + " labels for batch " + std::to_string(B));
    for (auto y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= C)
            throw ValidationError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(C) + ")");
    std::vector<T> prob(B * C);
    double loss = 0;
    for (std::size_t b = 0; b < B; ++b) {
        const T* z = logits.values().data() + b * C;
        const T mx = *std::max_element(z, z + C);
        double s = 0;
        for (std::size_t c = 0; c < C; ++c) s += std::exp(static_cast<double>(z[c] - mx));
        for (std::size_t c = 0; c < C; ++c) prob[b * C + c] = static_cast<T>(std::exp(static_cast<double>(z[c] - mx)) / s);
        loss += std::log(s) - static_cast<double>(z[labels[b]] - mx);
    }
    std::vector<std::int32_t> y(labels.begin(), labels.end());
    return make_result<T>("cross_entropy", {1}, {static_cast<T>(loss / static_cast<double>(B))}, {logits.node()},
                          [prob, y, B, C](detail::Node<T>& self) {
                              T* g = detail::gbuf(self.inputs[0]);
                              const T s = self.grad[0] / static_cast<T>(B);
                              for (std::size_t b = 0; b < B; ++b)
                                  for (std::size_t c = 0; c < C; ++c)
                                      g[b * C + c] += s * (prob[b * C + c] - (static_cast<std::size_t>(y[b]) == c ? T(1) : T(0)));
                          });
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct OptimConfig {
    double lr = 3e-5;
    double weight_decay = 1e-4;
    std::size_t warmup_steps = 0;
    double clip = 1.0;  // <= 0 disables clipping
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// Linear warmup to the base rate, then constant.
inline double scheduled_lr(const OptimConfig& cfg, std::size_t step) {
    if (cfg.warmup_steps == 0 || step >= cfg.warmup_steps) return cfg.lr;
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
}

template <class T>
double global_grad_norm(const ParamList<T>& params) {
    double s = 0;
    for (const auto& p : params)
        if (p.tensor->has_grad())
            for (T g : p.tensor->grad()) s += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(s);
}

/// Scale gradients in place so their global norm is at most max_norm.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(ParamList<T>& params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (max_norm > 0 && norm > max_norm) {
        const double f = max_norm / norm;
        for (auto& p : params)
            if (p.tensor->has_grad())
                for (auto& g : p.tensor->mutable_grad()) g = static_cast<T>(static_cast<double>(g) * f);
    }
    return norm;
}

/// AdamW with decoupled weight decay (decay also scaled by the current rate).
template <class T>
struct AdamW {
    OptimConfig cfg;
    std::size_t step = 0;
    std::vector<std::vector<T>> m, v;

    AdamW() = default;
    AdamW(const ParamList<T>& params, OptimConfig c) : cfg(c) {
        for (const auto& p : params) {
            m.emplace_back(p.tensor->size(), T(0));
            v.emplace_back(p.tensor->size(), T(0));
        }
    }

    /// Applies one update from the current gradients; returns the rate used.
    double update(ParamList<T>& params) {
        if (params.size() != m.size()) throw ValidationError("optimizer: parameter list changed size");
        const double lr = scheduled_lr(cfg, step);
        ++step;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor<T>& t = *params[i].tensor;
            if (!t.requires_grad() || !t.has_grad()) continue;
            if (t.size() != m[i].size()) throw ValidationError("optimizer: moment shape differs for " + params[i].name);
            auto& w = t.mutable_values();
            auto g = t.grad();
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double gj = g[j];
                const double mj = cfg.beta1 * m[i][j] + (1 - cfg.beta1) * gj;
                const double vj = cfg.beta2 * v[i][j] + (1 - cfg.beta2) * gj * gj;
                m[i][j] = static_cast<T>(mj);
                v[i][j] = static_cast<T>(vj);
                const double upd = (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps) + cfg.weight_decay * static_cast<double>(w[j]);
                w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * upd);
            }
        }
        return lr;
    }
};

template <class T>
void zero_grads(ParamList<T>& params) {
    for (auto& p : params) p.tensor->zero_grad();
}

}  // namespace untf
