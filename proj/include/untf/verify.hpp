#pragma once

// Self-check suite behind `untf verify`: gradient checks, rotary identities,
// routing algebra, band power, topology indices, filter responses and metric
// oracles. Each property reports one pass/fail line.

#include <chrono>
#include <complex>
#include <functional>
#include <ostream>

#include "untf/eval.hpp"
#include "untf/numerics/grad_check.hpp"
#include "untf/synth.hpp"
#include "untf/train.hpp"

namespace untf {

struct ParamGradReport {
    double max_rel_error = 0;
    std::string worst;
    std::size_t probed = 0;
    std::size_t retried = 0;  // coordinates re-measured at a quarter step
};

/// Central differences of the pre-training loss against `per_tensor` random
/// coordinates of every trainable parameter. Targets and the mask plan are
/// frozen from the unperturbed model so the loss is a fixed function of the
/// parameters. The error denominator is floored at `floor`, which bounds the
/// absolute error on near-zero gradients. A coordinate above 1e-4 is
/// measured again at step / 4 and keeps the smaller error; a ReLU or top-k
/// kink inside the stencil shows up at one step and not the other, a wrong
/// adjoint at both.
inline ParamGradReport model_grad_check(Model<double>& model, const EegBatch& batch, const MaskPlan& plan, const LossWeights& w,
                                        std::size_t per_tensor, std::uint64_t seed, double step = 1e-6, double floor = 1e-4) {
    auto params = model.parameters();
    const auto x = batch_tensor<double>(batch);
    Targets<double> frozen;
    {
        NoGradGuard guard;
        frozen = model.pretrain_forward(x, batch.valid, plan, w).targets;
    }
    zero_grads(params);
    backward(model.pretrain_forward(x, batch.valid, plan, w, &frozen).total);
    Rng rng = make_rng(seed, 0x96AD);
    ParamGradReport rep;
    NoGradGuard guard;
    for (auto& p : params) {
        if (!p.tensor->requires_grad()) continue;
        auto& v = p.tensor->mutable_values();
        std::uniform_int_distribution<std::size_t> pick(0, v.size() - 1);
        for (std::size_t n = 0; n < std::min(per_tensor, v.size()); ++n) {
            const std::size_t c = pick(rng);
            const double a = p.tensor->has_grad() ? p.tensor->grad()[c] : 0.0;
            const double orig = v[c];
            auto central = [&](double h) {
                v[c] = orig + h;
                const double up = model.pretrain_forward(x, batch.valid, plan, w, &frozen).total.item();
                v[c] = orig - h;
                const double down = model.pretrain_forward(x, batch.valid, plan, w, &frozen).total.item();
                v[c] = orig;
                return (up - down) / (2 * h);
            };
            double e = relative_error(a, central(step), floor);
            if (e >= 1e-4) {
                ++rep.retried;
                e = std::min(e, relative_error(a, central(step / 4), floor));
            }
            ++rep.probed;
            if (e > rep.max_rel_error) {
                rep.max_rel_error = e;
                rep.worst = p.name + "[" + std::to_string(c) + "]";
            }
        }
    }
    return rep;
}

/// A small random batch with every slot valid, for self-checks.
inline EegBatch random_batch(std::size_t B, const ArchConfig& a, std::uint64_t seed) {
    auto x = EegBatch::zeros(B, a.regions, a.electrodes, a.samples);
    Rng rng = make_rng(seed, 0xBA7C);
    std::normal_distribution<float> g(0.0f, 1.0f);
    for (auto& v : x.data) v = g(rng);
    return x;
}

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

namespace detail {

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

inline CheckResult check_model_gradient(const ModelConfig& cfg) {
    Model<double> model(cfg.arch, cfg.train.seed);
    auto batch = random_batch(2, cfg.arch, cfg.train.seed + 1);
    Rng rng = make_rng(cfg.train.seed, 0x6C);
    auto plan = plan_mask(batch.B, batch.L(), batch.valid, cfg.train.mask_ratio, rng);
    auto rep = model_grad_check(model, batch, plan, cfg.train.weights, 2, cfg.train.seed);
    return {"model gradient vs finite differences", rep.max_rel_error < 1e-3,
            "max rel err " + fmt(rep.max_rel_error) + " over " + std::to_string(rep.probed) + " coords (worst " + rep.worst + ")"};
}

inline CheckResult check_rope() {
    Rng rng = make_rng(7, 0x80BE);
    std::normal_distribution<double> g;
    double norm_err = 0, rel_err = 0;
    const std::size_t d = 8;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> q(d), k(d);
        for (auto& v : q) v = g(rng);
        for (auto& v : k) v = g(rng);
        const std::int64_t m = static_cast<std::int64_t>(rng() % 64), n = static_cast<std::int64_t>(rng() % 64);
        auto rot = [&](const std::vector<double>& v, std::int64_t p) {
            std::int64_t pos[1] = {p};
            return rope_rotate(TensorD::from({1, d}, v), pos);
        };
        auto rq = rot(q, m), rk = rot(k, n), rk_rel = rot(k, n - m);
        double nq = 0, nrq = 0, lhs = 0, rhs = 0;
        for (std::size_t i = 0; i < d; ++i) {
            nq += q[i] * q[i];
            nrq += rq[i] * rq[i];
            lhs += rq[i] * rk[i];
            rhs += q[i] * rk_rel[i];
        }
        norm_err = std::max(norm_err, std::abs(std::sqrt(nq) - std::sqrt(nrq)));
        rel_err = std::max(rel_err, std::abs(lhs - rhs));
    }
    return {"rotary norm preservation and relative-position identity", norm_err < 1e-6 && rel_err < 1e-5,
            "norm err " + fmt(norm_err) + ", relative err " + fmt(rel_err)};
}

inline CheckResult check_routing() {
    Rng rng = make_rng(11, 0x40E);
    const std::size_t D = 8, Ne = 4;
    Moe<double> moe(D, Ne, 16, rng);
    std::normal_distribution<double> g;
    std::vector<double> hv(200 * D);
    for (auto& v : hv) v = g(rng);
    auto h = TensorD::from({200, D}, hv);
    auto full = moe.forward(h, Ne);
    // k = N_e reproduces the dense softmax mixture.
    double dense_err = 0;
    for (std::size_t n = 0; n < 200; ++n) {
        auto x = TensorD::from({1, D}, std::vector<double>(hv.begin() + static_cast<std::ptrdiff_t>(n * D),
                                                            hv.begin() + static_cast<std::ptrdiff_t>((n + 1) * D)));
        for (std::size_t d = 0; d < D; ++d) {
            double mix = 0;
            for (std::size_t j = 0; j < Ne; ++j) mix += full.probs[n * Ne + j] * moe.experts[j](x)[d];
            dense_err = std::max(dense_err, std::abs(mix - full.out[n * D + d]));
        }
    }
    // Uniform and collapsed routing give alpha and alpha * N_e.
    RoutingStats<double> uni{1, 4, {1, 1, 1, 1}, TensorD::full({Ne}, 1.0)};
    RoutingStats<double> col{1, 4, {4, 0, 0, 0}, TensorD::from({Ne}, {4.0, 0, 0, 0})};
    const double a = 0.01;
    const double e_uni = std::abs(aux_loss(uni, a).item() - a), e_col = std::abs(aux_loss(col, a).item() - a * Ne);
    // Counts match a recount over the selected sets.
    auto sparse = moe.forward(h, 2);
    std::vector<std::size_t> recount(Ne, 0);
    for (const auto& sel : sparse.selected)
        for (auto j : sel) ++recount[j];
    const bool counts_ok = recount == sparse.stats.counts && sparse.stats.tokens == 200;
    return {"routing algebra", dense_err < 1e-9 && e_uni < 1e-6 && e_col < 1e-6 && counts_ok,
            "dense err " + fmt(dense_err) + ", uniform err " + fmt(e_uni) + ", collapse err " + fmt(e_col) +
                (counts_ok ? ", counts ok" : ", counts differ")};
}

inline CheckResult check_band_power() {
    const std::size_t T = 400;
    BandSpec spec;
    std::vector<double> x(T), shifted(T);
    for (std::size_t t = 0; t < T; ++t) x[t] = std::sin(2 * std::numbers::pi * 10.0 * static_cast<double>(t) / 200.0);
    auto p = band_power(x, spec, 200.0);
    double total = 0;
    for (double v : p) total += v;
    const double share = p[spec.index_of("alpha")] / total;
    Rng rng = make_rng(3, 0xB9);
    std::normal_distribution<double> g;
    for (auto& v : x) v = g(rng);
    for (std::size_t t = 0; t < T; ++t) shifted[(t + 37) % T] = x[t];
    auto a = band_power(x, spec, 200.0), b = band_power(shifted, spec, 200.0);
    double shift_err = 0;
    for (std::size_t j = 0; j < a.size(); ++j) shift_err = std::max(shift_err, std::abs(a[j] - b[j]) / std::max(a[j], 1e-300));
    return {"band power concentration and shift invariance", share >= 0.999999 && shift_err < 1e-6,
            "alpha share " + fmt(share) + ", shift err " + fmt(shift_err)};
}

inline CheckResult check_topology() {
    bool law = true;
    for (std::size_t E = 1; E <= 40 && law; ++E) {
        const std::size_t R = 5;
        auto idx = generate_indices(1, R * E, R, E);
        for (std::size_t j = 0; j < R * E; ++j) law = law && idx.abs[j] == idx.region[j] * E + idx.intra[j];
    }
    auto map = build_topology({"Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz", "C4", "T4", "T5", "P3", "Pz", "P4", "T6",
                               "O1", "O2"},
                              MontageStandard::ten_twenty);
    bool map_ok = map.entries.size() == 19 && map.padding_slots.size() == map.L() - 19;
    try {
        map.check_invariants();
    } catch (const Error&) {
        map_ok = false;
    }
    return {"topology index law and 10-20 montage", law && map_ok, law && map_ok ? "ok" : "violated"};
}

inline CheckResult check_filter() {
    const double fs = 200;
    const std::size_t n = 2000;
    auto amp = [&](double f) {
        std::vector<double> x(n);
        for (std::size_t t = 0; t < n; ++t) x[t] = std::sin(2 * std::numbers::pi * f * static_cast<double>(t) / fs);
        auto y = zero_phase_filter(x, fs);
        double s = 0, c = 0;
        for (std::size_t t = n / 10; t < n - n / 10; ++t) {
            s += y[t] * std::sin(2 * std::numbers::pi * f * static_cast<double>(t) / fs);
            c += y[t] * std::cos(2 * std::numbers::pi * f * static_cast<double>(t) / fs);
        }
        return 2 * std::hypot(s, c) / static_cast<double>(n - 2 * (n / 10));
    };
    std::vector<double> dc(n, 5.0);
    auto y = zero_phase_filter(dc, fs);
    double dc_max = 0;
    for (std::size_t t = n / 10; t < n - n / 10; ++t) dc_max = std::max(dc_max, std::abs(y[t]));
    const double a10 = amp(10), a50 = amp(50);
    return {"filter responses", dc_max < 0.05 && a10 >= 0.9 && a10 <= 1.1 && a50 < 0.1,
            "dc " + fmt(dc_max) + ", 10 Hz gain " + fmt(a10) + ", 50 Hz gain " + fmt(a50)};
}

inline CheckResult check_metrics() {
    const double ba = balanced_accuracy(ConfusionMatrix::binary(3, 1, 2, 2));
    const double kappa = cohens_kappa(ConfusionMatrix::binary(20, 5, 10, 15));
    const double au = auroc({{0, 0, 1, 1}, {0.1, 0.4, 0.35, 0.8}});
    ConfusionMatrix cm(2);
    cm.counts = {{0, 2}, {1, 3}};  // class 1: TP=3, FN=1, FP=2
    const double f1 = f1_scores(cm).per_class[1];
    const bool ok = std::abs(ba - 0.625) < 1e-12 && std::abs(kappa - 0.4) < 1e-12 && std::abs(au - 0.75) < 1e-12 &&
                    std::abs(f1 - 6.0 / 9.0) < 1e-12 && std::abs(auc_pr({{1, 0, 1, 0}, {0.9, 0.8, 0.7, 0.1}}) - (0.5 + 0.5 * 2.0 / 3.0)) < 1e-12;
    return {"metric oracles", ok, "balacc " + fmt(ba) + ", kappa " + fmt(kappa) + ", auroc " + fmt(au) + ", f1 " + fmt(f1)};
}

}  // namespace detail

/// Runs every check, printing one line each. Returns true when all pass.
inline bool run_verify(const ModelConfig& cfg, std::ostream& os) {
    std::vector<std::function<CheckResult()>> checks{
        [&] { return detail::check_model_gradient(cfg); }, detail::check_rope,     detail::check_routing, detail::check_band_power,
        detail::check_topology,                             detail::check_filter, detail::check_metrics};
    bool all = true;
    for (const auto& c : checks) {
        CheckResult r;
        try {
            r = c();
        } catch (const Error& e) {
            r.detail = std::string("error: ") + e.what();
        }
        if (r.name.empty()) r.name = "check";
        all = all && r.pass;
        os << (r.pass ? "PASS  " : "FAIL  ") << r.name << " (" << r.detail << ")\n";
    }
    return all;
}

}  // namespace untf
