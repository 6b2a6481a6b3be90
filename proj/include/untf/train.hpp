#pragma once

// Pre-training loop, checkpoints and the per-step loss log.
//
// Checkpoint file: magic "UNTF", u32 version, length-prefixed architecture
// JSON, u64 FNV-1a hash of that JSON, u32 tensor count, then named tensors.
// Optimizer moments are stored as "adam.m.<param>" / "adam.v.<param>" and the
// step counter as the one-element tensor "adam.step".

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>

#include "untf/config.hpp"
#include "untf/dataset.hpp"
#include "untf/model.hpp"

namespace untf {

inline constexpr char kCheckpointMagic[4] = {'U', 'N', 'T', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
struct Checkpoint {
    Model<T> model;
    std::optional<AdamW<T>> optim;
    std::uint64_t hash = 0;
};

inline std::string arch_text(const ArchConfig& a) { return arch_json(a).dump(); }

template <class T>
void save_checkpoint(const std::string& path, Model<T>& model, const AdamW<T>* optim = nullptr) {
    auto params = model.parameters();
    const auto text = arch_text(model.arch);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot create checkpoint " + path);
    BinaryWriter w(f);
    w.bytes(kCheckpointMagic, 4);
    w.put<std::uint32_t>(kCheckpointVersion);
    w.string(text);
    w.put<std::uint64_t>(fnv1a64(text));
    const std::size_t count = params.size() * (optim ? 3 : 1) + (optim ? 1 : 0);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(count));
    for (const auto& p : params) write_tensor(w, p.name, *p.tensor);
    if (optim) {
        for (std::size_t i = 0; i < params.size(); ++i)
            write_tensor(w, "adam.m." + params[i].name, Tensor<T>::from(params[i].tensor->shape(), optim->m[i]));
        for (std::size_t i = 0; i < params.size(); ++i)
            write_tensor(w, "adam.v." + params[i].name, Tensor<T>::from(params[i].tensor->shape(), optim->v[i]));
        write_tensor(w, "adam.step", Tensor<T>::scalar(static_cast<T>(optim->step)));
    }
    f.flush();
    if (!f) throw IoError("write failed for " + path);
}

/// Field-by-field differences between two architectures, for error messages.
inline std::string arch_diff(const ArchConfig& a, const ArchConfig& b) {
    const auto ja = arch_json(a), jb = arch_json(b);
    std::string out;
    for (auto it = ja.begin(); it != ja.end(); ++it)
        if (!jb.contains(it.key()) || jb[it.key()] != it.value())
            out += " " + it.key() + "=" + it.value().dump() + " vs " + (jb.contains(it.key()) ? jb[it.key()].dump() : "?");
    return out;
}

/// Loads a checkpoint. With `expected`, the stored architecture must hash to
/// the same value.
template <class T>
Checkpoint<T> load_checkpoint(const std::string& path, const ArchConfig* expected = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint " + path);
    BinaryReader r(f, path);
    char magic[4];
    r.bytes(magic, 4);
    if (!std::equal(magic, magic + 4, kCheckpointMagic)) throw CorruptionError(path + ": not a checkpoint (bad magic)");
    if (auto v = r.get<std::uint32_t>(); v != kCheckpointVersion)
        throw CorruptionError(path + ": unsupported checkpoint version " + std::to_string(v));
    const auto text = r.string(1u << 20);
    const auto stored_hash = r.get<std::uint64_t>();
    if (fnv1a64(text) != stored_hash) throw CorruptionError(path + ": config block does not match its hash");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(path + ": config block is not JSON: " + e.what());
    }
    const ArchConfig arch = arch_from_json(j);
    if (expected) {
        const auto want = fnv1a64(arch_text(*expected));
        if (want != stored_hash)
            throw ValidationError("checkpoint " + path + " has config hash " + hex64(stored_hash) + ", config has " + hex64(want) +
                                  ":" + arch_diff(arch, *expected));
    }
    Checkpoint<T> ck{Model<T>(arch, 0), std::nullopt, stored_hash};
    auto params = ck.model.parameters();
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < params.size(); ++i) index[params[i].name] = i;

    const auto count = r.get<std::uint32_t>();
    std::vector<bool> seen(params.size(), false);
    AdamW<T> opt(params, {});
    bool has_opt = false;
    for (std::uint32_t n = 0; n < count; ++n) {
        auto t = read_tensor(r);
        auto fill = [&](std::vector<T>& dst, const Shape& shape) {
            if (t.shape != shape)
                throw CorruptionError(path + ": tensor " + t.name + " has shape " + to_string(t.shape) + ", expected " + to_string(shape));
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(t.values[i]);
        };
        if (t.name == "adam.step") {
            if (t.values.size() != 1) throw CorruptionError(path + ": bad adam.step");
            opt.step = static_cast<std::size_t>(t.values[0]);
            has_opt = true;
            continue;
        }
        const bool is_m = t.name.rfind("adam.m.", 0) == 0, is_v = t.name.rfind("adam.v.", 0) == 0;
        const auto base = (is_m || is_v) ? t.name.substr(7) : t.name;
        auto it = index.find(base);
        if (it == index.end()) throw CorruptionError(path + ": unexpected tensor " + t.name);
        auto& p = *params[it->second].tensor;
        if (is_m)
            fill(opt.m[it->second], p.shape());
        else if (is_v)
            fill(opt.v[it->second], p.shape());
        else {
            fill(p.mutable_values(), p.shape());
            seen[it->second] = true;
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i)
        if (!seen[i]) throw CorruptionError(path + ": missing tensor " + params[i].name);
    if (!r.at_end()) throw CorruptionError(path + ": trailing bytes after tensors");
    if (has_opt) ck.optim = std::move(opt);
    return ck;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct LossRow {
    std::size_t step = 0;  // 1-based
    double lr = 0, l_time = 0, l_freq = 0, l_aux = 0, total = 0, grad_norm = 0, expert_load_max = 0;
};

inline constexpr const char* kLossHeader = "step,lr,L_time,L_freq,L_aux,total,grad_norm,expert_load_max";

inline std::string format_row(const LossRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", r.step, r.lr, r.l_time, r.l_freq, r.l_aux, r.total,
                  r.grad_norm, r.expert_load_max);
    return buf;
}

/// Trailing moving average over `window` rows.
inline std::vector<double> smoothed_totals(const std::vector<LossRow>& rows, std::size_t window = 10) {
    std::vector<double> out;
    double acc = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        acc += rows[i].total;
        if (i >= window) acc -= rows[i - window].total;
        out.push_back(acc / static_cast<double>(std::min(i + 1, window)));
    }
    return out;
}

// Stream tags for make_rng so every draw is a function of (seed, step).
inline constexpr std::uint64_t kShuffleTag = 0x5A0000000000ull;
inline constexpr std::uint64_t kMaskTag = 0x3A0000000000ull;
inline constexpr std::uint64_t kAugmentTag = 0xA60000000000ull;

template <class T>
class Pretrainer {
public:
    Pretrainer(const ModelConfig& cfg, const Dataset& data, Model<T> model, std::optional<AdamW<T>> optim = std::nullopt)
        : cfg_(cfg), data_(data), model_(std::move(model)) {
        if (data.samples.R != cfg.arch.regions || data.samples.E != cfg.arch.electrodes || data.samples.T != cfg.arch.samples)
            throw ValidationError("dataset layout R=" + std::to_string(data.samples.R) + " E=" + std::to_string(data.samples.E) +
                                  " T=" + std::to_string(data.samples.T) + " does not match config R=" + std::to_string(cfg.arch.regions) +
                                  " E=" + std::to_string(cfg.arch.electrodes) + " T=" + std::to_string(cfg.arch.samples));
        if (data.size() < cfg.train.batch_size)
            throw ValidationError("dataset holds " + std::to_string(data.size()) + " samples, fewer than one batch");
        steps_per_epoch_ = data.size() / cfg.train.batch_size;
        total_steps_ = cfg.train.epochs * steps_per_epoch_;
        if (cfg.train.max_steps > 0) total_steps_ = std::min(total_steps_, cfg.train.max_steps);
        OptimConfig oc;
        oc.lr = cfg.train.lr;
        oc.weight_decay = cfg.train.wd;
        oc.clip = cfg.train.clip;
        oc.warmup_steps = static_cast<std::size_t>(std::llround(cfg.train.warmup_epochs * static_cast<double>(steps_per_epoch_)));
        params_ = model_.parameters();
        if (optim) {
            optim_ = std::move(*optim);
            optim_.cfg = oc;
            if (optim_.m.size() != params_.size()) throw ValidationError("optimizer state does not match model");
        } else {
            optim_ = AdamW<T>(params_, oc);
        }
    }

    std::size_t step() const { return optim_.step; }
    std::size_t total_steps() const { return total_steps_; }
    std::size_t steps_per_epoch() const { return steps_per_epoch_; }
    Model<T>& model() { return model_; }
    AdamW<T>& optim() { return optim_; }

    /// Sample indices of the batch used at `step`.
    std::vector<std::size_t> batch_indices(std::size_t step) const {
        const std::size_t epoch = step / steps_per_epoch_, within = step % steps_per_epoch_;
        std::vector<std::size_t> perm(data_.size());
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        Rng rng = make_rng(cfg_.train.seed, kShuffleTag + epoch);
        std::shuffle(perm.begin(), perm.end(), rng);
        const auto b = cfg_.train.batch_size;
        return {perm.begin() + static_cast<std::ptrdiff_t>(within * b), perm.begin() + static_cast<std::ptrdiff_t>((within + 1) * b)};
    }

    /// The augmented batch and mask plan used at `step`.
    std::pair<EegBatch, MaskPlan> prepare(std::size_t step) const {
        const auto idx = batch_indices(step);
        AugmentConfig aug = cfg_.aug;
        aug.seed = cfg_.train.seed ^ (kAugmentTag + step);
        auto batch = augment(data_.subset(idx), aug);
        Rng mrng = make_rng(cfg_.train.seed, kMaskTag + step);
        auto plan = plan_mask(batch.B, batch.L(), batch.valid, cfg_.train.mask_ratio, mrng);
        return {std::move(batch), std::move(plan)};
    }

    LossRow train_step() {
        const std::size_t s = optim_.step;
        auto [batch, plan] = prepare(s);
        zero_grads(params_);
        auto out = model_.pretrain_forward(batch_tensor<T>(batch), batch.valid, plan, cfg_.train.weights);
        if (!std::isfinite(static_cast<double>(out.total.item())))
            throw NumericFault("non-finite loss at step " + std::to_string(s + 1));
        backward(out.total);
        LossRow row;
        row.step = s + 1;
        row.grad_norm = clip_grad_norm(params_, cfg_.train.clip);
        if (!std::isfinite(row.grad_norm)) throw NumericFault("non-finite gradient norm at step " + std::to_string(s + 1));
        row.lr = optim_.update(params_);
        row.l_time = out.l_time.item();
        row.l_freq = out.l_freq.item();
        row.l_aux = out.l_aux.item();
        row.total = out.total.item();
        const auto f = out.stats.fractions();
        row.expert_load_max = *std::max_element(f.begin(), f.end());
        return row;
    }

    /// Runs to the configured step budget; `on_row` sees every row.
    std::vector<LossRow> run(const std::function<void(const LossRow&)>& on_row = {}) {
        std::vector<LossRow> rows;
        while (optim_.step < total_steps_) {
            rows.push_back(train_step());
            if (on_row) on_row(rows.back());
        }
        return rows;
    }

private:
    ModelConfig cfg_;
    const Dataset& data_;
    Model<T> model_;
    ParamList<T> params_;
    AdamW<T> optim_;
    std::size_t steps_per_epoch_ = 0, total_steps_ = 0;
};

struct ReconstructionCheck {
    double model_error = 0;     // mean ||pred - h_R||^2 over masked rows
    double mean_baseline = 0;   // same, predicting the dataset mean of h_R
    std::size_t masked = 0;
};

/// Masked time-domain reconstruction error on un-augmented data against the
/// predict-the-mean baseline. Masks come from make_rng(seed, kMaskTag).
template <class T>
ReconstructionCheck reconstruction_check(const Model<T>& model, const Dataset& data, std::size_t batch_size, double ratio,
                                         std::uint64_t seed) {
    NoGradGuard ng;
    const std::size_t D = model.arch.dim, L = model.L();
    std::vector<T> targets, preds;
    std::vector<std::size_t> rows;
    std::vector<double> mu(D, 0.0);
    std::size_t valid_rows = 0;
    Rng rng = make_rng(seed, kMaskTag);
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
        const auto batch = data.subset(idx);
        auto plan = plan_mask(batch.B, L, batch.valid, ratio, rng);
        if (plan.rows.empty()) continue;
        auto out = model.pretrain_forward(batch_tensor<T>(batch), batch.valid, plan, LossWeights{});
        for (std::size_t r = 0; r < batch.B * L; ++r) {
            if (!batch.valid[r]) continue;
            ++valid_rows;
            for (std::size_t d = 0; d < D; ++d) mu[d] += static_cast<double>(out.targets.raw[r * D + d]);
        }
        for (auto r : plan.rows) {
            targets.insert(targets.end(), out.targets.raw.begin() + r * D, out.targets.raw.begin() + (r + 1) * D);
            auto pv = out.pred_time.values();
            preds.insert(preds.end(), pv.begin() + r * D, pv.begin() + (r + 1) * D);
        }
    }
    ReconstructionCheck c;
    c.masked = targets.size() / D;
    if (c.masked == 0) throw ValidationError("reconstruction check: no masked positions");
    for (auto& m : mu) m /= static_cast<double>(valid_rows);
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const double t = targets[i];
        c.model_error += (preds[i] - t) * (preds[i] - t);
        c.mean_baseline += (mu[i % D] - t) * (mu[i % D] - t);
    }
    c.model_error /= static_cast<double>(c.masked);
    c.mean_baseline /= static_cast<double>(c.masked);
    return c;
}

inline void write_loss_log(const std::string& path, const std::vector<LossRow>& rows) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot create loss log " + path);
    f << kLossHeader << '\n';
    for (const auto& r : rows) f << format_row(r) << '\n';
    if (!f) throw IoError("write failed for " + path);
}

}  // namespace untf
