#pragma once

// Classification metrics, frozen-feature extraction, linear probing and full
// fine-tuning.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "untf/dataset.hpp"
#include "untf/model.hpp"

namespace untf {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// counts[t][p]: rows are the true class, columns the prediction.
struct ConfusionMatrix {
    std::vector<std::vector<std::size_t>> counts;

    explicit ConfusionMatrix(std::size_t C = 0) : counts(C, std::vector<std::size_t>(C, 0)) {}

    static ConfusionMatrix from(std::span<const std::int32_t> truth, std::span<const std::int32_t> pred, std::size_t C) {
        if (truth.size() != pred.size()) throw ValidationError("confusion matrix: label and prediction counts differ");
        ConfusionMatrix cm(C);
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (truth[i] < 0 || pred[i] < 0 || static_cast<std::size_t>(truth[i]) >= C || static_cast<std::size_t>(pred[i]) >= C)
                throw ValidationError("confusion matrix: class index out of range");
            ++cm.counts[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(pred[i])];
        }
        return cm;
    }

    /// Binary layout helper: class 1 is positive.
    static ConfusionMatrix binary(std::size_t tp, std::size_t fn, std::size_t fp, std::size_t tn) {
        ConfusionMatrix cm(2);
        cm.counts = {{tn, fp}, {fn, tp}};
        return cm;
    }

    std::size_t classes() const { return counts.size(); }
    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& r : counts) n = std::accumulate(r.begin(), r.end(), n);
        return n;
    }
    std::size_t row_sum(std::size_t i) const { return std::accumulate(counts[i].begin(), counts[i].end(), std::size_t{0}); }
    std::size_t col_sum(std::size_t j) const {
        std::size_t s = 0;
        for (const auto& r : counts) s += r[j];
        return s;
    }
};

inline double balanced_accuracy(const ConfusionMatrix& cm) {
    if (cm.classes() == 0) throw ValidationError("balanced_accuracy: empty confusion matrix");
    double s = 0;
    for (std::size_t i = 0; i < cm.classes(); ++i) {
        const auto n = cm.row_sum(i);
        if (n == 0) throw ValidationError("balanced_accuracy: class " + std::to_string(i) + " has no samples");
        s += static_cast<double>(cm.counts[i][i]) / static_cast<double>(n);
    }
    return s / static_cast<double>(cm.classes());
}

inline double cohens_kappa(const ConfusionMatrix& cm) {
    const auto n = static_cast<double>(cm.total());
    if (n == 0) throw ValidationError("cohens_kappa: empty confusion matrix");
    double agree = 0, chance = 0;
    for (std::size_t i = 0; i < cm.classes(); ++i) {
        agree += static_cast<double>(cm.counts[i][i]);
        chance += static_cast<double>(cm.row_sum(i)) * static_cast<double>(cm.col_sum(i));
    }
    const double po = agree / n, pe = chance / (n * n);
    if (pe == 1.0) throw ValidationError("cohens_kappa: chance agreement is 1 (degenerate marginals)");
    return (po - pe) / (1 - pe);
}

struct F1Scores {
    std::vector<double> per_class;
    double weighted = 0;
};

/// One-vs-rest F1 = 2TP / (2TP + FP + FN); an empty denominator gives 0.
inline F1Scores f1_scores(const ConfusionMatrix& cm) {
    const auto n = cm.total();
    if (n == 0) throw ValidationError("f1_scores: empty confusion matrix");
    F1Scores out;
    for (std::size_t i = 0; i < cm.classes(); ++i) {
        const double tp = static_cast<double>(cm.counts[i][i]);
        const double fn = static_cast<double>(cm.row_sum(i)) - tp;
        const double fp = static_cast<double>(cm.col_sum(i)) - tp;
        const double den = 2 * tp + fp + fn;
        out.per_class.push_back(den > 0 ? 2 * tp / den : 0.0);
        out.weighted += out.per_class.back() * static_cast<double>(cm.row_sum(i)) / static_cast<double>(n);
    }
    return out;
}

/// Binary labels (1 = positive) with a score for the positive class.
struct ScoredPredictions {
    std::vector<std::int32_t> labels;
    std::vector<double> scores;

    void validate(const char* op) const {
        if (labels.size() != scores.size()) throw ValidationError(std::string(op) + ": label and score counts differ");
        for (double s : scores)
            if (!std::isfinite(s)) throw ValidationError(std::string(op) + ": non-finite score");
        for (auto y : labels)
            if (y != 0 && y != 1) throw ValidationError(std::string(op) + ": labels must be binary");
    }
    std::size_t positives() const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1)); }
};

/// P(score+ > score-) + P(tie)/2 by exhaustive pair counting.
inline double auroc(const ScoredPredictions& p) {
    p.validate("auroc");
    const std::size_t pos = p.positives(), neg = p.labels.size() - pos;
    if (pos == 0 || neg == 0) throw ValidationError("auroc: both classes must be present");
    double wins = 0;
    for (std::size_t i = 0; i < p.labels.size(); ++i) {
        if (p.labels[i] != 1) continue;
        for (std::size_t j = 0; j < p.labels.size(); ++j) {
            if (p.labels[j] != 0) continue;
            if (p.scores[i] > p.scores[j])
                wins += 1;
            else if (p.scores[i] == p.scores[j])
                wins += 0.5;
        }
    }
    return wins / (static_cast<double>(pos) * static_cast<double>(neg));
}

/// Step-rule area under the precision-recall curve: thresholds at each
/// distinct score in descending order, sum of (R_n - R_{n-1}) * P_n.
inline double auc_pr(const ScoredPredictions& p) {
    p.validate("auc_pr");
    const std::size_t pos = p.positives();
    if (pos == 0) throw ValidationError("auc_pr: no positive samples");
    std::vector<std::size_t> order(p.labels.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p.scores[a] > p.scores[b]; });
    double area = 0, prev_recall = 0;
    std::size_t tp = 0, seen = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double s = p.scores[order[i]];
        for (; i < order.size() && p.scores[order[i]] == s; ++i, ++seen) tp += p.labels[order[i]] == 1 ? 1 : 0;
        const double recall = static_cast<double>(tp) / static_cast<double>(pos);
        const double precision = static_cast<double>(tp) / static_cast<double>(seen);
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    return area;
}

struct MetricReport {
    std::size_t classes = 0;
    std::vector<std::pair<std::string, double>> metrics;  // in report order
    ConfusionMatrix confusion;

    double get(const std::string& name) const {
        for (const auto& [k, v] : metrics)
            if (k == name) return v;
        throw ValidationError("metric report has no '" + name + "'");
    }

    /// One `name<TAB>value` line per metric.
    std::string text() const {
        std::ostringstream os;
        char buf[64];
        for (const auto& [k, v] : metrics) {
            std::snprintf(buf, sizeof buf, "%.9g", v);
            os << k << '\t' << buf << '\n';
        }
        return os.str();
    }

    nlohmann::ordered_json json() const {
        nlohmann::ordered_json j;
        j["classes"] = classes;
        for (const auto& [k, v] : metrics) j["metrics"][k] = v;
        j["confusion"] = confusion.counts;
        return j;
    }
};

/// Metric set by arity: binary gets balanced accuracy, AUROC and AUC-PR;
/// multi-class gets balanced accuracy, kappa and weighted F1. `probs` is
/// [N, C] class probabilities.
inline MetricReport evaluate_predictions(std::span<const std::int32_t> labels, std::span<const double> probs, std::size_t C) {
    if (C < 2) throw ValidationError("evaluate: need at least two classes");
    const std::size_t N = labels.size();
    if (probs.size() != N * C) throw ValidationError("evaluate: probability matrix does not match labels");
    std::vector<std::int32_t> pred(N);
    for (std::size_t i = 0; i < N; ++i) {
        const auto* row = probs.data() + i * C;
        pred[i] = static_cast<std::int32_t>(std::max_element(row, row + C) - row);
    }
    MetricReport r;
    r.classes = C;
    r.confusion = ConfusionMatrix::from(labels, pred, C);
    r.metrics.emplace_back("balanced_accuracy", balanced_accuracy(r.confusion));
    if (C == 2) {
        ScoredPredictions sp{{labels.begin(), labels.end()}, {}};
        for (std::size_t i = 0; i < N; ++i) sp.scores.push_back(probs[i * 2 + 1]);
        r.metrics.emplace_back("auroc", auroc(sp));
        r.metrics.emplace_back("auc_pr", auc_pr(sp));
    } else {
        r.metrics.emplace_back("cohens_kappa", cohens_kappa(r.confusion));
        r.metrics.emplace_back("weighted_f1", f1_scores(r.confusion).weighted);
    }
    return r;
}

// ---------------------------------------------------------------------------
// Splits and features
// ---------------------------------------------------------------------------

struct Split {
    std::vector<std::size_t> train, test;
};

/// Per class, a seeded shuffle then the first round(fraction * n) go to train.
inline Split stratified_split(std::span<const std::int32_t> labels, double fraction, std::uint64_t seed) {
    std::map<std::int32_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    if (by_class.size() < 2) throw ValidationError("split: need at least two classes");
    Split s;
    Rng rng = make_rng(seed, 0x5B117);
    for (auto& [c, idx] : by_class) {
        std::shuffle(idx.begin(), idx.end(), rng);
        const auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
        if (n_train == 0 || n_train == idx.size())
            throw ValidationError("split: class " + std::to_string(c) + " would be missing from train or test");
        s.train.insert(s.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
        s.test.insert(s.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

/// Masked mean of H_out per sample, computed in fixed chunks of `batch`
/// samples (normalization statistics are per chunk). Returns [N, D].
template <class T>
std::vector<double> extract_features(const Model<T>& model, const EegBatch& data, std::size_t batch) {
    NoGradGuard guard;
    const std::size_t D = model.arch.dim;
    std::vector<double> out;
    out.reserve(data.B * D);
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.B; start += batch) {
        const std::size_t n = std::min(batch, data.B - start);
        EegBatch chunk = EegBatch::zeros(n, data.R, data.E, data.T);
        const std::size_t L = data.L();
        std::copy_n(data.data.begin() + static_cast<std::ptrdiff_t>(start * L * data.T), n * L * data.T, chunk.data.begin());
        std::copy_n(data.valid.begin() + static_cast<std::ptrdiff_t>(start * L), n * L, chunk.valid.begin());
        auto f = model.pooled(batch_tensor<T>(chunk), chunk.valid);
        for (T v : f.values()) out.push_back(static_cast<double>(v));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

struct ProbeResult {
    MetricReport report;
    std::vector<double> test_probs;  // [N_test, C]
};

/// Softmax regression on standardized frozen features, full-batch Adam.
inline ProbeResult linear_probe(std::span<const double> features, std::size_t D, std::span<const std::int32_t> labels,
                                const Split& split, const ProbeConfig& cfg, std::uint64_t seed) {
    const std::size_t N = labels.size();
    if (features.size() != N * D) throw ValidationError("probe: feature matrix does not match labels");
    for (double v : features)
        if (!std::isfinite(v)) throw ValidationError("probe: non-finite feature");
    std::size_t C = 0;
    for (auto y : labels) C = std::max<std::size_t>(C, static_cast<std::size_t>(y) + 1);
    if (C < 2) throw ValidationError("probe: need at least two classes");
    if (split.train.empty() || split.test.empty()) throw ValidationError("probe: degenerate split");

    std::vector<double> mu(D, 0.0), sd(D, 0.0);
    for (auto i : split.train)
        for (std::size_t d = 0; d < D; ++d) mu[d] += features[i * D + d];
    for (auto& m : mu) m /= static_cast<double>(split.train.size());
    for (auto i : split.train)
        for (std::size_t d = 0; d < D; ++d) sd[d] += std::pow(features[i * D + d] - mu[d], 2);
    for (auto& s : sd) s = std::sqrt(s / static_cast<double>(split.train.size())) + 1e-8;
    auto standardized = [&](const std::vector<std::size_t>& rows) {
        std::vector<double> x;
        x.reserve(rows.size() * D);
        for (auto i : rows)
            for (std::size_t d = 0; d < D; ++d) x.push_back((features[i * D + d] - mu[d]) / sd[d]);
        return TensorD::from({rows.size(), D}, std::move(x));
    };
    auto pick = [&](const std::vector<std::size_t>& rows) {
        std::vector<std::int32_t> y;
        for (auto i : rows) y.push_back(labels[i]);
        return y;
    };
    const auto x_train = standardized(split.train), x_test = standardized(split.test);
    const auto y_train = pick(split.train), y_test = pick(split.test);

    // Zero start: the problem is convex and a random head would dominate
    // the few hundred small Adam steps.
    Rng rng = make_rng(seed, 0x9B0BE);
    Linear<double> head(D, C, rng);
    std::fill(head.weight.mutable_values().begin(), head.weight.mutable_values().end(), 0.0);
    std::fill(head.bias.mutable_values().begin(), head.bias.mutable_values().end(), 0.0);
    ParamList<double> params;
    head.collect(params, "probe");
    OptimConfig oc;
    oc.lr = cfg.lr;
    oc.weight_decay = 0;
    oc.clip = 0;
    AdamW<double> opt(params, oc);
    EnableGradGuard recording;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        zero_grads(params);
        backward(cross_entropy(head(x_train), y_train));
        opt.update(params);
    }
    NoGradGuard guard;
    auto logits = head(x_test);
    ProbeResult res;
    res.test_probs.resize(split.test.size() * C);
    for (std::size_t i = 0; i < split.test.size(); ++i) {
        const double* z = logits.values().data() + i * C;
        const double mx = *std::max_element(z, z + C);
        double s = 0;
        for (std::size_t c = 0; c < C; ++c) s += std::exp(z[c] - mx);
        for (std::size_t c = 0; c < C; ++c) res.test_probs[i * C + c] = std::exp(z[c] - mx) / s;
    }
    res.report = evaluate_predictions(y_test, res.test_probs, C);
    return res;
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

/// Trains every parameter plus a linear head on pooled features with
/// cross-entropy (and the routing auxiliary loss), then evaluates the test
/// split.
template <class T>
MetricReport finetune(Model<T>& model, const Dataset& data, const Split& split, const ModelConfig& cfg) {
    const std::size_t C = data.classes();
    if (C < 2) throw ValidationError("finetune: need at least two classes");
    Rng rng = make_rng(cfg.train.seed, 0xF17E);
    Linear<T> head(model.arch.dim, C, rng);
    auto params = model.parameters();
    head.collect(params, "finetune_head");
    OptimConfig oc;
    oc.lr = cfg.probe.finetune_lr;
    oc.weight_decay = cfg.train.wd;
    oc.clip = cfg.train.clip;
    AdamW<T> opt(params, oc);
    const std::size_t bs = cfg.train.batch_size;
    for (std::size_t e = 0; e < cfg.probe.finetune_epochs; ++e) {
        auto order = split.train;
        Rng shuf = make_rng(cfg.train.seed, 0xF17E0000 + e);
        std::shuffle(order.begin(), order.end(), shuf);
        for (std::size_t start = 0; start + bs <= order.size(); start += bs) {
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(start + bs));
            auto batch = data.subset(idx);
            zero_grads(params);
            auto rep = model.represent(batch_tensor<T>(batch), batch.valid);
            auto logits = head(masked_mean_rows(rep.out, batch.valid));
            auto loss = add(cross_entropy(logits, batch.labels),
                            scale(aux_loss(rep.stats, model.arch.aux_alpha), static_cast<T>(cfg.train.weights.aux)));
            if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericFault("finetune: non-finite loss");
            backward(loss);
            clip_grad_norm(params, oc.clip);
            opt.update(params);
        }
    }
    NoGradGuard guard;
    auto test = data.subset(split.test);
    std::vector<double> probs;
    for (std::size_t start = 0; start < split.test.size(); start += bs) {
        const std::size_t n = std::min(bs, split.test.size() - start);
        std::vector<std::size_t> idx(split.test.begin() + static_cast<std::ptrdiff_t>(start),
                                     split.test.begin() + static_cast<std::ptrdiff_t>(start + n));
        auto batch = data.subset(idx);
        auto logits = head(model.pooled(batch_tensor<T>(batch), batch.valid));
        for (std::size_t i = 0; i < n; ++i) {
            const T* z = logits.values().data() + i * C;
            const double mx = static_cast<double>(*std::max_element(z, z + C));
            double s = 0;
            for (std::size_t c = 0; c < C; ++c) s += std::exp(static_cast<double>(z[c]) - mx);
            for (std::size_t c = 0; c < C; ++c) probs.push_back(std::exp(static_cast<double>(z[c]) - mx) / s);
        }
    }
    return evaluate_predictions(test.labels, probs, C);
}

}  // namespace untf
