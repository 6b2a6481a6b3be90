#pragma once

// Heterogeneous feature projection: every electrode's full time series is
// mapped to three D-dimensional embeddings (time, frequency, raw paths).

#include <cmath>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "untf/numerics/layers.hpp"
#include "untf/preprocess.hpp"

namespace untf {

struct Band {
    std::string name;
    double lo_hz;
    double hi_hz;
};

struct BandSpec {
    std::vector<Band> bands{{"delta", 0.5, 4.0}, {"theta", 4.0, 8.0}, {"alpha", 8.0, 13.0},
                            {"beta", 13.0, 30.0}, {"gamma", 30.0, 50.0}};

    std::size_t size() const { return bands.size(); }

    void validate() const {
        if (bands.size() != 5) throw ValidationError("bands: exactly 5 bands are required");
        for (std::size_t i = 0; i < bands.size(); ++i) {
            const auto& b = bands[i];
            if (!(b.lo_hz < b.hi_hz)) throw ValidationError("bands: " + b.name + " has lo >= hi");
            if (b.lo_hz < 0.5 || b.hi_hz > 50.0) throw ValidationError("bands: " + b.name + " leaves [0.5, 50] Hz");
            if (i > 0 && b.lo_hz < bands[i - 1].hi_hz)
                throw ValidationError("bands: " + b.name + " overlaps or precedes " + bands[i - 1].name);
        }
    }

    std::size_t index_of(const std::string& name) const {
        for (std::size_t i = 0; i < bands.size(); ++i)
            if (bands[i].name == name) return i;
        throw ValidationError("bands: unknown band '" + name + "'");
    }
};

/// Precomputed DFT rows for the bins of each band at a given (T, fs).
/// Bin k belongs to band j when lo_j <= k*fs/T < hi_j.
class BandPowerPlan {
public:
    BandPowerPlan(const BandSpec& spec, std::size_t T, double fs) : T_(T), n_bands_(spec.size()) {
        spec.validate();
        if (T < 2) throw ValidationError("band_power: need T >= 2");
        for (std::size_t j = 0; j < spec.size(); ++j) {
            std::vector<std::size_t> bins;
            for (std::size_t k = 0; k <= T / 2; ++k) {
                const double f = static_cast<double>(k) * fs / static_cast<double>(T);
                if (f >= spec.bands[j].lo_hz && f < spec.bands[j].hi_hz) bins.push_back(k);
            }
            if (bins.empty())
                throw ValidationError("band_power: band " + spec.bands[j].name + " holds no DFT bin at T=" +
                                      std::to_string(T) + ", fs=" + std::to_string(fs));
            for (auto k : bins) {
                band_of_.push_back(j);
                bins_.push_back(k);
            }
            count_.push_back(bins.size());
        }
        cos_.resize(bins_.size() * T);
        sin_.resize(bins_.size() * T);
        for (std::size_t r = 0; r < bins_.size(); ++r)
            for (std::size_t t = 0; t < T; ++t) {
                // Reduce k*t mod T first to keep the angle argument small.
                const double ang = 2 * std::numbers::pi * static_cast<double>((bins_[r] * t) % T) / static_cast<double>(T);
                cos_[r * T + t] = std::cos(ang);
                sin_[r * T + t] = std::sin(ang);
            }
    }

    std::size_t T() const { return T_; }
    std::size_t bands() const { return n_bands_; }
    std::size_t bin_count(std::size_t band) const { return count_[band]; }

    /// Mean |DFT_k|^2 per band for one series, plus (re, im) per bin when asked.
    template <class V>
    std::vector<double> power(const V* x, std::vector<double>* re = nullptr, std::vector<double>* im = nullptr) const {
        std::vector<double> p(n_bands_, 0.0);
        if (re) re->assign(bins_.size(), 0.0);
        if (im) im->assign(bins_.size(), 0.0);
        for (std::size_t r = 0; r < bins_.size(); ++r) {
            double a = 0, s = 0;
            const double* c = cos_.data() + r * T_;
            const double* sn = sin_.data() + r * T_;
            for (std::size_t t = 0; t < T_; ++t) {
                a += c[t] * x[t];
                s += sn[t] * x[t];
            }
            p[band_of_[r]] += a * a + s * s;
            if (re) (*re)[r] = a;
            if (im) (*im)[r] = s;
        }
        for (std::size_t j = 0; j < n_bands_; ++j) p[j] /= static_cast<double>(count_[j]);
        return p;
    }

    /// d(power_j)/dx_t accumulated with weights g_j into gx.
    template <class V>
    void adjoint(const std::vector<double>& a, const std::vector<double>& s, const V* g, V* gx) const {
        for (std::size_t r = 0; r < bins_.size(); ++r) {
            const double w = 2.0 * g[band_of_[r]] / static_cast<double>(count_[band_of_[r]]);
            const double* c = cos_.data() + r * T_;
            const double* sn = sin_.data() + r * T_;
            for (std::size_t t = 0; t < T_; ++t) gx[t] += static_cast<V>(w * (a[r] * c[t] + s[r] * sn[t]));
        }
    }

private:
    std::size_t T_, n_bands_;
    std::vector<std::size_t> bins_, band_of_, count_;
    std::vector<double> cos_, sin_;
};

/// Uncompressed mean band power of one series.
inline std::vector<double> band_power(std::span<const double> x, const BandSpec& spec, double fs = kTargetRate) {
    BandPowerPlan plan(spec, x.size(), fs);
    return plan.power(x.data());
}

/// Differentiable band power over rows: x [N, T] -> [N, N_b].
template <class T>
Tensor<T> band_power(const Tensor<T>& x, std::shared_ptr<const BandPowerPlan> plan) {
    const std::size_t Tn = x.shape().back(), N = x.size() / Tn;
    if (Tn != plan->T()) shape_error("band_power", "series length " + std::to_string(Tn) + " vs plan T=" + std::to_string(plan->T()));
    const std::size_t nb = plan->bands();
    std::vector<T> out(N * nb);
    for (std::size_t n = 0; n < N; ++n) {
        auto p = plan->power(x.values().data() + n * Tn);
        for (std::size_t j = 0; j < nb; ++j) out[n * nb + j] = static_cast<T>(p[j]);
    }
    return make_result<T>("band_power", {N, nb}, std::move(out), {x.node()}, [N, Tn, nb, plan](detail::Node<T>& self) {
        T* gx = detail::gbuf(self.inputs[0]);
        const auto& X = self.inputs[0]->value;
        std::vector<double> re, im;
        for (std::size_t n = 0; n < N; ++n) {
            plan->power(X.data() + n * Tn, &re, &im);
            plan->adjoint(re, im, self.grad.data() + n * nb, gx + n * Tn);
        }
    });
}

struct TimeEncoderShape {
    std::vector<std::size_t> channels{16, 32, 64};
    std::size_t kernel = 7;
    std::size_t stride = 2;
};

/// Conv stack, each block ReLU(BN(conv)), then time-mean and a linear map to D.
template <class T>
struct TimeEncoder {
    struct Block {
        Tensor<T> weight, bias, gamma, beta;
    };
    std::vector<Block> blocks;
    Linear<T> proj;
    TimeEncoderShape shape;

    TimeEncoder() = default;
    TimeEncoder(std::size_t D, Rng& rng, TimeEncoderShape s = {}) : shape(std::move(s)) {
        std::size_t cin = 1;
        for (auto cout : shape.channels) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(cin * shape.kernel));
            blocks.push_back({uniform_param<T>({cout, cin, shape.kernel}, bound, rng), uniform_param<T>({cout}, bound, rng),
                              Tensor<T>::full({cout}, T(1), true), Tensor<T>::zeros({cout}, true)});
            cin = cout;
        }
        proj = Linear<T>(cin, D, rng);
    }

    /// x [N, T] -> [N, D]. `fixed` substitutes constant normalization
    /// statistics per block; `observed` receives the batch statistics.
    Tensor<T> operator()(const Tensor<T>& x, const std::vector<BatchStats<T>>* fixed = nullptr,
                         std::vector<BatchStats<T>>* observed = nullptr) const {
        if (x.rank() != 2) shape_error("time_encode", "expected [N, T], got " + to_string(x.shape()));
        auto h = reshape(x, {x.dim(0), 1, x.dim(1)});
        if (observed) observed->assign(blocks.size(), {});
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const auto& b = blocks[i];
            h = conv1d(h, b.weight, b.bias, shape.stride, shape.kernel / 2);
            h = batch_norm(h, b.gamma, b.beta, fixed ? &(*fixed)[i] : nullptr, observed ? &(*observed)[i] : nullptr);
            h = relu(h);
        }
        return proj(mean_last(h));
    }

    void collect(ParamList<T>& out, const std::string& prefix) {
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const auto p = prefix + ".block" + std::to_string(i);
            out.push_back({p + ".conv.weight", &blocks[i].weight});
            out.push_back({p + ".conv.bias", &blocks[i].bias});
            out.push_back({p + ".bn.gamma", &blocks[i].gamma});
            out.push_back({p + ".bn.beta", &blocks[i].beta});
        }
        proj.collect(out, prefix + ".proj");
    }
};

/// log(1 + band power) through a two-layer ReLU MLP.
template <class T>
struct FreqEncoder {
    Linear<T> fc1, fc2;
    std::shared_ptr<const BandPowerPlan> plan;

    FreqEncoder() = default;
    FreqEncoder(std::size_t D, std::shared_ptr<const BandPowerPlan> p, Rng& rng)
        : fc1(p->bands(), D, rng), fc2(D, D, rng), plan(std::move(p)) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return fc2(relu(fc1(log1p(band_power(x, plan))))); }

    void collect(ParamList<T>& out, const std::string& prefix) {
        fc1.collect(out, prefix + ".fc1");
        fc2.collect(out, prefix + ".fc2");
    }
};

template <class T>
struct FeatureTriple {
    Tensor<T> time, freq, raw;  // each [B, L, D]
};

template <class T>
struct Hfpm {
    std::size_t T_len = 0, D = 0;
    TimeEncoder<T> time;
    FreqEncoder<T> freq;
    Linear<T> raw;  // single linear T -> D

    Hfpm() = default;
    Hfpm(std::size_t series_len, std::size_t D, const BandSpec& bands, double fs, Rng& rng)
        : T_len(series_len), D(D), time(D, rng), freq(D, std::make_shared<BandPowerPlan>(bands, series_len, fs), rng), raw(series_len, D, rng) {}

    void check_length(const Tensor<T>& x, const char* op) const {
        if (x.shape().back() != T_len)
            shape_error(op, "series length " + std::to_string(x.shape().back()) + ", configured T=" + std::to_string(T_len));
    }

    Tensor<T> time_encode(const Tensor<T>& x) const {
        check_length(x, "time_encode");
        return time(x);
    }
    Tensor<T> freq_encode(const Tensor<T>& x) const {
        check_length(x, "freq_encode");
        return freq(x);
    }
    Tensor<T> raw_encode(const Tensor<T>& x) const {
        check_length(x, "raw_encode");
        return raw(x);
    }

    /// x [B, L, T] -> three [B, L, D] feature maps. Rows are processed as
    /// B*L independent series.
    FeatureTriple<T> operator()(const Tensor<T>& x) const {
        if (x.rank() != 3) shape_error("hfpm", "expected [B, L, T], got " + to_string(x.shape()));
        check_length(x, "hfpm");
        const std::size_t B = x.dim(0), L = x.dim(1);
        auto flat = reshape(x, {B * L, T_len});
        return {reshape(time(flat), {B, L, D}), reshape(freq(flat), {B, L, D}), reshape(raw(flat), {B, L, D})};
    }

    void collect(ParamList<T>& out, const std::string& prefix) {
        time.collect(out, prefix + ".time");
        freq.collect(out, prefix + ".freq");
        raw.collect(out, prefix + ".raw");
    }
};

/// EegBatch samples as a [B, L, T] tensor.
template <class T>
Tensor<T> batch_tensor(const EegBatch& x) {
    return Tensor<T>::from({x.B, x.L(), x.T}, std::vector<T>(x.data.begin(), x.data.end()));
}

}  // namespace untf
