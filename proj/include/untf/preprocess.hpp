#pragma once

// Signal conditioning (band-pass + notch, zero phase), resampling to 200 Hz,
// unit scaling with per-channel standardization, and the seeded
// noise / channel-loss / drift augmentations applied to EegBatch tensors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "untf/numerics/error.hpp"
#include "untf/numerics/layers.hpp"

namespace untf {

inline constexpr double kTargetRate = 200.0;

enum class AmplitudeUnit { volts, millivolts, microvolts };

struct RawRecording {
    std::vector<std::pair<std::string, std::vector<double>>> channels;
    double fs = kTargetRate;
    AmplitudeUnit unit = AmplitudeUnit::microvolts;

    void validate() const {
        if (!(fs > 0)) throw ValidationError("recording: sampling rate must be positive");
        if (channels.empty()) throw ValidationError("recording: no channels");
        for (const auto& [name, x] : channels)
            if (x.size() != channels.front().second.size())
                throw ValidationError("recording: channel " + name + " has a different length");
    }
};

/// Fixed-shape batch: data is [B, R, E, T] row-major, `valid` flags each of
/// the B*L electrode slots (L = R*E).
struct EegBatch {
    std::size_t B = 0, R = 0, E = 0, T = 0;
    double fs = kTargetRate;
    std::vector<float> data;
    std::vector<std::uint8_t> valid;
    std::vector<std::int32_t> labels;  // empty when unlabeled

    std::size_t L() const { return R * E; }
    std::span<float> row(std::size_t b, std::size_t l) { return {data.data() + (b * L() + l) * T, T}; }
    std::span<const float> row(std::size_t b, std::size_t l) const {
        return {data.data() + (b * L() + l) * T, T};
    }
    bool is_valid(std::size_t b, std::size_t l) const { return valid[b * L() + l] != 0; }

    static EegBatch zeros(std::size_t B, std::size_t R, std::size_t E, std::size_t T) {
        EegBatch x;
        x.B = B;
        x.R = R;
        x.E = E;
        x.T = T;
        x.data.assign(B * R * E * T, 0.0f);
        x.valid.assign(B * R * E, 1);
        return x;
    }
};

// ---------------------------------------------------------------------------
// Filtering
// ---------------------------------------------------------------------------

/// Normalized second-order section (a0 = 1).
struct Biquad {
    double b0, b1, b2, a1, a2;
};

namespace detail {

inline Biquad rbj(double f0, double fs, double q, int kind) {
    const double w0 = 2 * std::numbers::pi * f0 / fs;
    const double c = std::cos(w0), alpha = std::sin(w0) / (2 * q);
    const double a0 = 1 + alpha;
    double b0, b1, b2;
    switch (kind) {
        case 0:  // low-pass
            b0 = b2 = (1 - c) / 2;
            b1 = 1 - c;
            break;
        case 1:  // high-pass
            b0 = b2 = (1 + c) / 2;
            b1 = -(1 + c);
            break;
        default:  // notch
            b0 = b2 = 1;
            b1 = -2 * c;
    }
    return {b0 / a0, b1 / a0, b2 / a0, -2 * c / a0, (1 - alpha) / a0};
}

}  // namespace detail

/// Butterworth cascade of even order via bilinear sections (prewarped at fc).
inline std::vector<Biquad> butterworth(int order, double fc, double fs, bool highpass) {
    if (order <= 0 || order % 2) throw ValidationError("butterworth: order must be even and positive");
    std::vector<Biquad> out;
    for (int k = 0; k < order / 2; ++k) {
        const double q = 1.0 / (2 * std::sin((2 * k + 1) * std::numbers::pi / (2.0 * order)));
        out.push_back(detail::rbj(fc, fs, q, highpass ? 1 : 0));
    }
    return out;
}

inline Biquad notch(double f0, double fs, double q) { return detail::rbj(f0, fs, q, 2); }

struct FilterDesign {
    double low_hz = 0.5;
    double high_hz = 50.0;
    double notch_hz = 50.0;
    double notch_q = 30.0;
    int band_order = 4;  // per edge

    int total_order() const { return 2 * band_order + 2; }
    std::size_t pad_length() const { return 3 * static_cast<std::size_t>(total_order()); }

    std::vector<Biquad> sections(double fs) const {
        auto s = butterworth(band_order, low_hz, fs, true);
        auto lp = butterworth(band_order, high_hz, fs, false);
        s.insert(s.end(), lp.begin(), lp.end());
        s.push_back(notch(notch_hz, fs, notch_q));
        return s;
    }
};

/// Magnitude response |H(e^{jw})| of a cascade at frequency f.
inline double magnitude(std::span<const Biquad> sos, double f, double fs) {
    const double w = 2 * std::numbers::pi * f / fs;
    double mag = 1;
    for (const auto& s : sos) {
        const double cr = s.b0 + s.b1 * std::cos(w) + s.b2 * std::cos(2 * w);
        const double ci = -s.b1 * std::sin(w) - s.b2 * std::sin(2 * w);
        const double dr = 1 + s.a1 * std::cos(w) + s.a2 * std::cos(2 * w);
        const double di = -s.a1 * std::sin(w) - s.a2 * std::sin(2 * w);
        mag *= std::sqrt((cr * cr + ci * ci) / (dr * dr + di * di));
    }
    return mag;
}

/// Direct-form II transposed cascade, starting from the steady state for a
/// constant input equal to x[0].
inline std::vector<double> sosfilt_steady(std::span<const Biquad> sos, std::span<const double> x) {
    std::vector<double> y(x.begin(), x.end());
    if (y.empty()) return y;
    double level = y[0];
    for (const auto& s : sos) {
        const double dc_gain = (s.b0 + s.b1 + s.b2) / (1 + s.a1 + s.a2);
        const double out = dc_gain * level;
        double z2 = s.b2 * level - s.a2 * out;
        double z1 = s.b1 * level - s.a1 * out + z2;
        for (double& v : y) {
            const double in = v;
            v = s.b0 * in + z1;
            z1 = s.b1 * in - s.a1 * v + z2;
            z2 = s.b2 * in - s.a2 * v;
        }
        level = out;
    }
    return y;
}

/// Forward-backward filtering with odd reflection padding at both edges.
inline std::vector<double> filtfilt(std::span<const Biquad> sos, std::span<const double> x, std::size_t pad) {
    const std::size_t n = x.size();
    if (n <= pad) throw ValidationError("filtfilt: signal shorter than edge padding");
    std::vector<double> ext;
    ext.reserve(n + 2 * pad);
    for (std::size_t i = pad; i >= 1; --i) ext.push_back(2 * x[0] - x[i]);
    ext.insert(ext.end(), x.begin(), x.end());
    for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2 * x[n - 1] - x[n - 1 - i]);
    auto fwd = sosfilt_steady(sos, ext);
    std::reverse(fwd.begin(), fwd.end());
    auto bwd = sosfilt_steady(sos, fwd);
    std::reverse(bwd.begin(), bwd.end());
    return {bwd.begin() + static_cast<std::ptrdiff_t>(pad), bwd.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

/// 0.5-50 Hz band-pass plus 50 Hz notch, zero phase.
inline std::vector<double> zero_phase_filter(std::span<const double> x, double fs,
                                             const FilterDesign& design = {}) {
    if (fs < 120) throw ValidationError("zero_phase_filter: fs " + std::to_string(fs) + " Hz is below 120 Hz");
    const auto order = static_cast<std::size_t>(design.total_order());
    if (x.size() <= 6 * order)
        throw ValidationError("zero_phase_filter: need more than " + std::to_string(6 * order) +
                              " samples, got " + std::to_string(x.size()));
    const auto sos = design.sections(fs);
    return filtfilt(sos, x, design.pad_length());
}

// ---------------------------------------------------------------------------
// Resampling and scaling
// ---------------------------------------------------------------------------

/// Downsample to 200 Hz: stride decimation for integer ratios, otherwise
/// Hann-windowed sinc interpolation. Expects band-limited input.
inline std::vector<double> resample_to_200(std::span<const double> x, double fs_in) {
    if (fs_in < kTargetRate)
        throw ValidationError("resample_to_200: input rate " + std::to_string(fs_in) + " Hz is below 200 Hz");
    if (fs_in == kTargetRate) return {x.begin(), x.end()};
    const double ratio = fs_in / kTargetRate;
    const auto out_len = static_cast<std::size_t>(std::floor(static_cast<double>(x.size()) * kTargetRate / fs_in));
    std::vector<double> y(out_len);
    const double nearest = std::round(ratio);
    if (std::abs(ratio - nearest) < 1e-12) {
        const auto step = static_cast<std::size_t>(nearest);
        for (std::size_t i = 0; i < out_len; ++i) y[i] = x[i * step];
        return y;
    }
    const double cutoff = 1.0 / ratio;  // in cycles per input sample * 2
    const double half_width = 16.0 * ratio;
    const auto n = static_cast<std::ptrdiff_t>(x.size());
    for (std::size_t i = 0; i < out_len; ++i) {
        const double t = static_cast<double>(i) * ratio;
        const auto lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::ceil(t - half_width)));
        const auto hi = std::min<std::ptrdiff_t>(n - 1, static_cast<std::ptrdiff_t>(std::floor(t + half_width)));
        double acc = 0, wsum = 0;
        for (auto m = lo; m <= hi; ++m) {
            const double u = t - static_cast<double>(m);
            const double arg = std::numbers::pi * cutoff * u;
            const double sinc = u == 0 ? 1.0 : std::sin(arg) / arg;
            const double win = 0.5 * (1 + std::cos(std::numbers::pi * u / half_width));
            const double w = cutoff * sinc * win;
            acc += w * x[static_cast<std::size_t>(m)];
            wsum += w;
        }
        y[i] = wsum != 0 ? acc / wsum : 0.0;
    }
    return y;
}

inline double to_millivolts(AmplitudeUnit unit) {
    switch (unit) {
        case AmplitudeUnit::volts: return 1e3;
        case AmplitudeUnit::millivolts: return 1.0;
        case AmplitudeUnit::microvolts: return 1e-3;
    }
    return 1.0;
}

inline constexpr double kVarianceFloor = 1e-12;

/// Convert to millivolts, then standardize to zero mean and unit variance.
/// Channels whose variance is below the floor become all zeros.
inline std::vector<double> scale_and_normalize(std::span<const double> x, AmplitudeUnit unit) {
    std::vector<double> y(x.size());
    if (y.empty()) return y;
    const double k = to_millivolts(unit);
    double mu = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i])) throw NumericFault("scale_and_normalize: non-finite input");
        y[i] = x[i] * k;
        mu += y[i];
    }
    mu /= static_cast<double>(y.size());
    double var = 0;
    for (double v : y) var += (v - mu) * (v - mu);
    var /= static_cast<double>(y.size());
    if (var < kVarianceFloor) return std::vector<double>(y.size(), 0.0);
    const double inv = 1.0 / std::sqrt(var);
    for (double& v : y) v = (v - mu) * inv;
    return y;
}

/// Full conditioning chain for one recording: filter at the native rate,
/// downsample to 200 Hz, scale to millivolts and standardize.
inline RawRecording condition(const RawRecording& rec, const FilterDesign& design = {}) {
    rec.validate();
    RawRecording out;
    out.fs = kTargetRate;
    out.unit = AmplitudeUnit::millivolts;
    for (const auto& [name, x] : rec.channels) {
        auto filtered = zero_phase_filter(x, rec.fs, design);
        auto resampled = resample_to_200(filtered, rec.fs);
        out.channels.emplace_back(name, scale_and_normalize(resampled, rec.unit));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
    double p_noise = 0.3;
    double p_channel_loss = 0.1;
    double p_drift = 0.3;
    double noise_sigma = 0.1;
    std::size_t max_drift = 20;
    std::uint64_t seed = 0;

    void validate(std::size_t T) const {
        for (double p : {p_noise, p_channel_loss, p_drift})
            if (!(p >= 0 && p <= 1)) throw ValidationError("augment: probabilities must lie in [0, 1]");
        if (!(noise_sigma >= 0)) throw ValidationError("augment: noise_sigma must be non-negative");
        if (T > 0 && max_drift * 10 >= T)
            throw ValidationError("augment: max_drift " + std::to_string(max_drift) + " must be below T/10 = " +
                                  std::to_string(T / 10.0));
    }
};

/// Per sample, in order: noise, channel loss, drift; each gated by its own
/// Bernoulli draw from one generator seeded by cfg.seed.
inline EegBatch augment(const EegBatch& x, const AugmentConfig& cfg) {
    cfg.validate(x.T);
    EegBatch y = x;
    Rng rng = make_rng(cfg.seed, 0xA06);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t L = x.L(), T = x.T;
    for (std::size_t b = 0; b < x.B; ++b) {
        if (unit(rng) < cfg.p_noise) {
            for (std::size_t l = 0; l < L; ++l) {
                if (!y.is_valid(b, l)) continue;
                for (float& v : y.row(b, l)) v += static_cast<float>(cfg.noise_sigma * gauss(rng));
            }
        }
        if (unit(rng) < cfg.p_channel_loss) {
            std::vector<std::size_t> live;
            for (std::size_t l = 0; l < L; ++l)
                if (y.is_valid(b, l)) live.push_back(l);
            if (!live.empty()) {
                std::uniform_int_distribution<std::size_t> pick(0, live.size() - 1);
                const std::size_t l = live[pick(rng)];
                std::fill(y.row(b, l).begin(), y.row(b, l).end(), 0.0f);
                y.valid[b * L + l] = 0;
            }
        }
        if (unit(rng) < cfg.p_drift && cfg.max_drift > 0) {
            const auto m = static_cast<long>(cfg.max_drift);
            std::uniform_int_distribution<long> shift_dist(-m, m);
            const long shift = shift_dist(rng);
            const auto t = static_cast<long>(T);
            for (std::size_t l = 0; l < L; ++l) {
                auto row = y.row(b, l);
                std::vector<float> src(row.begin(), row.end());
                for (long i = 0; i < t; ++i) row[static_cast<std::size_t>(i)] = src[static_cast<std::size_t>(((i - shift) % t + t) % t)];
            }
        }
    }
    return y;
}

}  // namespace untf
