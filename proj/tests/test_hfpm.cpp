#include <gtest/gtest.h>

#include <complex>
#include <numbers>

#include "helpers.hpp"
#include "untf/hfpm.hpp"
#include "untf/numerics/grad_check.hpp"

using namespace untf;

namespace {

std::vector<double> tone(double f, std::size_t n, double fs = 200) {
    std::vector<double> x(n);
    for (std::size_t t = 0; t < n; ++t) x[t] = std::sin(2 * std::numbers::pi * f * static_cast<double>(t) / fs);
    return x;
}

// Brute-force mean |X_k|^2 over bins with lo <= k*fs/T < hi.
double dft_band_power(const std::vector<double>& x, double lo, double hi, double fs = 200) {
    const std::size_t T = x.size();
    double acc = 0;
    std::size_t bins = 0;
    for (std::size_t k = 0; k <= T / 2; ++k) {
        const double f = static_cast<double>(k) * fs / static_cast<double>(T);
        if (f < lo || f >= hi) continue;
        std::complex<double> X = 0;
        for (std::size_t t = 0; t < T; ++t)
            X += x[t] * std::exp(std::complex<double>(0, -2 * std::numbers::pi * static_cast<double>(k * t) / static_cast<double>(T)));
        acc += std::norm(X);
        ++bins;
    }
    return acc / static_cast<double>(bins);
}

struct Small {
    static constexpr std::size_t T = 64, D = 8;
    Rng rng = make_rng(31);
    Hfpm<double> h{T, D, BandSpec{}, 200.0, rng};
};

std::vector<double> row(const TensorD& x, std::size_t r) {
    const std::size_t n = x.shape().back();
    return {x.values().begin() + static_cast<std::ptrdiff_t>(r * n), x.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * n)};
}

}  // namespace

TEST(BandPower, ZeroSignal) {
    for (double p : band_power(std::vector<double>(400, 0.0), BandSpec{})) EXPECT_EQ(p, 0.0);
}

TEST(BandPower, AlphaTone) {
    BandSpec spec;
    auto p = band_power(tone(10, 400), spec);
    // 10 Hz sits on bin 20; alpha spans bins 16..25.
    const double expected = 200.0 * 200.0 / 10.0;
    EXPECT_NEAR(p[spec.index_of("alpha")], expected, 1e-6 * expected);
    for (const auto& b : spec.bands) {
        if (b.name != "alpha") {
            EXPECT_LT(p[spec.index_of(b.name)], 1e-9 * expected);
        }
    }
}

TEST(BandPower, ThetaPlusBeta) {
    BandSpec spec;
    auto x = tone(5, 400), y = tone(20, 400);
    for (std::size_t t = 0; t < x.size(); ++t) x[t] += y[t];
    auto p = band_power(x, spec);
    for (const auto& b : spec.bands)
        EXPECT_NEAR(p[spec.index_of(b.name)], dft_band_power(x, b.lo_hz, b.hi_hz), 1e-6 * (1 + dft_band_power(x, b.lo_hz, b.hi_hz)));
    EXPECT_NEAR(p[spec.index_of("theta")], dft_band_power(tone(5, 400), 4, 8), 1e-6);
    EXPECT_NEAR(p[spec.index_of("beta")], dft_band_power(tone(20, 400), 13, 30), 1e-6);
    EXPECT_LT(p[spec.index_of("alpha")], 1e-9);
}

TEST(BandPower, MatchesDftOnNoise) {
    Rng rng = make_rng(32);
    BandSpec spec;
    auto x = test::randn(300, rng);
    auto p = band_power(x, spec);
    for (const auto& b : spec.bands) {
        const double ref = dft_band_power(x, b.lo_hz, b.hi_hz);
        EXPECT_NEAR(p[spec.index_of(b.name)], ref, 1e-9 * ref);
    }
}

TEST(BandPower, CircularShiftInvariant) {
    Rng rng = make_rng(33);
    auto x = test::randn(400, rng);
    std::vector<double> y(400);
    for (std::size_t t = 0; t < 400; ++t) y[t] = x[(t + 37) % 400];
    auto a = band_power(x, BandSpec{}), b = band_power(y, BandSpec{});
    for (std::size_t j = 0; j < a.size(); ++j) EXPECT_NEAR(a[j], b[j], 1e-9 * a[j]);
}

TEST(BandPower, FullBandParseval) {
    // Parseval on a zero-mean series, then the five bands cover part of that energy.
    Rng rng = make_rng(34);
    auto x = test::randn(400, rng);
    double mean = 0;
    for (double v : x) mean += v;
    mean /= 400;
    for (auto& v : x) v -= mean;  // drop bin 0
    double energy = 0;
    for (double v : x) energy += v * v;
    // Bin 200 (Nyquist) enters once, the others twice in the two-sided sum.
    double spectral = 0;
    for (std::size_t k = 1; k <= 200; ++k) {
        std::complex<double> X = 0;
        for (std::size_t t = 0; t < 400; ++t) X += x[t] * std::exp(std::complex<double>(0, -2 * std::numbers::pi * static_cast<double>(k * t) / 400.0));
        spectral += (k == 200 ? 1.0 : 2.0) * std::norm(X);
    }
    EXPECT_NEAR(spectral / 400.0, energy, 1e-8 * energy);
    BandSpec spec;
    double recon = 0;
    auto p = band_power(x, spec);
    for (const auto& b : spec.bands) {
        std::size_t bins = 0;
        for (std::size_t k = 0; k <= 200; ++k) {
            const double f = static_cast<double>(k) * 0.5;
            bins += f >= b.lo_hz && f < b.hi_hz;
        }
        recon += 2.0 * p[spec.index_of(b.name)] * static_cast<double>(bins);
    }
    // Bands stop at 50 Hz, so only a part of the energy is covered.
    EXPECT_LT(recon / 400.0, energy);
    EXPECT_GT(recon / 400.0, 0.3 * energy);
}

TEST(BandPower, RejectsBadBands) {
    BandSpec spec;
    spec.bands[2].lo_hz = 6;
    EXPECT_THROW(spec.validate(), ValidationError);
    spec = BandSpec{};
    spec.bands.pop_back();
    EXPECT_THROW(spec.validate(), ValidationError);
}

TEST(BandPower, DifferentiableMatchesScalar) {
    Rng rng = make_rng(35);
    auto x = test::rand_tensor({3, 400}, rng);
    auto plan = std::make_shared<BandPowerPlan>(BandSpec{}, 400, 200.0);
    auto p = band_power(x, plan);
    for (std::size_t r = 0; r < 3; ++r) {
        auto ref = band_power(row(x, r), BandSpec{});
        for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(p[r * 5 + j], ref[j], 1e-9 * ref[j]);
    }
}

TEST(TimeEncode, ZeroInputIsConstantAcrossRows) {
    Small s;
    auto y = s.h.time_encode(TensorD::zeros({5, Small::T}));
    for (std::size_t r = 1; r < 5; ++r) EXPECT_EQ(row(y, r), row(y, 0));
}

TEST(TimeEncode, IdenticalRowsGiveIdenticalOutputs) {
    Small s;
    auto x = test::randn(Small::T, s.rng);
    auto other = test::randn(Small::T, s.rng);
    std::vector<double> v = x;
    v.insert(v.end(), other.begin(), other.end());
    v.insert(v.end(), x.begin(), x.end());
    auto y = s.h.time_encode(TensorD::from({3, Small::T}, v));
    EXPECT_LT(test::max_abs_diff(row(y, 0), row(y, 2)), 1e-12);
}

TEST(TimeEncode, GradientMatchesFiniteDifferences) {
    Small s;
    auto x = test::rand_tensor({3, Small::T}, s.rng);
    auto rep = grad_check([&](const TensorD& in) { return mean(s.h.time_encode(in)); }, x, 1e-5, 1e-3);
    EXPECT_LT(rep.max_rel_error, 1e-3);
}

TEST(TimeEncode, FixedStatisticsMakeRowsLocal) {
    Small s;
    auto x = test::rand_tensor({4, Small::T}, s.rng);
    std::vector<BatchStats<double>> stats;
    s.h.time(x, nullptr, &stats);
    auto base = s.h.time(x, &stats);
    auto v = std::vector<double>(x.values().begin(), x.values().end());
    for (std::size_t t = 0; t < Small::T; ++t) v[2 * Small::T + t] += 0.5;
    auto moved = s.h.time(TensorD::from(x.shape(), v), &stats);
    for (std::size_t r = 0; r < 4; ++r) {
        const double d = test::max_abs_diff(row(base, r), row(moved, r));
        if (r == 2)
            EXPECT_GT(d, 1e-6);
        else
            EXPECT_EQ(d, 0.0);
    }
}

TEST(FreqEncode, IdenticalRowsGiveIdenticalOutputs) {
    Small s;
    auto x = test::randn(Small::T, s.rng);
    std::vector<double> v = x;
    v.insert(v.end(), x.begin(), x.end());
    auto y = s.h.freq_encode(TensorD::from({2, Small::T}, v));
    EXPECT_EQ(row(y, 0), row(y, 1));
}

TEST(FreqEncode, ZeroWeightsGiveBias) {
    Small s;
    std::fill(s.h.freq.fc2.weight.mutable_values().begin(), s.h.freq.fc2.weight.mutable_values().end(), 0.0);
    auto y = s.h.freq_encode(test::rand_tensor({3, Small::T}, s.rng));
    auto bias = std::vector<double>(s.h.freq.fc2.bias.values().begin(), s.h.freq.fc2.bias.values().end());
    for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(row(y, r), bias);
}

TEST(FreqEncode, GradientMatchesFiniteDifferences) {
    Small s;
    auto x = test::rand_tensor({2, Small::T}, s.rng);
    auto rep = grad_check([&](const TensorD& in) { return mean(s.h.freq_encode(in)); }, x, 1e-5, 1e-3);
    EXPECT_LT(rep.max_rel_error, 1e-3);
}

TEST(RawEncode, ZeroInputGivesBias) {
    Small s;
    auto y = s.h.raw_encode(TensorD::zeros({2, Small::T}));
    auto bias = std::vector<double>(s.h.raw.bias.values().begin(), s.h.raw.bias.values().end());
    EXPECT_EQ(row(y, 1), bias);
}

TEST(RawEncode, IdentitySliceCopiesPrefix) {
    Rng rng = make_rng(36);
    constexpr std::size_t n = 64;
    Hfpm<double> h(n, n, BandSpec{}, 200.0, rng);
    auto& w = h.raw.weight.mutable_values();
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) w[i * n + i] = 1.0;
    std::fill(h.raw.bias.mutable_values().begin(), h.raw.bias.mutable_values().end(), 0.0);
    auto x = test::rand_tensor({1, n}, rng);
    auto y = h.raw_encode(x);
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(RawEncode, AffineLinearity) {
    Small s;
    auto x = test::rand_tensor({2, Small::T}, s.rng), y = test::rand_tensor({2, Small::T}, s.rng);
    const double a = 0.8, b = -1.3;
    std::vector<double> mix(x.size());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * y[i];
    auto lhs = s.h.raw_encode(TensorD::from(x.shape(), mix));
    auto rx = s.h.raw_encode(x), ry = s.h.raw_encode(y);
    for (std::size_t i = 0; i < lhs.size(); ++i)
        EXPECT_NEAR(lhs[i], a * rx[i] + b * ry[i] - (a + b - 1) * s.h.raw.bias[i % Small::D], 1e-10);
}

TEST(Hfpm, ToyShapes) {
    // T=64 is the shortest series at 200 Hz that puts a DFT bin in every band.
    Rng rng = make_rng(37);
    Hfpm<double> h(64, 6, BandSpec{}, 200.0, rng);
    auto out = h(test::rand_tensor({1, 4, 64}, rng));
    for (const auto* t : {&out.time, &out.freq, &out.raw}) EXPECT_EQ(t->shape(), (Shape{1, 4, 6}));
}

TEST(Hfpm, ShortSeriesLeavesBandsEmpty) {
    Rng rng = make_rng(38);
    EXPECT_THROW(Hfpm<double>(8, 6, BandSpec{}, 200.0, rng), ValidationError);
}

TEST(Hfpm, RejectsWrongLength) {
    Small s;
    EXPECT_THROW(s.h(TensorD::zeros({1, 2, Small::T + 1})), ShapeError);
}

TEST(Hfpm, PermutingElectrodesPermutesRows) {
    Small s;
    const std::size_t L = 4, T = Small::T, D = Small::D;
    auto x = test::rand_tensor({1, L, T}, s.rng);
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    std::vector<double> v(x.size());
    for (std::size_t l = 0; l < L; ++l)
        for (std::size_t t = 0; t < T; ++t) v[l * T + t] = x[perm[l] * T + t];
    auto a = s.h(x), b = s.h(TensorD::from(x.shape(), v));
    for (auto member : {&FeatureTriple<double>::time, &FeatureTriple<double>::freq, &FeatureTriple<double>::raw})
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t d = 0; d < D; ++d) EXPECT_NEAR((b.*member)[l * D + d], (a.*member)[perm[l] * D + d], 1e-12);
}

TEST(Hfpm, FrequencyAndRawPathsAreLocal) {
    Small s;
    const std::size_t L = 3, T = Small::T, D = Small::D;
    auto x = test::rand_tensor({1, L, T}, s.rng);
    auto v = std::vector<double>(x.values().begin(), x.values().end());
    for (std::size_t t = 0; t < T; ++t) v[T + t] *= 2.0;
    auto a = s.h(x), b = s.h(TensorD::from(x.shape(), v));
    for (auto member : {&FeatureTriple<double>::freq, &FeatureTriple<double>::raw})
        for (std::size_t l = 0; l < L; ++l) {
            double d = 0;
            for (std::size_t k = 0; k < D; ++k) d = std::max(d, std::abs((a.*member)[l * D + k] - (b.*member)[l * D + k]));
            if (l == 1)
                EXPECT_GT(d, 1e-9);
            else
                EXPECT_EQ(d, 0.0);
        }
}
