#pragma once

// Synthetic labeled EEG: spatially correlated pink noise plus class-specific
// band-limited bursts on one region's electrodes, run through the same
// conditioning chain as real recordings.

#include <cmath>
#include <numbers>
#include <random>

#include "untf/config.hpp"
#include "untf/dataset.hpp"
#include "untf/topology.hpp"

namespace untf {

/// The first E electrodes of every region in table order.
inline std::vector<std::string> synthetic_montage(std::size_t E, const TopologyTable& table = default_topology_table()) {
    std::vector<std::string> names;
    for (std::size_t r = 0; r < table.R; ++r) {
        std::size_t taken = 0;
        std::vector<const TableEntry*> in_region;
        for (const auto& e : table.entries)
            if (e.region == r) in_region.push_back(&e);
        std::sort(in_region.begin(), in_region.end(), [](auto* a, auto* b) { return a->intra < b->intra; });
        for (auto* e : in_region)
            if (taken++ < E) names.push_back(e->name);
    }
    return names;
}

/// Unit-variance pink (1/f) noise via Kellet's filter on white noise.
inline std::vector<double> pink_noise(std::size_t n, Rng& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    double b0 = 0, b1 = 0, b2 = 0, b3 = 0, b4 = 0, b5 = 0, b6 = 0;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double w = g(rng);
        b0 = 0.99886 * b0 + w * 0.0555179;
        b1 = 0.99332 * b1 + w * 0.0750759;
        b2 = 0.96900 * b2 + w * 0.1538520;
        b3 = 0.86650 * b3 + w * 0.3104856;
        b4 = 0.55000 * b4 + w * 0.5329522;
        b5 = -0.7616 * b5 - w * 0.0168980;
        out[i] = b0 + b1 + b2 + b3 + b4 + b5 + b6 + w * 0.5362;
        b6 = w * 0.115926;
    }
    double m = 0, v = 0;
    for (double x : out) m += x;
    m /= static_cast<double>(n);
    for (double x : out) v += (x - m) * (x - m);
    const double sd = std::sqrt(v / static_cast<double>(n));
    for (double& x : out) x = (x - m) / sd;
    return out;
}

/// Background variance shares: global, per-region and per-electrode sources.
inline constexpr double kGlobalShare = 0.4, kRegionShare = 0.4, kLocalShare = 0.2;

/// One raw recording (microvolts, at synth.raw_fs) of class `label`.
inline RawRecording synthesize_recording(const ModelConfig& cfg, const TopologyMap& map, std::int32_t label, Rng& rng) {
    const auto& s = cfg.synth;
    const auto& a = cfg.arch;
    const std::size_t margin = 100;  // samples at 200 Hz trimmed on each side after conditioning
    const double seconds = static_cast<double>(a.samples + 2 * margin) / kTargetRate;
    const auto n = static_cast<std::size_t>(std::ceil(seconds * s.raw_fs));
    const double amp_uv = 20.0;

    auto global = pink_noise(n, rng);
    std::vector<std::vector<double>> regional;
    for (std::size_t r = 0; r < map.R; ++r) regional.push_back(pink_noise(n, rng));

    const auto& band = a.bands.bands[a.bands.index_of(s.band_profile[static_cast<std::size_t>(label)])];
    const auto& regions = region_names();
    const auto burst_region = static_cast<std::size_t>(
        std::find(regions.begin(), regions.end(), s.region_profile[static_cast<std::size_t>(label)]) - regions.begin());
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double width = band.hi_hz - band.lo_hz;
    const double freq = band.lo_hz + width * (0.2 + 0.6 * unit(rng));
    const double phase = 2 * std::numbers::pi * unit(rng);
    const double dur = (0.5 + unit(rng)) * s.raw_fs;                     // 0.5 to 1.5 s
    const double lo = static_cast<double>(margin) / kTargetRate * s.raw_fs;  // burst inside the kept window
    const double span = static_cast<double>(a.samples) / kTargetRate * s.raw_fs - dur;
    const double start = lo + std::max(0.0, span) * unit(rng);

    RawRecording rec;
    rec.fs = s.raw_fs;
    rec.unit = AmplitudeUnit::microvolts;
    for (const auto& e : map.entries) {
        auto local = pink_noise(n, rng);
        std::vector<double> x(n);
        for (std::size_t i = 0; i < n; ++i)
            x[i] = amp_uv * (std::sqrt(kGlobalShare) * global[i] + std::sqrt(kRegionShare) * regional[e.region][i] +
                             std::sqrt(kLocalShare) * local[i]);
        const double gain = 0.7 + 0.3 * unit(rng);
        if (e.region == burst_region) {
            for (std::size_t i = 0; i < n; ++i) {
                const double u = (static_cast<double>(i) - start) / dur;
                if (u < 0 || u > 1) continue;
                const double win = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * u);
                x[i] += amp_uv * s.snr * std::numbers::sqrt2 * gain * win *
                        std::sin(2 * std::numbers::pi * freq * static_cast<double>(i) / s.raw_fs + phase);
            }
        }
        rec.channels.emplace_back(e.name, std::move(x));
    }
    return rec;
}

/// Class-balanced dataset, classes interleaved. Deterministic in synth.seed.
inline Dataset generate_synthetic(const ModelConfig& cfg) {
    const auto& s = cfg.synth;
    const auto& a = cfg.arch;
    if (s.samples_per_class == 0) throw ValidationError("synth: samples_per_class must be positive");
    const auto map = compact(build_topology(synthetic_montage(a.electrodes), MontageStandard::ten_ten), a.electrodes);
    if (map.E != a.electrodes) throw ValidationError("synth: montage does not fit model.electrodes");
    const std::size_t N = s.classes * s.samples_per_class;
    Dataset ds;
    ds.slot_names = map.slot_names();
    ds.samples = EegBatch::zeros(N, map.R, map.E, a.samples);
    ds.samples.fs = kTargetRate;
    Rng rng = make_rng(s.seed, 0x5E7);
    const std::size_t margin = 100;
    for (std::size_t i = 0; i < N; ++i) {
        const auto label = static_cast<std::int32_t>(i % s.classes);
        auto rec = condition(synthesize_recording(cfg, map, label, rng));
        for (auto& [name, x] : rec.channels) {
            if (x.size() < margin + a.samples) throw ValidationError("synth: conditioned recording too short");
            x.erase(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(margin));
        }
        place_recording(rec, map, ds.samples, i);
        ds.samples.labels.push_back(label);
    }
    return ds;
}

}  // namespace untf
