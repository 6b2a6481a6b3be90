#pragma once

// Flat `key = value` run configuration. Unknown keys and malformed values are
// rejected with the offending line number.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "untf/hfpm.hpp"
#include "untf/objective.hpp"
#include "untf/preprocess.hpp"
#include "untf/topology.hpp"

namespace untf {

struct ArchConfig {
    std::size_t dim = 32;
    std::size_t depth = 2;
    std::size_t heads = 4;
    std::size_t experts = 4;
    std::size_t top_k = 2;
    std::size_t ffn_mult = 4;
    double aux_alpha = 0.01;
    bool topology = true;  // false: embedding tables zeroed and frozen
    std::size_t dcm_heads = 4;
    std::size_t dcm_ffn_mult = 2;
    std::size_t samples = 400;  // T
    std::size_t regions = 5;    // R
    std::size_t electrodes = 4; // E
    double fs = 200.0;
    BandSpec bands;

    std::size_t seq_len() const { return regions * electrodes; }
};

struct TrainConfig {
    double lr = 1e-3;
    double wd = 1e-4;
    double warmup_epochs = 5;
    std::size_t epochs = 10;
    double clip = 1.0;
    double mask_ratio = 0.25;
    LossWeights weights;
    std::uint64_t seed = 0;
    std::size_t batch_size = 8;
    std::size_t max_steps = 0;  // 0 = epochs * steps per epoch
};

struct ProbeConfig {
    std::size_t epochs = 200;
    double lr = 1e-3;
    double train_fraction = 0.7;
    std::size_t finetune_epochs = 3;
    double finetune_lr = 1e-4;
};

struct SynthConfig {
    std::size_t classes = 2;
    std::vector<std::string> band_profile{"alpha", "beta"};
    std::vector<std::string> region_profile{"frontal", "occipital"};
    double snr = 1.0;  // burst amplitude relative to background standard deviation
    std::size_t samples_per_class = 80;
    double raw_fs = 200.0;
    std::uint64_t seed = 0;
};

struct ModelConfig {
    ArchConfig arch;
    TrainConfig train;
    AugmentConfig aug;
    ProbeConfig probe;
    SynthConfig synth;

    void validate() const;
};

inline void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw ValidationError("config: " + m); };
    const auto& a = arch;
    if (a.dim == 0 || a.dim % 2) fail("model.dim must be positive and even, got " + std::to_string(a.dim));
    if (a.heads == 0 || a.dim % a.heads) fail("model.heads must divide model.dim");
    if ((a.dim / a.heads) % 2) fail("model.dim / model.heads must be even for rotary encoding");
    if (a.dcm_heads == 0 || a.dim % a.dcm_heads) fail("dcm.heads must divide model.dim");
    if (a.experts == 0) fail("model.experts must be at least 1");
    if (a.top_k < 1 || a.top_k > a.experts) fail("model.top_k must lie in [1, model.experts]");
    if (a.ffn_mult == 0 || a.dcm_ffn_mult == 0) fail("ffn multipliers must be positive");
    if (a.aux_alpha < 0) fail("model.aux_alpha must be non-negative");
    if (a.regions != region_names().size()) fail("model.regions must be " + std::to_string(region_names().size()));
    if (a.electrodes == 0) fail("model.electrodes must be positive");
    if (a.fs < 120) fail("model.fs must be at least 120 Hz");
    a.bands.validate();
    BandPowerPlan(a.bands, a.samples, a.fs);
    const auto& t = train;
    t.weights.validate();
    if (!(t.mask_ratio > 0 && t.mask_ratio <= 1)) fail("train.mask_ratio must lie in (0, 1]");
    if (t.lr < 0 || t.wd < 0 || t.warmup_epochs < 0) fail("train.lr, train.wd and train.warmup_epochs must be non-negative");
    if (t.batch_size == 0) fail("train.batch_size must be positive");
    aug.validate(a.samples);
    if (probe.epochs == 0) fail("probe.epochs must be positive");
    if (!(probe.train_fraction > 0 && probe.train_fraction < 1)) fail("probe.train_fraction must lie in (0, 1)");
    const auto& s = synth;
    if (s.classes < 2) fail("synth.classes must be at least 2");
    if (s.band_profile.size() != s.classes || s.region_profile.size() != s.classes)
        fail("synth.band_profile and synth.region_profile need one entry per class");
    for (const auto& b : s.band_profile) a.bands.index_of(b);
    for (const auto& r : s.region_profile) {
        const auto& names = region_names();
        if (std::find(names.begin(), names.end(), r) == names.end()) fail("synth.region_profile: unknown region '" + r + "'");
    }
    if (s.snr < 0) fail("synth.snr must be non-negative");
    if (s.raw_fs < a.fs) fail("synth.raw_fs must be at least model.fs");
}

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

template <class V>
V parse_number(const std::string& s) {
    V v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ValidationError("expected a number, got '" + s + "'");
    return v;
}

inline bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ValidationError("expected true or false, got '" + s + "'");
}

}  // namespace detail

/// Key -> setter table over a config instance.
inline std::map<std::string, std::function<void(const std::string&)>> config_setters(ModelConfig& c) {
    using namespace detail;
    std::map<std::string, std::function<void(const std::string&)>> m;
    auto size = [](std::size_t& f) { return [&f](const std::string& v) { f = parse_number<std::size_t>(v); }; };
    auto u64 = [](std::uint64_t& f) { return [&f](const std::string& v) { f = parse_number<std::uint64_t>(v); }; };
    auto real = [](double& f) { return [&f](const std::string& v) { f = parse_number<double>(v); }; };
    auto flag = [](bool& f) { return [&f](const std::string& v) { f = parse_bool(v); }; };
    auto list = [](std::vector<std::string>& f) { return [&f](const std::string& v) { f = split_list(v); }; };

    m["model.dim"] = size(c.arch.dim);
    m["model.depth"] = size(c.arch.depth);
    m["model.heads"] = size(c.arch.heads);
    m["model.experts"] = size(c.arch.experts);
    m["model.top_k"] = size(c.arch.top_k);
    m["model.ffn_mult"] = size(c.arch.ffn_mult);
    m["model.aux_alpha"] = real(c.arch.aux_alpha);
    m["model.topology"] = flag(c.arch.topology);
    m["model.samples"] = size(c.arch.samples);
    m["model.regions"] = size(c.arch.regions);
    m["model.electrodes"] = size(c.arch.electrodes);
    m["model.fs"] = real(c.arch.fs);
    m["dcm.heads"] = size(c.arch.dcm_heads);
    m["dcm.ffn_mult"] = size(c.arch.dcm_ffn_mult);
    for (auto& b : c.arch.bands.bands) {
        m["bands." + b.name + ".lo"] = real(b.lo_hz);
        m["bands." + b.name + ".hi"] = real(b.hi_hz);
    }

    m["train.lr"] = real(c.train.lr);
    m["train.wd"] = real(c.train.wd);
    m["train.warmup_epochs"] = real(c.train.warmup_epochs);
    m["train.epochs"] = size(c.train.epochs);
    m["train.clip"] = real(c.train.clip);
    m["train.mask_ratio"] = real(c.train.mask_ratio);
    m["train.lambda_t"] = real(c.train.weights.time);
    m["train.lambda_f"] = real(c.train.weights.freq);
    m["train.lambda_aux"] = real(c.train.weights.aux);
    m["train.seed"] = u64(c.train.seed);
    m["train.batch_size"] = size(c.train.batch_size);
    m["train.max_steps"] = size(c.train.max_steps);

    m["aug.p_noise"] = real(c.aug.p_noise);
    m["aug.p_channel_loss"] = real(c.aug.p_channel_loss);
    m["aug.p_drift"] = real(c.aug.p_drift);
    m["aug.noise_sigma"] = real(c.aug.noise_sigma);
    m["aug.max_drift"] = size(c.aug.max_drift);

    m["probe.epochs"] = size(c.probe.epochs);
    m["probe.lr"] = real(c.probe.lr);
    m["probe.train_fraction"] = real(c.probe.train_fraction);
    m["finetune.epochs"] = size(c.probe.finetune_epochs);
    m["finetune.lr"] = real(c.probe.finetune_lr);

    m["synth.classes"] = size(c.synth.classes);
    m["synth.band_profile"] = list(c.synth.band_profile);
    m["synth.region_profile"] = list(c.synth.region_profile);
    m["synth.snr"] = real(c.synth.snr);
    m["synth.samples_per_class"] = size(c.synth.samples_per_class);
    m["synth.raw_fs"] = real(c.synth.raw_fs);
    m["synth.seed"] = u64(c.synth.seed);
    return m;
}

/// Applies `key = value` lines on top of `base`. `source` names the input in
/// error messages.
inline ModelConfig parse_config(std::string_view text, const std::string& source = "config", ModelConfig base = {}) {
    auto setters = config_setters(base);
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto where = source + ":" + std::to_string(lineno) + ": ";
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        const auto body = detail::trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw ValidationError(where + "expected 'key = value'");
        const auto key = detail::trim(std::string_view(body).substr(0, eq));
        const auto value = detail::trim(std::string_view(body).substr(eq + 1));
        auto it = setters.find(key);
        if (it == setters.end()) throw ValidationError(where + "unknown key '" + key + "'");
        if (value.empty()) throw ValidationError(where + "missing value for '" + key + "'");
        try {
            it->second(value);
        } catch (const ValidationError& e) {
            throw ValidationError(where + key + ": " + e.what());
        }
    }
    base.validate();
    return base;
}

inline ModelConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str(), path);
}

/// Architecture fields only; this is what a checkpoint must agree on.
inline nlohmann::ordered_json arch_json(const ArchConfig& a) {
    nlohmann::ordered_json j;
    j["dim"] = a.dim;
    j["depth"] = a.depth;
    j["heads"] = a.heads;
    j["experts"] = a.experts;
    j["top_k"] = a.top_k;
    j["ffn_mult"] = a.ffn_mult;
    j["aux_alpha"] = a.aux_alpha;
    j["topology"] = a.topology;
    j["dcm_heads"] = a.dcm_heads;
    j["dcm_ffn_mult"] = a.dcm_ffn_mult;
    j["samples"] = a.samples;
    j["regions"] = a.regions;
    j["electrodes"] = a.electrodes;
    j["fs"] = a.fs;
    auto& bands = j["bands"] = nlohmann::ordered_json::array();
    for (const auto& b : a.bands.bands) bands.push_back({{"name", b.name}, {"lo", b.lo_hz}, {"hi", b.hi_hz}});
    return j;
}

inline ArchConfig arch_from_json(const nlohmann::json& j) {
    ArchConfig a;
    try {
        a.dim = j.at("dim");
        a.depth = j.at("depth");
        a.heads = j.at("heads");
        a.experts = j.at("experts");
        a.top_k = j.at("top_k");
        a.ffn_mult = j.at("ffn_mult");
        a.aux_alpha = j.at("aux_alpha");
        a.topology = j.at("topology");
        a.dcm_heads = j.at("dcm_heads");
        a.dcm_ffn_mult = j.at("dcm_ffn_mult");
        a.samples = j.at("samples");
        a.regions = j.at("regions");
        a.electrodes = j.at("electrodes");
        a.fs = j.at("fs");
        a.bands.bands.clear();
        for (const auto& b : j.at("bands")) a.bands.bands.push_back({b.at("name"), b.at("lo"), b.at("hi")});
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string("checkpoint config block: ") + e.what());
    }
    return a;
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace untf
