#pragma once

// Command implementations shared by the `untf` executable and the tests.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "untf/eval.hpp"
#include "untf/synth.hpp"
#include "untf/train.hpp"
#include "untf/verify.hpp"

namespace untf::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kValidation = 1, kNumeric = 2, kIo = 3 };

struct Options {
    std::string config;
    std::string data;
    std::string checkpoint;
    std::string out = ".";
    std::optional<std::uint64_t> seed;
    bool f64 = false;
};

inline ModelConfig resolve_config(const Options& o) {
    ModelConfig cfg = o.config.empty() ? ModelConfig{} : load_config(o.config);
    if (!o.config.empty()) cfg.validate();
    if (o.seed) {
        cfg.train.seed = *o.seed;
        cfg.synth.seed = *o.seed;
    }
    return cfg;
}

inline fs::path out_dir(const Options& o) {
    fs::path p(o.out);
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw IoError("cannot create output directory " + o.out + ": " + ec.message());
    return p;
}

inline void write_text(const fs::path& p, const std::string& s) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot create " + p.string());
    f << s;
    if (!f) throw IoError("write failed for " + p.string());
}

inline int gen_synth(const Options& o, std::ostream& log) {
    auto cfg = resolve_config(o);
    const auto path = out_dir(o) / "dataset.eegb";
    auto ds = generate_synthetic(cfg);
    write_dataset(path.string(), ds);
    log << "wrote " << ds.size() << " samples (" << cfg.synth.classes << " classes) to " << path.string() << "\n";
    return kOk;
}

template <class T>
int pretrain_as(const ModelConfig& cfg, const Options& o, std::ostream& log) {
    if (o.data.empty()) throw ValidationError("pretrain: --data is required");
    const auto ds = read_dataset(o.data);
    std::optional<Pretrainer<T>> trainer;
    if (!o.checkpoint.empty()) {
        auto ck = load_checkpoint<T>(o.checkpoint, &cfg.arch);
        if (!ck.optim) throw ValidationError("checkpoint " + o.checkpoint + " holds no optimizer state to resume from");
        trainer.emplace(cfg, ds, std::move(ck.model), std::move(ck.optim));
        log << "resuming at step " << trainer->step() << "\n";
    } else {
        trainer.emplace(cfg, ds, Model<T>(cfg.arch, cfg.train.seed));
    }
    const auto dir = out_dir(o);
    std::ofstream csv(dir / "loss.csv", std::ios::binary);
    if (!csv) throw IoError("cannot create " + (dir / "loss.csv").string());
    csv << kLossHeader << '\n';
    const std::size_t report_every = std::max<std::size_t>(1, trainer->total_steps() / 10);
    auto rows = trainer->run([&](const LossRow& r) {
        csv << format_row(r) << '\n';
        if (r.step % report_every == 0 || r.step == trainer->total_steps())
            log << "step " << r.step << "/" << trainer->total_steps() << " total " << r.total << "\n";
    });
    csv.flush();
    if (!csv) throw IoError("write failed for loss log");
    save_checkpoint((dir / "checkpoint.untf").string(), trainer->model(), &trainer->optim());
    log << "wrote " << (dir / "checkpoint.untf").string() << " and loss.csv (" << rows.size() << " steps)\n";
    return kOk;
}

inline int pretrain(const Options& o, std::ostream& log) {
    auto cfg = resolve_config(o);
    return o.f64 ? pretrain_as<double>(cfg, o, log) : pretrain_as<float>(cfg, o, log);
}

/// Model from --checkpoint, or freshly initialized from the seed when absent.
template <class T>
Model<T> model_for(const ModelConfig& cfg, const Options& o) {
    if (o.checkpoint.empty()) return Model<T>(cfg.arch, cfg.train.seed);
    return std::move(load_checkpoint<T>(o.checkpoint, &cfg.arch).model);
}

inline void write_report(const fs::path& dir, const std::string& stem, const MetricReport& r, std::ostream& log) {
    write_text(dir / (stem + ".txt"), r.text());
    write_text(dir / (stem + ".json"), r.json().dump(2) + "\n");
    log << r.text();
}

inline Dataset labeled_dataset(const Options& o, const ModelConfig& cfg) {
    if (o.data.empty()) throw ValidationError("--data is required");
    auto ds = read_dataset(o.data);
    if (!ds.labeled()) throw ValidationError(o.data + " carries no labels");
    if (ds.samples.R != cfg.arch.regions || ds.samples.E != cfg.arch.electrodes || ds.samples.T != cfg.arch.samples)
        throw ValidationError("dataset layout does not match the config");
    return ds;
}

/// Linear probe on frozen features; returns the report.
inline MetricReport run_probe(const ModelConfig& cfg, Model<float>& model, const Dataset& ds) {
    const auto feats = extract_features(model, ds.samples, cfg.train.batch_size);
    const auto split = stratified_split(ds.samples.labels, cfg.probe.train_fraction, cfg.train.seed);
    return linear_probe(feats, cfg.arch.dim, ds.samples.labels, split, cfg.probe, cfg.train.seed).report;
}

inline int probe(const Options& o, std::ostream& log) {
    auto cfg = resolve_config(o);
    auto ds = labeled_dataset(o, cfg);
    auto model = model_for<float>(cfg, o);
    write_report(out_dir(o), "probe_report", run_probe(cfg, model, ds), log);
    return kOk;
}

inline int finetune_cmd(const Options& o, std::ostream& log) {
    auto cfg = resolve_config(o);
    auto ds = labeled_dataset(o, cfg);
    auto model = model_for<float>(cfg, o);
    const auto split = stratified_split(ds.samples.labels, cfg.probe.train_fraction, cfg.train.seed);
    write_report(out_dir(o), "finetune_report", finetune(model, ds, split, cfg), log);
    return kOk;
}

inline int export_features(const Options& o, std::ostream& log) {
    auto cfg = resolve_config(o);
    if (o.data.empty()) throw ValidationError("export-features: --data is required");
    auto ds = read_dataset(o.data);
    auto model = model_for<float>(cfg, o);
    const auto feats = extract_features(model, ds.samples, cfg.train.batch_size);
    std::ostringstream os;
    os << "label";
    for (std::size_t d = 0; d < cfg.arch.dim; ++d) os << ",f" << d;
    os << '\n';
    char buf[32];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        os << (ds.labeled() ? std::to_string(ds.samples.labels[i]) : std::string());
        for (std::size_t d = 0; d < cfg.arch.dim; ++d) {
            std::snprintf(buf, sizeof buf, ",%.9g", feats[i * cfg.arch.dim + d]);
            os << buf;
        }
        os << '\n';
    }
    const auto path = out_dir(o) / "features.csv";
    write_text(path, os.str());
    log << "wrote " << ds.size() << " feature rows to " << path.string() << "\n";
    return kOk;
}

inline int inspect_checkpoint(const Options& o, std::ostream& log) {
    if (o.checkpoint.empty()) throw ValidationError("inspect-checkpoint: --checkpoint is required");
    auto ck = load_checkpoint<float>(o.checkpoint);
    log << "config " << arch_json(ck.model.arch).dump() << "\n";
    log << "hash " << hex64(ck.hash) << "\n";
    log << "step " << (ck.optim ? std::to_string(ck.optim->step) : std::string("-")) << "\n";
    std::size_t total = 0;
    for (const auto& p : ck.model.parameters()) {
        log << p.name << " " << to_string(p.tensor->shape()) << (p.tensor->requires_grad() ? "" : " frozen") << "\n";
        total += p.tensor->size();
    }
    log << "parameters " << total << "\n";
    return kOk;
}

inline int verify(const Options& o, std::ostream& log) {
    auto cfg = resolve_config(o);
    return run_verify(cfg, log) ? kOk : kValidation;
}

/// Runs `fn`, mapping error categories to exit codes.
template <class F>
int guarded(F&& fn, std::ostream& err) {
    try {
        return fn();
    } catch (const NumericFault& e) {
        err << "numeric fault: " << e.what() << "\n";
        return kNumeric;
    } catch (const IoError& e) {
        err << "io error: " << e.what() << "\n";
        return kIo;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kValidation;
    }
}

}  // namespace untf::cli
