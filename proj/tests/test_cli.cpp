#include <gtest/gtest.h>

#include <fstream>
#include <sstream>
#include <unistd.h>

#include "helpers.hpp"
#include "untf/cli.hpp"

using namespace untf;
namespace fs = std::filesystem;

namespace {

constexpr const char* kSmall = R"(
model.dim = 16
model.depth = 1
model.heads = 2
model.experts = 2
model.top_k = 1
model.samples = 200
model.electrodes = 2
dcm.heads = 2
aug.max_drift = 10
train.lr = 1e-3
train.warmup_epochs = 1
train.epochs = 2
train.batch_size = 4
train.seed = 3
synth.samples_per_class = 6
synth.seed = 3
)";

ModelConfig small_config(const std::string& extra = "") { return parse_config(std::string(kSmall) + extra, "small"); }

class TempDir {
public:
    TempDir() : path_(fs::temp_directory_path() / ("untf_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter_++))) {
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    std::string operator/(const std::string& name) const { return (path_ / name).string(); }
    const fs::path& path() const { return path_; }

private:
    static inline int counter_ = 0;
    fs::path path_;
};

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string error_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const std::exception& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Config, ShippedNanoConfigLoads) {
    auto cfg = load_config(std::string(UNTF_SOURCE_DIR) + "/configs/nano.cfg");
    EXPECT_EQ(cfg.arch.dim, 32u);
    EXPECT_EQ(cfg.arch.seq_len(), 20u);
    EXPECT_EQ(cfg.train.batch_size, 8u);
}

TEST(Config, UnknownKeyNamesLine) {
    auto msg = error_of([] { parse_config("model.dim = 16\nmodel.dimm = 8\n", "x.cfg"); });
    EXPECT_NE(msg.find("x.cfg:2"), std::string::npos);
    EXPECT_NE(msg.find("model.dimm"), std::string::npos);
}

TEST(Config, MalformedLinesAndValues) {
    EXPECT_THROW(parse_config("model.dim 16\n"), ValidationError);
    EXPECT_THROW(parse_config("model.dim =\n"), ValidationError);
    auto msg = error_of([] { parse_config("# header\ntrain.lr = fast\n", "y.cfg"); });
    EXPECT_NE(msg.find("y.cfg:2"), std::string::npos);
    EXPECT_NE(msg.find("train.lr"), std::string::npos);
}

TEST(Config, SemanticChecks) {
    EXPECT_THROW(small_config("model.dim = 15\n"), ValidationError);
    EXPECT_THROW(small_config("model.top_k = 3\n"), ValidationError);
    EXPECT_THROW(small_config("train.lambda_t = -1\n"), ValidationError);
    EXPECT_THROW(small_config("synth.band_profile = alpha, mu\n"), ValidationError);
    EXPECT_THROW(small_config("model.regions = 4\n"), ValidationError);
    EXPECT_NO_THROW(small_config("model.topology = false\n"));
}

TEST(Synthetic, SeedGivesIdenticalFile) {
    TempDir dir;
    auto cfg = small_config();
    write_dataset(dir / "a.eegb", generate_synthetic(cfg));
    write_dataset(dir / "b.eegb", generate_synthetic(cfg));
    cfg.synth.seed = 4;
    write_dataset(dir / "c.eegb", generate_synthetic(cfg));
    EXPECT_EQ(slurp(dir / "a.eegb"), slurp(dir / "b.eegb"));
    EXPECT_NE(slurp(dir / "a.eegb"), slurp(dir / "c.eegb"));
}

TEST(Synthetic, ZeroSamplesIsAnError) {
    auto cfg = small_config("synth.samples_per_class = 0\n");
    EXPECT_THROW(generate_synthetic(cfg), ValidationError);
}

TEST(Synthetic, HighSnrBandPowerSeparates) {
    auto cfg = small_config("synth.snr = 50\nsynth.samples_per_class = 10\n");
    auto ds = generate_synthetic(cfg);
    const auto& s = ds.samples;
    BandSpec bands;
    const auto alpha = bands.index_of("alpha");
    // Mean alpha power over the frontal electrodes (region 0).
    auto frontal_alpha = [&](std::size_t b) {
        double p = 0;
        for (std::size_t e = 0; e < s.E; ++e) {
            auto row = s.row(b, e);
            std::vector<double> x(row.begin(), row.end());
            p += band_power(x, bands)[alpha];
        }
        return p;
    };
    double lo0 = 1e300, hi1 = 0;
    for (std::size_t b = 0; b < s.B; ++b) {
        if (s.labels[b] == 0)
            lo0 = std::min(lo0, frontal_alpha(b));
        else
            hi1 = std::max(hi1, frontal_alpha(b));
    }
    EXPECT_GT(lo0, hi1);
}

TEST(Dataset, RoundTrip) {
    TempDir dir;
    auto ds = generate_synthetic(small_config());
    write_dataset(dir / "d.eegb", ds);
    auto back = read_dataset(dir / "d.eegb");
    EXPECT_EQ(back.samples.data, ds.samples.data);
    EXPECT_EQ(back.samples.valid, ds.samples.valid);
    EXPECT_EQ(back.samples.labels, ds.samples.labels);
    EXPECT_EQ(back.slot_names, ds.slot_names);
    EXPECT_EQ(slurp(dir / "d.eegb").substr(0, 4), "EEGB");
}

TEST(Dataset, TruncationIsCorruption) {
    TempDir dir;
    write_dataset(dir / "d.eegb", generate_synthetic(small_config()));
    auto bytes = slurp(dir / "d.eegb");
    std::ofstream(dir / "cut.eegb", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    EXPECT_THROW(read_dataset(dir / "cut.eegb"), CorruptionError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    TempDir dir;
    auto cfg = small_config();
    Model<float> model(cfg.arch, 9);
    save_checkpoint(dir / "m.untf", model);
    auto ck = load_checkpoint<float>(dir / "m.untf", &cfg.arch);
    auto a = model.parameters(), b = ck.model.parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].name, b[i].name);
        auto x = a[i].tensor->values(), y = b[i].tensor->values();
        EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin(), y.end())) << a[i].name;
    }
    EXPECT_EQ(ck.hash, fnv1a64(arch_text(cfg.arch)));
    EXPECT_FALSE(ck.optim.has_value());
}

TEST(Checkpoint, CrossesPrecisionBoundary) {
    TempDir dir;
    auto cfg = small_config();
    Model<float> model(cfg.arch, 10);
    save_checkpoint(dir / "m.untf", model);
    auto wide = load_checkpoint<double>(dir / "m.untf");
    save_checkpoint(dir / "w.untf", wide.model);
    EXPECT_EQ(slurp(dir / "m.untf"), slurp(dir / "w.untf"));
}

TEST(Checkpoint, TruncationIsCorruption) {
    TempDir dir;
    Model<float> model(small_config().arch, 11);
    save_checkpoint(dir / "m.untf", model);
    auto bytes = slurp(dir / "m.untf");
    for (std::size_t keep : {std::size_t{3}, bytes.size() / 3, bytes.size() - 1}) {
        std::ofstream(dir / "cut.untf", std::ios::binary) << bytes.substr(0, keep);
        EXPECT_THROW(load_checkpoint<float>(dir / "cut.untf"), CorruptionError);
    }
}

TEST(Checkpoint, ConfigMismatchPrintsBothHashes) {
    TempDir dir;
    auto cfg = small_config();
    Model<float> model(cfg.arch, 12);
    save_checkpoint(dir / "m.untf", model);
    auto other = small_config("model.depth = 2\n");
    auto msg = error_of([&] { load_checkpoint<float>(dir / "m.untf", &other.arch); });
    EXPECT_NE(msg.find(hex64(fnv1a64(arch_text(cfg.arch)))), std::string::npos);
    EXPECT_NE(msg.find(hex64(fnv1a64(arch_text(other.arch)))), std::string::npos);
    EXPECT_NE(msg.find("depth"), std::string::npos);
}

TEST(Pretrain, ResumeMatchesUninterruptedRun) {
    TempDir dir;
    auto cfg = small_config();
    auto ds = generate_synthetic(cfg);
    Pretrainer<float> full(cfg, ds, Model<float>(cfg.arch, cfg.train.seed));
    auto all = full.run();
    ASSERT_EQ(all.size(), 6u);

    auto half = cfg;
    half.train.max_steps = 3;
    Pretrainer<float> first(half, ds, Model<float>(cfg.arch, cfg.train.seed));
    first.run();
    save_checkpoint(dir / "half.untf", first.model(), &first.optim());
    auto ck = load_checkpoint<float>(dir / "half.untf", &cfg.arch);
    ASSERT_TRUE(ck.optim.has_value());
    Pretrainer<float> second(cfg, ds, std::move(ck.model), std::move(ck.optim));
    EXPECT_EQ(second.step(), 3u);
    auto rest = second.run();
    ASSERT_EQ(rest.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(format_row(rest[i]), format_row(all[i + 3]));
}

TEST(Pretrain, ZeroFrequencyWeightLeavesHeadUntouched) {
    auto cfg = small_config("train.lambda_f = 0\n");
    auto ds = generate_synthetic(cfg);
    Model<double> model(cfg.arch, 13);
    auto batch = ds.subset(std::vector<std::size_t>{0, 1, 2, 3});
    Rng rng = make_rng(1);
    auto plan = plan_mask(batch.B, batch.L(), batch.valid, 0.25, rng);
    auto out = model.pretrain_forward(batch_tensor<double>(batch), batch.valid, plan, cfg.train.weights);
    backward(out.total);
    for (const auto* t : {&model.head_freq.weight, &model.head_freq.bias}) {
        if (t->has_grad()) {
            for (double g : t->grad()) EXPECT_EQ(g, 0.0);
        }
    }
    double time_head = 0;
    for (double g : model.head_time.weight.grad()) time_head += std::abs(g);
    EXPECT_GT(time_head, 0.0);
}

TEST(Pretrain, LayoutMismatchIsRejected) {
    auto cfg = small_config();
    auto ds = generate_synthetic(cfg);
    auto other = small_config("model.electrodes = 3\n");
    EXPECT_THROW(Pretrainer<float>(other, ds, Model<float>(other.arch, 1)), ValidationError);
}

TEST(Commands, PretrainWritesLogAndIsDeterministic) {
    TempDir dir;
    std::ofstream(dir / "small.cfg") << kSmall;
    std::ostringstream log;
    cli::Options gen;
    gen.config = dir / "small.cfg";
    gen.out = dir / "data";
    ASSERT_EQ(cli::gen_synth(gen, log), cli::kOk);
    for (const char* run : {"r1", "r2"}) {
        cli::Options o;
        o.config = dir / "small.cfg";
        o.data = dir / "data/dataset.eegb";
        o.out = dir / run;
        ASSERT_EQ(cli::pretrain(o, log), cli::kOk);
    }
    const auto csv = slurp(dir / "r1/loss.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), kLossHeader);
    EXPECT_EQ(csv, slurp(dir / "r2/loss.csv"));
    EXPECT_EQ(slurp(dir / "r1/checkpoint.untf"), slurp(dir / "r2/checkpoint.untf"));
}

TEST(Commands, SeedOverrideChangesData) {
    TempDir dir;
    std::ofstream(dir / "small.cfg") << kSmall;
    std::ostringstream log;
    for (std::uint64_t seed : {1, 2}) {
        cli::Options o;
        o.config = dir / "small.cfg";
        o.seed = seed;
        o.out = dir / ("s" + std::to_string(seed));
        ASSERT_EQ(cli::gen_synth(o, log), cli::kOk);
    }
    EXPECT_NE(slurp(dir / "s1/dataset.eegb"), slurp(dir / "s2/dataset.eegb"));
}

TEST(Commands, ErrorsMapToExitCodes) {
    std::ostringstream err;
    EXPECT_EQ(cli::guarded([]() -> int { throw ValidationError("v"); }, err), cli::kValidation);
    EXPECT_EQ(cli::guarded([]() -> int { throw NumericFault("n"); }, err), cli::kNumeric);
    EXPECT_EQ(cli::guarded([]() -> int { throw CorruptionError("c"); }, err), cli::kIo);
    cli::Options o;
    o.data = "/nonexistent/none.eegb";
    EXPECT_EQ(cli::guarded([&] { return cli::pretrain(o, err); }, err), cli::kIo);
}

TEST(Commands, InspectListsTensors) {
    TempDir dir;
    Model<float> model(small_config().arch, 14);
    save_checkpoint(dir / "m.untf", model);
    cli::Options o;
    o.checkpoint = dir / "m.untf";
    std::ostringstream log;
    ASSERT_EQ(cli::inspect_checkpoint(o, log), cli::kOk);
    EXPECT_NE(log.str().find("mask_embedding [16]"), std::string::npos);
    EXPECT_NE(log.str().find("hash " + hex64(fnv1a64(arch_text(model.arch)))), std::string::npos);
}
