#include <iostream>

#include <CLI11.hpp>

#include "untf/cli.hpp"

int main(int argc, char** argv) {
    using namespace untf::cli;
    CLI::App app{"Topology-aware EEG foundation model: data, pre-training, probing and checks"};
    app.require_subcommand(1);
    Options opt;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config, "Run configuration (key = value)")->check(CLI::ExistingFile);
        sub->add_option("--seed", opt.seed, "Override train.seed and synth.seed");
        sub->add_option("--out", opt.out, "Output directory");
    };
    auto* gen = app.add_subcommand("gen-synth", "Generate a labeled synthetic dataset");
    add_common(gen);
    auto* pre = app.add_subcommand("pretrain", "Masked-reconstruction pre-training");
    add_common(pre);
    pre->add_option("--data", opt.data, "Dataset file")->required();
    pre->add_option("--checkpoint", opt.checkpoint, "Resume from this checkpoint");
    pre->add_flag("--f64", opt.f64, "Train in 64-bit precision");
    auto* prb = app.add_subcommand("probe", "Linear probe on frozen features");
    add_common(prb);
    prb->add_option("--data", opt.data, "Labeled dataset file")->required();
    prb->add_option("--checkpoint", opt.checkpoint, "Pretrained checkpoint (random init when omitted)");
    auto* fin = app.add_subcommand("finetune", "Fine-tune all parameters with a classification head");
    add_common(fin);
    fin->add_option("--data", opt.data, "Labeled dataset file")->required();
    fin->add_option("--checkpoint", opt.checkpoint, "Pretrained checkpoint (random init when omitted)");
    auto* ver = app.add_subcommand("verify", "Run the invariant suite");
    add_common(ver);
    ver->add_flag("--f64", opt.f64, "Accepted for symmetry; gradient checks always run in 64-bit");
    auto* exf = app.add_subcommand("export-features", "Write pooled features as CSV");
    add_common(exf);
    exf->add_option("--data", opt.data, "Dataset file")->required();
    exf->add_option("--checkpoint", opt.checkpoint, "Pretrained checkpoint (random init when omitted)");
    auto* ins = app.add_subcommand("inspect-checkpoint", "Print a checkpoint's config and tensors");
    ins->add_option("--checkpoint", opt.checkpoint, "Checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kValidation;
    }

    return guarded(
        [&] {
            if (*gen) return gen_synth(opt, std::cout);
            if (*pre) return pretrain(opt, std::cout);
            if (*prb) return probe(opt, std::cout);
            if (*fin) return finetune_cmd(opt, std::cout);
            if (*ver) return verify(opt, std::cout);
            if (*exf) return export_features(opt, std::cout);
            return inspect_checkpoint(opt, std::cout);
        },
        std::cerr);
}
