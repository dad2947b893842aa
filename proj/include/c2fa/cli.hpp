#pragma once

// Operator entry point. Four subcommands: `generate` writes a synthetic
// paired dataset, `train` runs the alignment loop with ablation toggles,
// `eval` scores a checkpoint on the held-out split, `verify` runs the
// self-check suites. Exit codes: 0 success, 1 usage error, 2 runtime failure.
//
// Every run prints its fully resolved configuration (defaults expanded)
// before doing any work; eval reports embed the FNV-1a hash of that JSON so
// a report can be traced back to the exact invocation that produced it.

#include <cstdint>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "c2fa/common.hpp"
#include "c2fa/dataset.hpp"
#include "c2fa/retrieval.hpp"
#include "c2fa/serialize.hpp"
#include "c2fa/trainer.hpp"
#include "c2fa/verify.hpp"

namespace c2fa::cli {

namespace detail {

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string fmt17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline nlohmann::json model_config_to_json(const ModelConfig& m) {
    return nlohmann::json{{"feature_dim", m.feature_dim},
                          {"speech_layers", m.speech_layers},
                          {"speech_tokens", m.speech_tokens},
                          {"image_tokens", m.image_tokens},
                          {"d_model", m.d_model},
                          {"num_heads", m.num_heads},
                          {"depth", m.depth},
                          {"ffn_dim", m.ffn_dim},
                          {"tau_init", m.tau_init},
                          {"init_seed", m.init_seed}};
}

// Prints the resolved config and returns its hash (also used inside reports).
inline uint64_t echo_config(const nlohmann::json& j, std::ostream& out) {
    const uint64_t h = fnv1a64(j.dump());
    out << "resolved config (fnv1a64 " << hex64(h) << "):\n" << j.dump(2) << "\n";
    return h;
}

struct GenerateArgs {
    SynthConfig synth;
    std::string out_dir;
};

struct TrainArgs {
    std::string config_file;
    std::string data_dir;
    std::string out_ckpt;
    bool no_queue = false;
    bool no_mod = false;
    bool no_sim_hard = false;
};

struct EvalArgs {
    std::string ckpt;
    std::string data_dir;
    int k = 10;
    std::string report_file;  // empty = don't write one
};

inline int do_generate(const GenerateArgs& a, std::ostream& out) {
    const SynthConfig& s = a.synth;
    nlohmann::json j{{"command", "generate"},
                     {"out", a.out_dir},
                     {"num_classes", s.num_classes},
                     {"images_per_class", s.images_per_class},
                     {"captions_per_image", s.captions_per_image},
                     {"speech_layers", s.speech_layers},
                     {"speech_tokens", s.speech_tokens},
                     {"image_tokens", s.image_tokens},
                     {"feature_dim", s.feature_dim},
                     {"noise_sigma", s.noise_sigma},
                     {"weak_pair_rate", s.weak_pair_rate},
                     {"seed", s.seed}};
    echo_config(j, out);

    const DatasetSplits splits = generate_splits(s);
    write_features(splits.train, a.out_dir);
    write_features(splits.test, a.out_dir);
    out << "wrote " << a.out_dir << ": train " << splits.train.images.size() << " images / "
        << splits.train.speeches.size() << " speeches, test " << splits.test.images.size()
        << " images / " << splits.test.speeches.size() << " speeches\n";
    return 0;
}

inline int do_train(const TrainArgs& a, std::ostream& out) {
    TrainConfig tcfg = parse_train_config(read_text_file(a.config_file));
    if (a.no_queue) tcfg.use_queue = false;
    if (a.no_mod) tcfg.use_mod = false;
    if (a.no_sim_hard) tcfg.use_sim_hard = false;
    tcfg.validate();

    PairedDataset train_split = read_features(a.data_dir, "train");

    ModelConfig mcfg;  // geometry follows the dataset, capacity knobs stay at defaults
    mcfg.feature_dim = train_split.feature_dim;
    mcfg.speech_layers = train_split.speech_layers;
    mcfg.speech_tokens = train_split.speech_tokens;
    mcfg.image_tokens = train_split.image_tokens;
    mcfg.init_seed = tcfg.seed;  // one --seed knob steers init and sampling alike

    nlohmann::json j{{"command", "train"},
                     {"config", a.config_file},
                     {"data", a.data_dir},
                     {"out", a.out_ckpt},
                     {"model", model_config_to_json(mcfg)},
                     {"train", train_config_to_json(tcfg)}};
    echo_config(j, out);

    Trainer trainer(mcfg, tcfg, std::move(train_split));
    const int print_every = std::max(1, tcfg.total_steps / 10);
    while (!trainer.finished()) {
        const LossBundle b = trainer.step();
        const int done = static_cast<int>(trainer.completed_steps());
        if (done % print_every == 0 || done == tcfg.total_steps)
            out << "step " << done << "/" << tcfg.total_steps << "  lr=" << fmt17(lr_at(done, tcfg))
                << "  l_total=" << fmt17(b.l_total.value()) << "  l_sic=" << fmt17(b.l_sic.value())
                << "  l_mod=" << fmt17(b.l_sic_mod.value()) << "  l_sim=" << fmt17(b.l_sim.value())
                << "\n";
    }
    trainer.save(a.out_ckpt);
    out << "checkpoint written: " << a.out_ckpt << "\n";
    return 0;
}

inline int do_eval(const EvalArgs& a, std::ostream& out) {
    const LoadedCheckpoint ckpt = load_checkpoint(a.ckpt);
    nlohmann::json j{{"command", "eval"},
                     {"ckpt", a.ckpt},
                     {"data", a.data_dir},
                     {"k", a.k},
                     {"report", a.report_file},
                     {"model", model_config_to_json(ckpt.model_config)},
                     {"train", train_config_to_json(ckpt.train_config)}};
    const uint64_t hash = echo_config(j, out);

    const PairedDataset test_split = read_features(a.data_dir, "test");
    ModelState state = ckpt.state;
    const EvalReport report =
        evaluate(state, test_split, a.k, ckpt.train_config.seed, hex64(hash));
    out << report_table(report);
    if (!a.report_file.empty()) {
        write_text_file(a.report_file, report_to_json(report).dump(2) + "\n");
        out << "report written: " << a.report_file << "\n";
    }
    return 0;
}

inline int do_verify(std::ostream& out) {
    echo_config(nlohmann::json{{"command", "verify"}}, out);
    bool all = true;
    for (const VerifyResult& r : run_verification()) {
        out << (r.passed ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.detail << "\n";
        all = all && r.passed;
    }
    out << (all ? "verify: all suites passed\n" : "verify: FAILURES\n");
    return all ? 0 : 2;
}

}  // namespace detail

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"speech-image alignment on synthetic features"};
    app.name("c2fa");
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    detail::GenerateArgs gen;
    CLI::App* g = app.add_subcommand("generate", "write a synthetic paired dataset");
    g->add_option("--out", gen.out_dir, "output directory")->required();
    g->add_option("--classes", gen.synth.num_classes, "number of latent classes")
        ->capture_default_str();
    g->add_option("--images-per-class", gen.synth.images_per_class, "images per class")
        ->capture_default_str();
    g->add_option("--captions", gen.synth.captions_per_image, "spoken captions per image")
        ->capture_default_str();
    g->add_option("--sigma", gen.synth.noise_sigma, "feature noise level")
        ->capture_default_str();
    g->add_option("--weak-rate", gen.synth.weak_pair_rate, "fraction of weakly paired captions")
        ->capture_default_str();
    g->add_option("--seed", gen.synth.seed, "generation seed")->capture_default_str();

    detail::TrainArgs tr;
    CLI::App* t = app.add_subcommand("train", "train on a generated dataset");
    t->add_option("--config", tr.config_file, "training config JSON")->required();
    t->add_option("--data", tr.data_dir, "dataset directory")->required();
    t->add_option("--out", tr.out_ckpt, "checkpoint output path")->required();
    t->add_flag("--no-queue", tr.no_queue, "disable the embedding queue");
    t->add_flag("--no-mod", tr.no_mod, "disable momentum distillation");
    t->add_flag("--no-sim-hard", tr.no_sim_hard, "disable the matching head and hard negatives");

    detail::EvalArgs ev;
    CLI::App* e = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    e->add_option("--ckpt", ev.ckpt, "checkpoint path")->required();
    e->add_option("--data", ev.data_dir, "dataset directory")->required();
    e->add_option("--k", ev.k, "rerank depth")->capture_default_str();
    e->add_option("--report", ev.report_file, "write the JSON report here");

    app.add_subcommand("verify", "run gradient, sampler, and queue self-checks");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& ex) {
        const int code = app.exit(ex, out, err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (app.got_subcommand("generate")) return detail::do_generate(gen, out);
        if (app.got_subcommand("train")) return detail::do_train(tr, out);
        if (app.got_subcommand("eval")) return detail::do_eval(ev, out);
        return detail::do_verify(out);
    } catch (const Error& ex) {
        err << "error: " << ex.what() << "\n";
        return 2;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return 2;
    }
}

inline int run(const std::vector<std::string>& args) {
    return run(args, std::cout, std::cerr);
}

}  // namespace c2fa::cli
