// Command-line front end: every stage of the pipeline as a subcommand, plus
// `run`/`report` for the whole experiment. Exit codes: 0 success, 1
// operational failure, 2 usage or configuration error.

#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "flipguard/attack.hpp"
#include "flipguard/error.hpp"
#include "flipguard/harness.hpp"
#include "flipguard/obfuscate.hpp"
#include "flipguard/rng.hpp"
#include "flipguard/vm.hpp"
#include "flipguard/vm_backend.hpp"
#include "flipguard/vuln_search.hpp"

using namespace flipguard;

namespace {

const char* outcome_name(Outcome o) {
    switch (o) {
        case Outcome::Ok: return "ok";
        case Outcome::Crash: return "crash";
        default: return "timeout";
    }
}

void print_eval(const EvalReport& rep) {
    std::cout << "outcome=" << outcome_name(rep.outcome);
    if (rep.accuracy) std::cout << " accuracy=" << *rep.accuracy;
    if (rep.asr) std::cout << " asr=" << *rep.asr;
    if (rep.steps_executed) std::cout << " steps=" << rep.steps_executed;
    std::cout << " samples=" << rep.n_samples << "\n";
}

PatternOptions pattern_options(const ExperimentConfig& cfg) {
    PatternOptions o;
    o.max_retries = cfg.max_retries;
    o.prefer_neurons = cfg.prefer_neurons;
    o.placement = cfg.placement;
    o.rank_k = cfg.rank_k;
    o.drop_tolerance = cfg.drop_tolerance;
    o.step_budget = cfg.step_budget;
    return o;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"bit-flip-attack defense toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_path;
    uint64_t seed_flag = 0;
    bool seed_given = false;
    app.add_option("--config", config_path, "experiment config JSON")->expected(1);
    app.add_option("--out", out_path, "output path (or stem for reports)");
    app.add_option_function<uint64_t>(
           "--seed", [&](uint64_t s) { seed_flag = s; seed_given = true; },
           "override the config seed");

    // Per-subcommand knobs.
    std::string image_path, model_path, vuln_path, record_path, pattern_path;
    std::string mode = "untargeted", level = "code";
    int budget = -1, source = -1, target = -1, k = -1;
    double prob = -1.0, stop_acc = -1.0, drop_tol = -1.0;
    int x1 = 5, x2 = 0, al = 16, x = 3;
    int total = 300, interval = 100;
    bool use_vm = false;

    auto* c_gen = app.add_subcommand("gen-data", "generate the synthetic dataset and print stats");
    auto* c_train = app.add_subcommand("train", "train, quantize and save the model");
    auto* c_build = app.add_subcommand("build-image", "pack a model plus the matmul kernel into a memory image");
    c_build->add_option("--model", model_path, "model file from `train`")->required();
    auto* c_sm = app.add_subcommand("search-model", "rank weights by gradient magnitude");
    c_sm->add_option("--image", image_path)->required();
    c_sm->add_option("--k", k, "how many weights to keep");
    auto* c_sc = app.add_subcommand("search-code", "sweep conditional-jump bits in the kernel");
    c_sc->add_option("--image", image_path)->required();
    c_sc->add_option("--drop-tolerance", drop_tol);
    auto* c_obf = app.add_subcommand("obfuscate", "generate and apply an obfuscation pattern");
    c_obf->add_option("--image", image_path)->required();
    c_obf->add_option("--vuln", vuln_path, "vulnerability list from a search subcommand")->required();
    c_obf->add_option("--prob", prob, "insertion probability at non-vulnerable elements");
    c_obf->add_option("--pattern-out", pattern_path, "also save the pattern here");
    auto* c_atk = app.add_subcommand("attack", "run a simulated bit-flip attack");
    c_atk->add_option("--image", image_path)->required();
    c_atk->add_option("--mode", mode)->check(CLI::IsMember({"untargeted", "targeted"}));
    c_atk->add_option("--budget", budget);
    c_atk->add_option("--stop-acc", stop_acc, "untargeted: stop once accuracy falls this low");
    c_atk->add_option("--source", source)->check(CLI::NonNegativeNumber);
    c_atk->add_option("--target", target)->check(CLI::NonNegativeNumber);
    auto* c_rep = app.add_subcommand("replay", "replay a recorded attack against an image");
    c_rep->add_option("--image", image_path)->required();
    c_rep->add_option("--record", record_path)->required();
    c_rep->add_flag("--vm", use_vm, "evaluate through the image's kernel");
    auto* c_adp = app.add_subcommand("adaptive", "replay with range-expanded flip addresses");
    c_adp->add_option("--image", image_path)->required();
    c_adp->add_option("--record", record_path)->required();
    c_adp->add_option("--level", level)->check(CLI::IsMember({"code", "model"}));
    c_adp->add_option("--x1", x1);
    c_adp->add_option("--x2", x2);
    c_adp->add_option("--al", al);
    c_adp->add_option("--x", x);
    c_adp->add_flag("--vm", use_vm);
    auto* c_rot = app.add_subcommand("rotate", "regenerate the defense on an inference schedule");
    c_rot->add_option("--image", image_path)->required();
    c_rot->add_option("--vuln", vuln_path)->required();
    c_rot->add_option("--total", total, "total inference requests");
    c_rot->add_option("--interval", interval, "requests between rotations");
    auto* c_report = app.add_subcommand("report", "run the full experiment and emit jsonl+csv");
    auto* c_run = app.add_subcommand("run", "run the full experiment and print a summary");

    for (CLI::App* sc : app.get_subcommands([](const CLI::App*) { return true; }))
        sc->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        ExperimentConfig cfg;
        if (!config_path.empty()) cfg = load_config(config_path);
        if (seed_given) cfg.seed = seed_flag;
        if (k >= 0) cfg.rank_k = k;
        if (prob >= 0.0) cfg.prob = static_cast<float>(prob);
        if (drop_tol >= 0.0) cfg.drop_tolerance = static_cast<float>(drop_tol);

        auto dataset = [&] {
            return generate_dataset(cfg.seed, cfg.n_per_class, cfg.n_classes, cfg.dim);
        };
        auto out_or = [&](const char* dflt) { return out_path.empty() ? dflt : out_path; };

        if (*c_gen) {
            Dataset ds = dataset();
            std::cout << "samples=" << ds.size() << " classes=" << ds.n_classes
                      << " dim=" << ds.dim << " train=" << ds.train_index.size()
                      << " eval=" << ds.eval_index.size() << " seed=" << ds.seed << "\n";
        } else if (*c_train) {
            Dataset ds = dataset();
            FloatNetwork fnet = train(cfg.layer_spec, ds, cfg.epochs, cfg.lr, cfg.seed);
            Network net = quantize(fnet, train_samples(ds));
            std::string path = out_or("model.bann");
            save_network(net, path);
            std::cout << "float_accuracy=" << evaluate_float(fnet, ds).accuracy.value_or(0.0f)
                      << " quantized_accuracy=" << evaluate(net, ds).accuracy.value_or(0.0f)
                      << " saved=" << path << "\n";
        } else if (*c_build) {
            Network net = load_network(model_path);
            MemoryImage img = build_image(net, assemble(kGemmKernelSource));
            std::string path = out_or("image.barm");
            save_image(img, path);
            std::cout << "payload_bytes=" << img.payload.size() << " hash=" << std::hex
                      << img.payload_hash() << std::dec << " saved=" << path << "\n";
        } else if (*c_sm) {
            MemoryImage img = load_image(image_path);
            VulnerabilityList v = rank_vulnerable_weights(img, dataset(), cfg.rank_k);
            std::string path = out_or("vuln_model.txt");
            save_vuln_list(v, path);
            std::cout << "entries=" << v.entries.size()
                      << " baseline=" << v.baseline_accuracy << " saved=" << path << "\n";
        } else if (*c_sc) {
            MemoryImage img = load_image(image_path);
            VulnerabilityList v = search_code_vulnerabilities(img, dataset(),
                                                              cfg.drop_tolerance,
                                                              cfg.step_budget);
            std::string path = out_or("vuln_code.txt");
            save_vuln_list(v, path);
            std::cout << "entries=" << v.entries.size() << " baseline=" << v.baseline_accuracy
                      << " visited=" << v.stats.visited << " benign=" << v.stats.benign
                      << " drop=" << v.stats.drop << " crash=" << v.stats.crash
                      << " timeout=" << v.stats.timeout << " saved=" << path << "\n";
        } else if (*c_obf) {
            MemoryImage img = load_image(image_path);
            VulnerabilityList v = load_vuln_list(vuln_path);
            Dataset ds = dataset();
            ObfuscationPattern pat =
                generate_pattern(img, ds, v, cfg.prob, cfg.seed, pattern_options(cfg));
            MemoryImage defended = apply_pattern(img, pat);
            std::string path = out_or("defended.barm");
            save_image(defended, path);
            if (!pattern_path.empty()) save_pattern(pat, pattern_path);
            std::cout << "records=" << pat.records.size()
                      << " retries=" << pat.generation_retries
                      << " payload_bytes=" << defended.payload.size() << " saved=" << path
                      << "\n";
        } else if (*c_atk) {
            MemoryImage img = load_image(image_path);
            Dataset ds = dataset();
            AttackRecord rec;
            if (mode == "untargeted") {
                rec = untargeted_bfa(img, ds, budget < 0 ? cfg.untargeted_budget : budget,
                                     stop_acc < 0 ? cfg.untargeted_stop_acc
                                                  : static_cast<float>(stop_acc),
                                     cfg.seed);
            } else {
                rec = targeted_bfa(img, ds, source < 0 ? cfg.targeted_source : source,
                                   target < 0 ? cfg.targeted_target : target,
                                   budget < 0 ? cfg.targeted_budget : budget, cfg.seed);
            }
            std::string path = out_or("attack.txt");
            save_attack_record(rec, path);
            std::cout << "mode=" << mode << " flips=" << rec.flips.size()
                      << " achieved=" << rec.achieved << " saved=" << path << "\n";
        } else if (*c_rep) {
            MemoryImage img = load_image(image_path);
            AttackRecord rec = load_attack_record(record_path);
            ReplayOptions opt;
            opt.use_vm = use_vm;
            opt.step_budget = cfg.step_budget;
            print_eval(replay(img, rec, dataset(), opt));
        } else if (*c_adp) {
            MemoryImage img = load_image(image_path);
            AttackRecord rec = load_attack_record(record_path);
            AdaptiveRangeSpec spec;
            spec.x1 = x1;
            spec.x2 = x2;
            spec.al = al;
            spec.x = x;
            AttackLevel lv = level == "code" ? AttackLevel::Code : AttackLevel::Model;
            std::vector<BitAddress> flips =
                adaptive_flip_set(rec, spec, lv, img.payload.size());
            ReplayOptions opt;
            opt.use_vm = use_vm || lv == AttackLevel::Code;
            opt.step_budget = cfg.step_budget;
            std::cout << "expanded_flips=" << flips.size() << " ";
            print_eval(replay(img, flips, dataset(), opt));
        } else if (*c_rot) {
            MemoryImage img = load_image(image_path);
            VulnerabilityList v = load_vuln_list(vuln_path);
            std::vector<uint64_t> hashes =
                rotate_defenses(img, dataset(), v, cfg, total, interval);
            std::cout << "rotations=" << hashes.size() << std::hex;
            for (uint64_t h : hashes) std::cout << " " << h;
            std::cout << std::dec << "\n";
        } else if (*c_report || *c_run) {
            Report rep = run_experiment(cfg);
            std::string stem = out_or("report");
            emit_report(rep, stem);
            std::cout << "train_accuracy=" << rep.train_accuracy
                      << " quantized_accuracy=" << rep.quantized_accuracy
                      << " vm_accuracy=" << rep.vm_accuracy << " rows=" << rep.rows.size()
                      << "\n";
            if (*c_run) {
                std::cout << "model: storage +" << rep.overhead_model.storage_pct()
                          << "% memory +" << rep.overhead_model.memory_pct() << "%\n";
                std::cout << "code: steps +" << rep.overhead_code.steps_pct() << "% memory +"
                          << rep.overhead_code.memory_pct() << "%\n";
                for (const auto& pt : rep.prob_curve)
                    std::cout << "prob=" << pt[0] << " storage_pct=" << pt[1]
                              << " steps_pct=" << pt[2] << "\n";
            }
            std::cout << "wrote " << stem << ".jsonl and " << stem << ".csv\n";
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.code() == Errc::ConfigError ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
