#include "flipguard/harness.hpp"

#include <chrono>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "flipguard/error.hpp"
#include "flipguard/rng.hpp"
#include "flipguard/vm.hpp"
#include "flipguard/vm_backend.hpp"

namespace flipguard {

using nlohmann::json;

namespace {

const char* level_name(DefenseLevel l) {
    switch (l) {
        case DefenseLevel::Model: return "model";
        case DefenseLevel::Code: return "code";
        default: return "both";
    }
}

const char* outcome_name(Outcome o) {
    switch (o) {
        case Outcome::Ok: return "ok";
        case Outcome::Crash: return "crash";
        default: return "timeout";
    }
}

template <typename T>
void get_to_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

} // namespace

ExperimentConfig parse_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        fail(Errc::ConfigError, std::string("bad config JSON: ") + e.what());
    }
    ExperimentConfig c;
    try {
        get_to_if(j, "seed", c.seed);
        get_to_if(j, "n_per_class", c.n_per_class);
        get_to_if(j, "n_classes", c.n_classes);
        get_to_if(j, "dim", c.dim);
        get_to_if(j, "layer_spec", c.layer_spec);
        get_to_if(j, "epochs", c.epochs);
        get_to_if(j, "lr", c.lr);
        get_to_if(j, "rank_k", c.rank_k);
        get_to_if(j, "drop_tolerance", c.drop_tolerance);
        get_to_if(j, "step_budget", c.step_budget);
        get_to_if(j, "prob", c.prob);
        get_to_if(j, "max_retries", c.max_retries);
        get_to_if(j, "prefer_neurons", c.prefer_neurons);
        get_to_if(j, "untargeted_budget", c.untargeted_budget);
        get_to_if(j, "untargeted_stop_acc", c.untargeted_stop_acc);
        get_to_if(j, "targeted_source", c.targeted_source);
        get_to_if(j, "targeted_target", c.targeted_target);
        get_to_if(j, "targeted_budget", c.targeted_budget);
        get_to_if(j, "adaptive_x1", c.adaptive_x1);
        get_to_if(j, "adaptive_x2", c.adaptive_x2);
        get_to_if(j, "adaptive_al", c.adaptive_al);
        get_to_if(j, "adaptive_x", c.adaptive_x);
        get_to_if(j, "trials", c.trials);
        get_to_if(j, "curve_probs", c.curve_probs);
        if (j.contains("placement")) {
            std::string p = j.at("placement").get<std::string>();
            if (p == "adjacent") c.placement = NopPlacement::Adjacent;
            else if (p == "cold") c.placement = NopPlacement::Cold;
            else fail(Errc::ConfigError, "placement must be adjacent|cold");
        }
        if (j.contains("level")) {
            std::string l = j.at("level").get<std::string>();
            if (l == "model") c.level = DefenseLevel::Model;
            else if (l == "code") c.level = DefenseLevel::Code;
            else if (l == "both") c.level = DefenseLevel::Both;
            else fail(Errc::ConfigError, "level must be model|code|both");
        }
    } catch (const json::exception& e) {
        fail(Errc::ConfigError, std::string("bad config value: ") + e.what());
    }
    if (c.n_classes < 2 || c.dim < 1 || c.n_per_class < 1 || c.layer_spec.size() < 2 ||
        c.trials < 0 || c.prob < 0.0f || c.prob > 1.0f)
        fail(Errc::ConfigError, "config values out of range");
    if (c.layer_spec.front() != c.dim || c.layer_spec.back() != c.n_classes)
        fail(Errc::ConfigError, "layer_spec must start at dim and end at n_classes");
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) fail(Errc::IoError, "cannot open config: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str());
}

std::string config_to_json(const ExperimentConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["n_per_class"] = c.n_per_class;
    j["n_classes"] = c.n_classes;
    j["dim"] = c.dim;
    j["layer_spec"] = c.layer_spec;
    j["epochs"] = c.epochs;
    j["lr"] = c.lr;
    j["rank_k"] = c.rank_k;
    j["drop_tolerance"] = c.drop_tolerance;
    j["step_budget"] = c.step_budget;
    j["prob"] = c.prob;
    j["max_retries"] = c.max_retries;
    j["prefer_neurons"] = c.prefer_neurons;
    j["placement"] = c.placement == NopPlacement::Cold ? "cold" : "adjacent";
    j["untargeted_budget"] = c.untargeted_budget;
    j["untargeted_stop_acc"] = c.untargeted_stop_acc;
    j["targeted_source"] = c.targeted_source;
    j["targeted_target"] = c.targeted_target;
    j["targeted_budget"] = c.targeted_budget;
    j["adaptive_x1"] = c.adaptive_x1;
    j["adaptive_x2"] = c.adaptive_x2;
    j["adaptive_al"] = c.adaptive_al;
    j["adaptive_x"] = c.adaptive_x;
    j["trials"] = c.trials;
    j["level"] = level_name(c.level);
    j["curve_probs"] = c.curve_probs;
    return j.dump(2);
}

OverheadStats measure_overhead(const MemoryImage& clean, const MemoryImage& defended,
                               const Dataset& ds, bool through_vm, uint64_t step_budget) {
    OverheadStats s;
    s.storage_clean = static_cast<double>(clean.section("WEIGHTS").length);
    s.storage_defended = static_cast<double>(defended.section("WEIGHTS").length);
    s.memory_clean = static_cast<double>(clean.payload.size());
    s.memory_defended = static_cast<double>(defended.payload.size());
    if (through_vm) {
        EvalReport a = run_inference_with_vm(clean, ds, step_budget);
        EvalReport b = run_inference_with_vm(defended, ds, step_budget);
        if (a.outcome != Outcome::Ok || b.outcome != Outcome::Ok)
            fail(Errc::ImageCorrupt, "overhead measurement: kernel did not complete");
        s.steps_clean = static_cast<double>(a.steps_executed) / static_cast<double>(a.n_samples);
        s.steps_defended =
            static_cast<double>(b.steps_executed) / static_cast<double>(b.n_samples);
    }
    Network na = materialize_network(clean);
    Network nb = materialize_network(defended);
    auto timed = [&](const Network& n) {
        auto t0 = std::chrono::steady_clock::now();
        (void)evaluate(n, ds);
        auto t1 = std::chrono::steady_clock::now();
        return std::chrono::duration<double, std::milli>(t1 - t0).count();
    };
    s.wall_ms_clean = timed(na);
    s.wall_ms_defended = timed(nb);
    return s;
}

std::vector<uint64_t> rotate_defenses(const MemoryImage& img, const Dataset& ds,
                                      const VulnerabilityList& vuln,
                                      const ExperimentConfig& cfg, int total, int interval) {
    if (interval < 1 || total < 0) fail(Errc::ConfigError, "bad rotation schedule");
    PatternOptions opt;
    opt.max_retries = cfg.max_retries;
    opt.prefer_neurons = cfg.prefer_neurons;
    opt.placement = cfg.placement;
    opt.rank_k = cfg.rank_k;
    opt.drop_tolerance = cfg.drop_tolerance;
    opt.step_budget = cfg.step_budget;

    bool through_vm = false;
    for (const auto& e : vuln.entries)
        if (e.kind == VulnKind::CodeJump) through_vm = true;

    std::vector<uint64_t> hashes;
    const int rotations = total / interval - (total % interval == 0 && total > 0 ? 1 : 0);
    for (int r = 0; r < rotations; ++r) {
        ObfuscationPattern pat = generate_pattern(
            img, ds, vuln, cfg.prob, derive_seed(cfg.seed, 0xE000 + static_cast<uint64_t>(r)),
            opt);
        MemoryImage rotated = apply_pattern(img, pat);
        EvalReport rep = through_vm ? run_inference_with_vm(rotated, ds, cfg.step_budget)
                                    : evaluate(materialize_network(rotated), ds);
        if (rep.outcome != Outcome::Ok ||
            rep.accuracy.value_or(0.0f) < vuln.baseline_accuracy - cfg.drop_tolerance)
            fail(Errc::ImageCorrupt, "rotated image failed utility verification");
        hashes.push_back(rotated.payload_hash());
    }
    return hashes;
}

namespace {

ReportRow row_from(const std::string& phase, const std::string& variant, int trial,
                   const EvalReport& rep, int flips) {
    ReportRow r;
    r.phase = phase;
    r.variant = variant;
    r.trial = trial;
    r.flips = flips;
    r.outcome = rep.outcome;
    r.accuracy = rep.accuracy.value_or(-1.0f);
    r.asr = rep.asr.value_or(-1.0f);
    return r;
}

} // namespace

Report run_experiment(const ExperimentConfig& cfg) {
    Report rep;
    rep.config = cfg;

    Dataset ds = generate_dataset(cfg.seed, cfg.n_per_class, cfg.n_classes, cfg.dim);
    FloatNetwork fnet = train(cfg.layer_spec, ds, cfg.epochs, cfg.lr, cfg.seed);
    rep.train_accuracy = evaluate_float(fnet, ds).accuracy.value_or(0.0f);
    Network net = quantize(fnet, train_samples(ds));
    rep.quantized_accuracy = evaluate(net, ds).accuracy.value_or(0.0f);

    Program prog = assemble(kGemmKernelSource);
    MemoryImage img = build_image(net, prog);
    rep.vm_accuracy =
        run_inference_with_vm(img, ds, cfg.step_budget).accuracy.value_or(0.0f);

    PatternOptions popt;
    popt.max_retries = cfg.max_retries;
    popt.prefer_neurons = cfg.prefer_neurons;
    popt.placement = cfg.placement;
    popt.rank_k = cfg.rank_k;
    popt.drop_tolerance = cfg.drop_tolerance;
    popt.step_budget = cfg.step_budget;

    const bool do_model = cfg.level != DefenseLevel::Code;
    const bool do_code = cfg.level != DefenseLevel::Model;

    // ---- model-level pipeline -------------------------------------------
    if (do_model) {
        VulnerabilityList vw = rank_vulnerable_weights(img, ds, cfg.rank_k);
        ObfuscationPattern pat =
            generate_pattern(img, ds, vw, cfg.prob, derive_seed(cfg.seed, 0xC000), popt);
        MemoryImage defended = apply_pattern(img, pat);

        for (int t = 0; t < cfg.trials; ++t) {
            uint64_t aseed = derive_seed(cfg.seed, 0xD000 + static_cast<uint64_t>(t));

            AttackRecord u =
                untargeted_bfa(img, ds, cfg.untargeted_budget, cfg.untargeted_stop_acc, aseed);
            {
                ReportRow r = row_from("untargeted", "clean", t,
                                       replay(img, u, ds), static_cast<int>(u.flips.size()));
                rep.rows.push_back(r);
                rep.rows.push_back(row_from("untargeted", "defended", t, replay(defended, u, ds),
                                            static_cast<int>(u.flips.size())));
            }

            AttackRecord g = targeted_bfa(img, ds, cfg.targeted_source, cfg.targeted_target,
                                          cfg.targeted_budget, aseed);
            {
                ReplayOptions ro;
                ro.source = cfg.targeted_source;
                ro.target = cfg.targeted_target;
                rep.rows.push_back(row_from("targeted", "clean", t, replay(img, g, ds, ro),
                                            static_cast<int>(g.flips.size())));
                rep.rows.push_back(row_from("targeted", "defended", t,
                                            replay(defended, g, ds, ro),
                                            static_cast<int>(g.flips.size())));
            }

            for (int x : cfg.adaptive_x) {
                AdaptiveRangeSpec spec;
                spec.x = x;
                std::vector<BitAddress> flips =
                    adaptive_flip_set(u, spec, AttackLevel::Model, defended.payload.size());
                ReportRow r = row_from("adaptive-model", "defended", t,
                                       replay(defended, flips, ds),
                                       static_cast<int>(flips.size()));
                r.x = x;
                rep.rows.push_back(r);
            }
        }
        rep.overhead_model = measure_overhead(img, defended, ds, false, cfg.step_budget);
    }

    // ---- code-level pipeline --------------------------------------------
    if (do_code) {
        VulnerabilityList vc =
            search_code_vulnerabilities(img, ds, cfg.drop_tolerance, cfg.step_budget);
        ObfuscationPattern pat =
            generate_pattern(img, ds, vc, cfg.prob, derive_seed(cfg.seed, 0xC100), popt);
        MemoryImage defended = apply_pattern(img, pat);

        ReplayOptions vmo;
        vmo.use_vm = true;
        vmo.step_budget = cfg.step_budget;

        const size_t nvuln = vc.entries.size();
        for (int t = 0; t < cfg.trials && nvuln > 0; ++t) {
            // Replay attack on the t-th ranked vulnerable jump bit.
            AttackRecord c;
            c.mode = AttackMode::Untargeted;
            c.budget = 1;
            c.seed = cfg.seed;
            c.flips = {vc.entries[static_cast<size_t>(t) % nvuln].address};
            EvalReport on_clean = replay(img, c, ds, vmo);
            c.achieved = on_clean.accuracy.value_or(0.0f);
            rep.rows.push_back(row_from("code-replay", "clean", t, on_clean, 1));
            rep.rows.push_back(row_from("code-replay", "defended", t, replay(defended, c, ds, vmo), 1));

            for (int x1 : cfg.adaptive_x1)
                for (int x2 : cfg.adaptive_x2) {
                    AdaptiveRangeSpec spec;
                    spec.x1 = x1;
                    spec.x2 = x2;
                    spec.al = cfg.adaptive_al;
                    std::vector<BitAddress> flips =
                        adaptive_flip_set(c, spec, AttackLevel::Code, defended.payload.size());
                    ReportRow r = row_from("adaptive-code", "defended", t,
                                           replay(defended, flips, ds, vmo),
                                           static_cast<int>(flips.size()));
                    r.x1 = x1;
                    r.x2 = x2;
                    rep.rows.push_back(r);
                }
        }
        rep.overhead_code = measure_overhead(img, defended, ds, true, cfg.step_budget);
    }

    // ---- prob vs overhead curve -----------------------------------------
    if (do_model) {
        VulnerabilityList vw = rank_vulnerable_weights(img, ds, cfg.rank_k);
        VulnerabilityList vc;
        if (do_code)
            vc = search_code_vulnerabilities(img, ds, cfg.drop_tolerance, cfg.step_budget);
        for (float p : cfg.curve_probs) {
            VulnerabilityList merged = vw;
            merged.entries.insert(merged.entries.end(), vc.entries.begin(), vc.entries.end());
            ObfuscationPattern pat = generate_pattern(
                img, ds, merged, p,
                derive_seed(cfg.seed, 0xC200 + static_cast<uint64_t>(p * 100.0f)), popt);
            MemoryImage defended = apply_pattern(img, pat);
            OverheadStats s = measure_overhead(img, defended, ds, do_code, cfg.step_budget);
            rep.prob_curve.push_back({static_cast<double>(p), s.storage_pct(), s.steps_pct()});
        }
    }
    return rep;
}

void emit_report(const Report& rep, const std::string& stem) {
    {
        std::ofstream jf(stem + ".jsonl", std::ios::trunc);
        if (!jf) fail(Errc::IoError, "cannot open for write: " + stem + ".jsonl");
        json summary;
        summary["kind"] = "summary";
        summary["config"] = json::parse(config_to_json(rep.config));
        summary["train_accuracy"] = rep.train_accuracy;
        summary["quantized_accuracy"] = rep.quantized_accuracy;
        summary["vm_accuracy"] = rep.vm_accuracy;
        auto ov = [](const OverheadStats& s) {
            json o;
            o["storage_clean"] = s.storage_clean;
            o["storage_defended"] = s.storage_defended;
            o["storage_pct"] = s.storage_pct();
            o["steps_clean"] = s.steps_clean;
            o["steps_defended"] = s.steps_defended;
            o["steps_pct"] = s.steps_pct();
            o["memory_clean"] = s.memory_clean;
            o["memory_defended"] = s.memory_defended;
            o["memory_pct"] = s.memory_pct();
            o["wall_ms_clean"] = s.wall_ms_clean;
            o["wall_ms_defended"] = s.wall_ms_defended;
            return o;
        };
        summary["overhead_model"] = ov(rep.overhead_model);
        summary["overhead_code"] = ov(rep.overhead_code);
        json curve = json::array();
        for (const auto& pt : rep.prob_curve)
            curve.push_back({{"prob", pt[0]}, {"storage_pct", pt[1]}, {"steps_pct", pt[2]}});
        summary["prob_curve"] = curve;
        jf << summary.dump() << "\n";
        for (const auto& r : rep.rows) {
            json o;
            o["kind"] = "row";
            o["phase"] = r.phase;
            o["variant"] = r.variant;
            o["trial"] = r.trial;
            o["x1"] = r.x1;
            o["x2"] = r.x2;
            o["x"] = r.x;
            o["flips"] = r.flips;
            o["outcome"] = outcome_name(r.outcome);
            o["accuracy"] = r.accuracy;
            o["asr"] = r.asr;
            jf << o.dump() << "\n";
        }
        if (!jf) fail(Errc::IoError, "write failed: " + stem + ".jsonl");
    }
    {
        std::ofstream cf(stem + ".csv", std::ios::trunc);
        if (!cf) fail(Errc::IoError, "cannot open for write: " + stem + ".csv");
        cf << "phase,variant,trial,x1,x2,x,flips,outcome,accuracy,asr\n";
        for (const auto& r : rep.rows)
            cf << r.phase << "," << r.variant << "," << r.trial << "," << r.x1 << "," << r.x2
               << "," << r.x << "," << r.flips << "," << outcome_name(r.outcome) << ","
               << r.accuracy << "," << r.asr << "\n";
        if (!cf) fail(Errc::IoError, "write failed: " + stem + ".csv");
    }
}

} // namespace flipguard
