// Acceptance gate: end-to-end checks of the shipped defaults, one printed
// pass/fail line per criterion. Exit code is the number of failed criteria,
// so the test runner reports the whole gate green only when every criterion
// holds. All checks run on the default pipeline configuration (seed 7,
// 250 samples/class over 4 classes in 16 dimensions, a {16,256,256,4} net
// trained 30 epochs at lr 0.05, rank-100 weight search, insertion
// probability 0.3 with dummy neurons preferred and cold NOP placement).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "flipguard/attack.hpp"
#include "flipguard/engine.hpp"
#include "flipguard/memory_image.hpp"
#include "flipguard/obfuscate.hpp"
#include "flipguard/rng.hpp"
#include "flipguard/vm_backend.hpp"
#include "flipguard/vuln_search.hpp"
#include "helpers.hpp"

using namespace flipguard;
using namespace testutil;

namespace {

int g_failures = 0;

class Criterion {
public:
    explicit Criterion(std::string name) : name_(std::move(name)), t0_(clock_t::now()) {}

    void finish(bool pass, const std::string& detail) {
        double secs =
            std::chrono::duration<double>(clock_t::now() - t0_).count();
        std::printf("[%s] %s: %s (%.1f s)\n", pass ? "PASS" : "FAIL", name_.c_str(),
                    detail.c_str(), secs);
        std::fflush(stdout);
        if (!pass) ++g_failures;
    }

private:
    using clock_t = std::chrono::steady_clock;
    std::string name_;
    clock_t::time_point t0_;
};

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

// VM-backed forward pass through the image's CODE kernel, returning logits.
ForwardResult vm_forward(const MemoryImage& img, const std::vector<float>& x) {
    Network net = materialize_network(img);
    for (auto& l : net.layers)
        if (l.kind == LayerKind::Linear) l.backend = Backend::VmKernel;
    const Section& code = img.section("CODE");
    VmKernelExec exec(img.payload.data() + code.offset, code.length, img.program_meta.entry);
    return forward(net, x, &exec);
}

} // namespace

int main() {
    const auto suite_t0 = std::chrono::steady_clock::now();

    // Shared default pipeline fixture.
    Dataset ds = generate_dataset(7, 250, 4, 16);
    FloatNetwork fnet = train({16, 256, 256, 4}, ds, 30, 0.05f, 7);
    Network net = quantize(fnet, train_samples(ds));
    MemoryImage img = build_image(net, assemble(kGemmKernelSource));
    const float base = evaluate(net, ds).accuracy.value();
    const auto ev = eval_samples(ds);

    VulnerabilityList vw = rank_vulnerable_weights(img, ds, 100);
    PatternOptions po;
    po.prefer_neurons = true;
    po.placement = NopPlacement::Cold;
    po.rank_k = 100;

    std::vector<MemoryImage> defended_m; // model-level obfuscated variants
    std::vector<MemoryImage> defended_c; // code-level obfuscated variants

    // ------------------------------------------------------------------
    // 1. Utility exactness: obfuscation never changes a single output.
    // ------------------------------------------------------------------
    {
        Criterion c("criterion 1, utility exactness");
        std::vector<std::vector<float>> clean_logits(ev.size());
        for (size_t s = 0; s < ev.size(); ++s) clean_logits[s] = forward(net, ev[s]->x).logits;

        bool native_exact = true, vm_exact = true;
        const size_t vm_samples = 12; // VM spot-check per pattern; full split natively
        for (int i = 0; i < 20; ++i) {
            ObfuscationPattern pat =
                generate_pattern(img, ds, vw, 0.3f, derive_seed(7, 0xB000 + i), po);
            defended_m.push_back(apply_pattern(img, pat));
            Network dn = materialize_network(defended_m.back());
            for (size_t s = 0; s < ev.size(); ++s)
                if (forward(dn, ev[s]->x).logits != clean_logits[s]) native_exact = false;
            for (size_t s = 0; s < vm_samples; ++s) {
                ForwardResult fr = vm_forward(defended_m.back(), ev[s]->x);
                if (fr.outcome != Outcome::Ok || fr.logits != clean_logits[s]) vm_exact = false;
            }
        }
        c.finish(native_exact && vm_exact,
                 fmt("20 patterns at prob 0.3: native logits bit-identical on all %zu eval "
                     "samples (%s), kernel-executed logits identical on %zu samples each (%s)",
                     ev.size(), native_exact ? "yes" : "NO", vm_samples, vm_exact ? "yes" : "NO"));
    }

    // ------------------------------------------------------------------
    // 2. Untargeted mitigation.
    // ------------------------------------------------------------------
    AttackRecord ua;
    {
        Criterion c("criterion 2, untargeted mitigation");
        ua = untargeted_bfa(img, ds, 20, 0.35f, derive_seed(7, 0xA001));
        bool clean_ok = base >= 0.90f && ua.achieved <= 0.375f && ua.flips.size() <= 20;
        int ok = 0;
        float worst = 1.0f;
        for (const auto& d : defended_m) {
            EvalReport r = replay(d, ua.flips, ds);
            float a = r.accuracy.value_or(0.0f);
            worst = std::min(worst, a);
            if (r.outcome == Outcome::Ok && a >= base - 0.05f) ++ok;
        }
        c.finish(clean_ok && ok >= 19,
                 fmt("baseline %.3f; clean attack -> %.3f in %zu flips (bound 0.375); defended "
                     "replay >= %.3f in %d/20 seeds (worst %.3f, need >= 19)",
                     base, ua.achieved, ua.flips.size(), base - 0.05f, ok, worst));
    }

    // ------------------------------------------------------------------
    // 3. Targeted mitigation.
    // ------------------------------------------------------------------
    {
        Criterion c("criterion 3, targeted mitigation");
        AttackRecord ta = targeted_bfa(img, ds, 0, 1, 8, derive_seed(7, 0xA002));
        ReplayOptions ro;
        ro.source = 0;
        ro.target = 1;
        const float confusion = replay(img, std::vector<BitAddress>{}, ds, ro).asr.value();
        bool clean_ok = ta.achieved >= 0.9f;
        int ok = 0;
        float worst = 0.0f;
        for (const auto& d : defended_m) {
            EvalReport r = replay(d, ta.flips, ds, ro);
            float a = r.asr.value_or(1.0f);
            worst = std::max(worst, a);
            if (r.outcome == Outcome::Ok && a <= confusion + 0.05f) ++ok;
        }
        c.finish(clean_ok && ok >= 19,
                 fmt("clean attack ASR %.3f within budget 8 (need >= 0.9); defended replay ASR "
                     "<= %.3f in %d/20 seeds (worst %.3f, need >= 19)",
                     ta.achieved, confusion + 0.05f, ok, worst));
    }

    // ------------------------------------------------------------------
    // 4. Code-level mitigation.
    // ------------------------------------------------------------------
    VulnerabilityList vc;
    {
        Criterion c("criterion 4, code-level mitigation");
        vc = search_code_vulnerabilities(img, ds);
        bool found = vc.stats.drop >= 1 && !vc.entries.empty();
        const std::vector<BitAddress> jump_flips = vc.addresses();
        ReplayOptions rv;
        rv.use_vm = true;
        int safe = 0, crashed = 0;
        float worst_ok = 1.0f;
        for (int i = 0; i < 20; ++i) {
            ObfuscationPattern pat =
                generate_pattern(img, ds, vc, 0.3f, derive_seed(7, 0xC100 + i), po);
            defended_c.push_back(apply_pattern(img, pat));
            EvalReport r = replay(defended_c.back(), jump_flips, ds, rv);
            if (r.outcome != Outcome::Ok) {
                ++safe; // loud failure, not silent degradation
                ++crashed;
            } else if (r.accuracy.value_or(0.0f) >= base - 0.05f) {
                ++safe;
                worst_ok = std::min(worst_ok, r.accuracy.value());
            }
        }
        c.finish(found && safe == 20,
                 fmt("sweep found %d accuracy-drop jumps; replaying all %zu listed flips: "
                     "%d/20 defended seeds safe (%d crash/timeout, worst surviving accuracy "
                     "%.3f)",
                     vc.stats.drop, jump_flips.size(), safe, crashed, worst_ok));
    }

    // ------------------------------------------------------------------
    // 5. Adaptive-attack resistance: full range-expansion grids.
    // ------------------------------------------------------------------
    {
        Criterion c("criterion 5, adaptive-attack resistance");
        bool all_safe = true;
        int code_pts = 0, code_loud = 0, model_pts = 0;
        float worst = 1.0f;

        AttackRecord crec; // windows expand around the known critical jumps
        crec.flips = vc.addresses();
        ReplayOptions rv;
        rv.use_vm = true;
        for (int x1 = 5; x1 <= 45; x1 += 5) {
            for (int x2 = 0; x2 <= 2; ++x2) {
                AdaptiveRangeSpec spec;
                spec.x1 = x1;
                spec.x2 = x2;
                spec.al = 16;
                auto flips = adaptive_flip_set(crec, spec, AttackLevel::Code,
                                               defended_c[0].payload.size());
                EvalReport r = replay(defended_c[0], flips, ds, rv);
                ++code_pts;
                if (r.outcome != Outcome::Ok) {
                    ++code_loud;
                } else {
                    worst = std::min(worst, r.accuracy.value());
                    if (r.accuracy.value() < base - 0.05f) all_safe = false;
                }
            }
        }
        for (int x : {3, 5, 7, 9, 11}) {
            AdaptiveRangeSpec spec;
            spec.x = x;
            auto flips =
                adaptive_flip_set(ua, spec, AttackLevel::Model, defended_m[0].payload.size());
            EvalReport r = replay(defended_m[0], flips, ds);
            ++model_pts;
            if (r.outcome == Outcome::Ok) {
                worst = std::min(worst, r.accuracy.value());
                if (r.accuracy.value() < base - 0.05f) all_safe = false;
            }
        }
        c.finish(all_safe, fmt("code grid %d points (%d crash/timeout) + model grid %d points: "
                               "every Ok replay >= %.3f (worst %.3f)",
                               code_pts, code_loud, model_pts, base - 0.05f, worst));
    }

    // ------------------------------------------------------------------
    // 6. Pattern postcondition and sweep restore correctness.
    // ------------------------------------------------------------------
    {
        Criterion c("criterion 6, pattern postcondition and sweep restore");
        const std::vector<BitAddress> old_w = vw.addresses();
        const std::set<BitAddress> old_ws(old_w.begin(), old_w.end());
        bool disjoint = true;
        for (const auto& d : defended_m) {
            VulnerabilityList nv = rank_vulnerable_weights(d, ds, 100);
            for (const auto& a : nv.addresses())
                if (old_ws.count(a)) disjoint = false;
        }
        const std::vector<BitAddress> old_c = vc.addresses();
        const std::set<BitAddress> old_cs(old_c.begin(), old_c.end());
        const size_t code_checked = 5; // full sweeps are the expensive part
        for (size_t i = 0; i < code_checked; ++i) {
            VulnerabilityList nv = search_code_vulnerabilities(defended_c[i], ds);
            for (const auto& a : nv.addresses())
                if (old_cs.count(a)) disjoint = false;
        }
        const uint64_t h0 = img.payload_hash();
        (void)search_code_vulnerabilities(img, ds);
        const bool restored = img.payload_hash() == h0;
        c.finish(disjoint && restored,
                 fmt("old/new vulnerable addresses disjoint on 20 model + %zu code patterns "
                     "(%s); image hash unchanged by the sweep (%s)",
                     code_checked, disjoint ? "yes" : "NO", restored ? "yes" : "NO"));
    }

    // ------------------------------------------------------------------
    // 7. Random flips are mostly harmless; attacks need guidance.
    // ------------------------------------------------------------------
    {
        Criterion c("criterion 7, random-flip baseline");
        const CoordMap cm = coord_map(img);
        SplitMix64 rng(derive_seed(7, 0xF00D));
        int mild = 0;
        for (int t = 0; t < 100; ++t) {
            MemoryImage w = img;
            for (int f = 0; f < 20; ++f) {
                uint64_t byte =
                    cm.weights_begin + rng.next_below(cm.weights_end - cm.weights_begin);
                flip_bit(w, {byte, static_cast<uint8_t>(rng.next_below(8))});
            }
            float a = evaluate(materialize_network(w), ds).accuracy.value();
            if (std::fabs(a - base) < 0.05f) ++mild;
        }
        const int jumps = vc.stats.visited;
        const bool jcc_ok = jumps > 0 && 2 * vc.stats.drop < jumps;
        c.finish(mild >= 90 && jcc_ok,
                 fmt("20 random weight-bit flips move accuracy < 5 points in %d/100 trials "
                     "(need >= 90); %d/%d kernel jump inversions degrade accuracy (need < 50%%)",
                     mild, vc.stats.drop, jumps));
    }

    // ------------------------------------------------------------------
    // 8. Numerical correctness against independent oracles.
    // ------------------------------------------------------------------
    {
        Criterion c("criterion 8, numerical correctness");
        // (a) analytic gradients vs central finite differences, on a smooth
        // (activation-free) small net where the comparison is well-posed.
        Fixture f = small_fixture(11, {16, 8, 4}, 20, 4);
        for (auto& l : f.fnet.layers) l.act = Activation::None;
        auto batch = eval_samples(f.ds);
        batch.resize(8);
        GradientMap g = compute_gradients(f.fnet, batch);
        auto loss = [&](const FloatNetwork& n) {
            double total = 0;
            for (const auto* s : batch) {
                std::vector<float> z = n.forward(s->x);
                double mx = *std::max_element(z.begin(), z.end());
                double denom = 0;
                for (float v : z) denom += std::exp(static_cast<double>(v) - mx);
                total -= (static_cast<double>(z[static_cast<size_t>(s->label)]) - mx) -
                         std::log(denom);
            }
            return total / static_cast<double>(batch.size());
        };
        const float h = 1e-2f;
        SplitMix64 frng(99);
        int checked = 0;
        double worst_rel = 0.0;
        for (size_t li = 0; li < f.fnet.layers.size(); ++li) {
            for (int rep = 0; rep < 40; ++rep) {
                const bool bias = rep >= 30;
                auto& pw = bias ? f.fnet.layers[li].b : f.fnet.layers[li].w;
                size_t wi = frng.next_below(pw.size());
                FloatNetwork p = f.fnet, m = f.fnet;
                (bias ? p.layers[li].b : p.layers[li].w)[wi] += h;
                (bias ? m.layers[li].b : m.layers[li].w)[wi] -= h;
                double fd = (loss(p) - loss(m)) / (2.0 * h);
                double an = bias ? g.bias_grads[li][wi] : g.weight_grads[li][wi];
                double denom = std::max(std::abs(fd), std::abs(an));
                if (denom < 1e-2) continue; // below fp32 finite-difference noise
                worst_rel = std::max(worst_rel, std::abs(fd - an) / denom);
                ++checked;
            }
        }
        const bool fd_ok = checked > 30 && worst_rel < 1e-3;

        // (b) VM matmul vs an independent triple-loop oracle, 200 pairs.
        const Section& code = img.section("CODE");
        VmKernelExec exec(img.payload.data() + code.offset, code.length, img.program_meta.entry);
        SplitMix64 mrng(derive_seed(7, 0x3A7));
        bool mm_ok = true;
        for (int t = 0; t < 200 && mm_ok; ++t) {
            int m = 1 + static_cast<int>(mrng.next_below(6));
            int n = 1 + static_cast<int>(mrng.next_below(6));
            int k = 1 + static_cast<int>(mrng.next_below(8));
            std::vector<int32_t> a(static_cast<size_t>(m) * k), b(static_cast<size_t>(k) * n);
            for (auto& v : a) v = static_cast<int32_t>(mrng.next_below(255)) - 127;
            for (auto& v : b) v = static_cast<int32_t>(mrng.next_below(255)) - 127;
            std::vector<int32_t> cv(static_cast<size_t>(m) * n), co(cv.size());
            uint64_t steps = 0;
            if (exec.matmul(m, n, k, a.data(), b.data(), cv.data(), steps) != Outcome::Ok)
                mm_ok = false;
            matmul_oracle(m, n, k, a.data(), b.data(), co.data(), kClampHi, kClampLo);
            if (cv != co) mm_ok = false;
        }

        // (c) top-k ranking vs brute-force sort, every k, net < 2000 weights.
        Fixture f2 = small_fixture(7, {16, 8, 4}, 20, 8);
        MemoryImage img2 = build_image(f2.net, assemble(kGemmKernelSource));
        GradientMap g2 = compute_gradients(f2.net, eval_samples(f2.ds));
        struct Row {
            float score;
            int layer, row, col;
        };
        std::vector<Row> all;
        for (size_t li = 0; li < g2.weight_grads.size(); ++li) {
            int cols = f2.net.layers[li].in;
            for (size_t i = 0; i < g2.weight_grads[li].size(); ++i)
                all.push_back({std::fabs(g2.weight_grads[li][i]), static_cast<int>(li),
                               static_cast<int>(i) / cols, static_cast<int>(i) % cols});
        }
        std::sort(all.begin(), all.end(), [](const Row& x, const Row& y) {
            if (x.score != y.score) return x.score > y.score;
            return std::tie(x.layer, x.row, x.col) < std::tie(y.layer, y.row, y.col);
        });
        const int total = static_cast<int>(f2.net.total_weights());
        bool topk_ok = total < 2000;
        for (int k = 1; k <= total && topk_ok; ++k) {
            VulnerabilityList v = rank_vulnerable_weights(img2, f2.ds, k);
            if (static_cast<int>(v.entries.size()) != k) topk_ok = false;
            for (int i = 0; i < k && topk_ok; ++i)
                if (v.entries[static_cast<size_t>(i)].coord.layer != all[static_cast<size_t>(i)].layer ||
                    v.entries[static_cast<size_t>(i)].coord.row != all[static_cast<size_t>(i)].row ||
                    v.entries[static_cast<size_t>(i)].coord.col != all[static_cast<size_t>(i)].col)
                    topk_ok = false;
        }
        c.finish(fd_ok && mm_ok && topk_ok,
                 fmt("finite differences: %d coords, worst rel err %.2e (need < 1e-3); VM "
                     "matmul == oracle on 200 pairs (%s); top-k == brute force for all k on "
                     "%d weights (%s)",
                     checked, worst_rel, mm_ok ? "yes" : "NO", total, topk_ok ? "yes" : "NO"));
    }

    // ------------------------------------------------------------------
    // 9. Overhead bounds and the prob-vs-overhead curve.
    // ------------------------------------------------------------------
    {
        Criterion c("criterion 9, overhead bounds");
        std::vector<const Dataset::Sample*> few(ev.begin(), ev.begin() + 8);
        const double base_steps =
            static_cast<double>(run_inference_with_vm(img, few).steps_executed);

        std::ofstream csv("overhead_curve.csv");
        csv << "prob,storage_overhead,steps_overhead\n";
        double storage03 = 1.0, steps03 = 1.0;
        int rows = 0;
        const float probs[] = {0.1f, 0.3f, 0.5f, 0.7f, 0.9f};
        for (int i = 0; i < 5; ++i) {
            ObfuscationPattern pat =
                generate_pattern(img, ds, vw, probs[i], derive_seed(7, 0xC000 + i), po);
            MemoryImage d = apply_pattern(img, pat);
            double st = static_cast<double>(d.payload.size() - img.payload.size()) /
                        static_cast<double>(img.payload.size());
            double sp = (static_cast<double>(run_inference_with_vm(d, few).steps_executed) -
                         base_steps) /
                        base_steps;
            csv << probs[i] << "," << st << "," << sp << "\n";
            ++rows;
            if (i == 1) {
                storage03 = st;
                steps03 = sp;
            }
        }
        csv.close();
        c.finish(rows == 5 && storage03 < 0.05 && steps03 < 0.10,
                 fmt("prob 0.3 defaults: storage +%.2f%% (bound 5%%), steps +%.2f%% (bound "
                     "10%%); overhead_curve.csv written with %d prob points",
                     storage03 * 100.0, steps03 * 100.0, rows));
    }

    const double total_secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - suite_t0).count();
    std::printf("%d/9 criteria passed (%.1f s total)\n", 9 - g_failures, total_secs);
    return g_failures;
}
