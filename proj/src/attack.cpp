#include "flipguard/attack.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "flipguard/error.hpp"
#include "flipguard/rng.hpp"
#include "flipguard/vm_backend.hpp"

namespace flipguard {

namespace {

// Seeded attack batch: a fixed subset of the eval split the attacker uses
// to steer the greedy search.
std::vector<const Dataset::Sample*> attack_batch(const Dataset& ds, uint64_t seed, size_t n) {
    auto ev = eval_samples(ds);
    SplitMix64 rng(derive_seed(seed, 0xA7400));
    std::vector<const Dataset::Sample*> batch;
    n = std::min(n, ev.size());
    for (size_t i = ev.size(); i > 1; --i) std::swap(ev[i - 1], ev[rng.next_below(i)]);
    batch.assign(ev.begin(), ev.begin() + static_cast<long>(n));
    return batch;
}

int argmax_acc(const int32_t* acc, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i)
        if (acc[i] > acc[best]) best = i;
    return best;
}

} // namespace

AttackRecord untargeted_bfa(const MemoryImage& img, const Dataset& ds, int budget, float stop_acc,
                            uint64_t seed) {
    if (budget < 0) fail(Errc::ConfigError, "budget must be >= 0");
    AttackRecord rec;
    rec.mode = AttackMode::Untargeted;
    rec.budget = budget;
    rec.seed = seed;

    MemoryImage work = img;
    auto batch = attack_batch(ds, seed, 64);
    rec.achieved = evaluate(materialize_network(work), ds).accuracy.value_or(0.0f);

    std::set<uint64_t> committed_bytes;
    for (int round = 0; round < budget; ++round) {
        Network net = materialize_network(work);
        GradientMap g = compute_gradients(net, batch);
        CoordMap cm = coord_map(work);

        // Candidates are every parameter's MSB; ranked by the first-order
        // loss estimate |g| * |delta| of that flip. For int8 weights the MSB
        // toggles the value by 128 steps of scale_w; for int32 biases it
        // toggles bit 31, i.e. 2^31 steps of the bias scale — which is why
        // bias words dominate the pool despite their smaller raw gradients.
        struct Cand {
            float score;
            uint64_t byte; // MSB-carrying byte (weights: the byte; biases: LE byte 3)
        };
        std::vector<Cand> cands;
        for (size_t li = 0; li < g.weight_grads.size(); ++li) {
            const auto& wg = g.weight_grads[li];
            const float wstep = 128.0f * net.layers[li].scale_w;
            for (size_t i = 0; i < wg.size(); ++i) {
                uint64_t byte = cm.weight_offset[li] + i;
                if (committed_bytes.count(byte)) continue;
                cands.push_back({std::fabs(wg[i]) * wstep, byte});
            }
            const auto& bg = g.bias_grads[li];
            const float bstep =
                2147483648.0f * net.layers[li].scale_w * net.layers[li].scale_in;
            for (size_t i = 0; i < bg.size(); ++i) {
                uint64_t byte = cm.bias_offset[li] + 4 * i + 3;
                if (committed_bytes.count(byte)) continue;
                cands.push_back({std::fabs(bg[i]) * bstep, byte});
            }
        }
        auto better = [](const Cand& a, const Cand& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.byte < b.byte;
        };
        size_t pool = std::min<size_t>(16, cands.size());
        if (pool == 0) break;
        std::partial_sort(cands.begin(), cands.begin() + static_cast<long>(pool), cands.end(),
                          better);

        double best_loss = -1.0;
        size_t best = 0;
        for (size_t c = 0; c < pool; ++c) {
            BitAddress a{cands[c].byte, 7}; // MSB (sign) flip
            flip_bit(work, a);
            double loss = batch_loss(materialize_network(work), batch);
            flip_bit(work, a);
            if (loss > best_loss) {
                best_loss = loss;
                best = c;
            }
        }
        BitAddress a{cands[best].byte, 7};
        flip_bit(work, a);
        rec.flips.push_back(a);
        rec.achieved = evaluate(materialize_network(work), ds).accuracy.value_or(0.0f);
        committed_bytes.insert(cands[best].byte);
        if (rec.achieved <= stop_acc) break;
    }
    return rec;
}

AttackRecord targeted_bfa(const MemoryImage& img, const Dataset& ds, int source, int target,
                          int budget, uint64_t seed) {
    if (source == target) fail(Errc::ConfigError, "source and target class must differ");
    AttackRecord rec;
    rec.mode = AttackMode::Targeted;
    rec.source = source;
    rec.target = target;
    rec.budget = budget;
    rec.seed = seed;

    Network net = materialize_network(img);
    const int lf = static_cast<int>(net.layers.size()) - 1;
    QuantLayer& fl = net.layers[static_cast<size_t>(lf)];
    if (fl.kind != LayerKind::Linear) fail(Errc::ConfigError, "final layer must be linear");
    const int n_out = fl.out, n_in = fl.in;

    // Cache each eval sample's penultimate activation and final-layer
    // accumulators once: every candidate flip touches a single logit.
    auto samples = eval_samples(ds);
    const size_t S = samples.size();
    std::vector<std::vector<int8_t>> u(S);
    std::vector<std::vector<int32_t>> acc(S);
    for (size_t s = 0; s < S; ++s) {
        // Integer forward through the head layers, mirroring forward()'s
        // arithmetic exactly, keeping the final layer's int8 input.
        std::vector<int8_t> v(static_cast<size_t>(net.layers.front().in));
        for (size_t i = 0; i < v.size(); ++i) {
            long q = lrintf(samples[s]->x[i] / net.layers.front().scale_in);
            v[i] = static_cast<int8_t>(std::clamp<long>(q, -127, 127));
        }
        for (int li = 0; li < lf; ++li) {
            const auto& l = net.layers[static_cast<size_t>(li)];
            std::vector<int8_t> next(static_cast<size_t>(l.out));
            const float mult = l.scale_w * l.scale_in / l.scale_out;
            for (int m = 0; m < l.out; ++m) {
                int32_t a = l.b[static_cast<size_t>(m)];
                const int8_t* row = l.w.data() + static_cast<size_t>(m) * static_cast<size_t>(l.in);
                for (int j = 0; j < l.in; ++j) a += int32_t(row[j]) * int32_t(v[static_cast<size_t>(j)]);
                long q = lrintf(static_cast<float>(a) * mult);
                q = std::clamp<long>(q, -127, 127);
                if (l.act == Activation::ReLU && q < 0) q = 0;
                next[static_cast<size_t>(m)] = static_cast<int8_t>(q);
            }
            v = std::move(next);
        }
        u[s] = v;
        acc[s].resize(static_cast<size_t>(n_out));
        for (int m = 0; m < n_out; ++m) {
            int32_t a = fl.b[static_cast<size_t>(m)];
            const int8_t* row = fl.w.data() + static_cast<size_t>(m) * static_cast<size_t>(n_in);
            for (int j = 0; j < n_in; ++j) a += int32_t(row[j]) * int32_t(u[s][static_cast<size_t>(j)]);
            acc[s][static_cast<size_t>(m)] = a;
        }
    }

    std::vector<size_t> src_idx, other_idx;
    for (size_t s = 0; s < S; ++s)
        (samples[s]->label == source ? src_idx : other_idx).push_back(s);
    if (src_idx.empty()) fail(Errc::ConfigError, "no eval samples of the source class");

    auto asr_of = [&]() {
        size_t hit = 0;
        for (size_t s : src_idx)
            if (argmax_acc(acc[s].data(), n_out) == target) hit++;
        return static_cast<float>(hit) / static_cast<float>(src_idx.size());
    };
    auto other_acc_of = [&]() {
        size_t ok = 0;
        for (size_t s : other_idx)
            if (argmax_acc(acc[s].data(), n_out) == samples[s]->label) ok++;
        return other_idx.empty() ? 1.0f : static_cast<float>(ok) / static_cast<float>(other_idx.size());
    };

    const float other_base = other_acc_of();
    rec.achieved = asr_of();

    const CoordMap cm = coord_map(img);
    std::set<std::pair<int, int>> committed; // (flat parameter index, bit)
    for (int round = 0; round < budget && rec.achieved < 1.0f; ++round) {
        float best_obj = -1e9f;
        int best_m = -1, best_j = -1, best_bit = -1;
        int8_t best_neww = 0;
        int32_t best_db = 0; // logit delta if the best candidate is a bias bit
        // Bias candidates: flipping bit `bit` of bias word m shifts logit m by
        // a constant across all samples, which gives fine-grained control of
        // the source->target margin without touching other classes.
        for (int m = 0; m < n_out; ++m) {
            const int flat = n_out * n_in + m; // bias pseudo-index, disjoint from weights
            const int32_t b0 = fl.b[static_cast<size_t>(m)];
            for (int bit = 0; bit < 32; ++bit) {
                if (committed.count({flat, bit})) continue;
                const int32_t db =
                    static_cast<int32_t>((b0 ^ (int32_t(1) << bit)) - int64_t(b0));
                size_t hit = 0;
                for (size_t s : src_idx) {
                    int32_t logits[8];
                    for (int mm = 0; mm < n_out; ++mm) logits[mm] = acc[s][static_cast<size_t>(mm)];
                    logits[m] += db;
                    if (argmax_acc(logits, n_out) == target) hit++;
                }
                float asr = static_cast<float>(hit) / static_cast<float>(src_idx.size());
                size_t ok = 0;
                for (size_t s : other_idx) {
                    int32_t logits[8];
                    for (int mm = 0; mm < n_out; ++mm) logits[mm] = acc[s][static_cast<size_t>(mm)];
                    logits[m] += db;
                    if (argmax_acc(logits, n_out) == samples[s]->label) ok++;
                }
                float oacc = other_idx.empty()
                                 ? 1.0f
                                 : static_cast<float>(ok) / static_cast<float>(other_idx.size());
                float obj = asr - (other_base - oacc);
                if (obj > best_obj) {
                    best_obj = obj;
                    best_m = m;
                    best_j = -1;
                    best_bit = bit;
                    best_db = db;
                }
            }
        }
        for (int m = 0; m < n_out; ++m) {
            for (int j = 0; j < n_in; ++j) {
                int flat = m * n_in + j;
                int8_t w0 = fl.w[static_cast<size_t>(flat)];
                for (int bit = 0; bit < 8; ++bit) {
                    if (committed.count({flat, bit})) continue;
                    int8_t w1 = static_cast<int8_t>(w0 ^ static_cast<int8_t>(1 << bit));
                    int32_t dw = int32_t(w1) - int32_t(w0);
                    // ASR term
                    size_t hit = 0;
                    for (size_t s : src_idx) {
                        int32_t logits[8];
                        for (int mm = 0; mm < n_out; ++mm) logits[mm] = acc[s][static_cast<size_t>(mm)];
                        logits[m] += dw * int32_t(u[s][static_cast<size_t>(j)]);
                        if (argmax_acc(logits, n_out) == target) hit++;
                    }
                    float asr = static_cast<float>(hit) / static_cast<float>(src_idx.size());
                    size_t ok = 0;
                    for (size_t s : other_idx) {
                        int32_t logits[8];
                        for (int mm = 0; mm < n_out; ++mm) logits[mm] = acc[s][static_cast<size_t>(mm)];
                        logits[m] += dw * int32_t(u[s][static_cast<size_t>(j)]);
                        if (argmax_acc(logits, n_out) == samples[s]->label) ok++;
                    }
                    float oacc = other_idx.empty()
                                     ? 1.0f
                                     : static_cast<float>(ok) / static_cast<float>(other_idx.size());
                    float obj = asr - (other_base - oacc);
                    if (obj > best_obj) {
                        best_obj = obj;
                        best_m = m;
                        best_j = j;
                        best_bit = bit;
                        best_neww = w1;
                    }
                }
            }
        }
        if (best_m < 0) break;
        if (best_j < 0) { // bias bit
            fl.b[static_cast<size_t>(best_m)] ^= (int32_t(1) << best_bit);
            for (size_t s = 0; s < S; ++s) acc[s][static_cast<size_t>(best_m)] += best_db;
            committed.insert({n_out * n_in + best_m, best_bit});
            rec.flips.push_back(BitAddress{cm.bias_offset[static_cast<size_t>(lf)] +
                                               static_cast<uint64_t>(4 * best_m + best_bit / 8),
                                           static_cast<uint8_t>(best_bit % 8)});
        } else {
            int flat = best_m * n_in + best_j;
            int32_t dw = int32_t(best_neww) - int32_t(fl.w[static_cast<size_t>(flat)]);
            fl.w[static_cast<size_t>(flat)] = best_neww;
            for (size_t s = 0; s < S; ++s)
                acc[s][static_cast<size_t>(best_m)] +=
                    dw * int32_t(u[s][static_cast<size_t>(best_j)]);
            committed.insert({flat, best_bit});
            WeightLocation loc = locate_weight(img, lf, best_m, best_j);
            rec.flips.push_back(loc.bits[best_bit]);
        }
        rec.achieved = asr_of();
    }
    return rec;
}

EvalReport replay(const MemoryImage& img, const std::vector<BitAddress>& flips, const Dataset& ds,
                  const ReplayOptions& opt) {
    MemoryImage work = img;
    for (const auto& a : flips) {
        if (a.byte_offset >= work.payload.size()) continue; // reported, not applied
        flip_bit(work, a);
    }
    auto samples = eval_samples(ds);
    EvalReport rep;
    if (opt.use_vm) {
        rep = run_inference_with_vm(work, samples, opt.step_budget);
    } else {
        rep = evaluate_samples(materialize_network(work), samples);
    }
    if (rep.outcome == Outcome::Ok && opt.source >= 0 && opt.target >= 0) {
        // ASR: fraction of source-class eval samples predicted as target.
        Network net = materialize_network(work);
        const Section& code = img.section("CODE");
        VmKernelExec exec(work.payload.data() + code.offset, code.length,
                          work.program_meta.entry, opt.step_budget);
        size_t n_src = 0, hit = 0;
        for (const auto* s : samples) {
            if (s->label != opt.source) continue;
            ++n_src;
            ForwardResult fr = forward(net, s->x, opt.use_vm ? &exec : nullptr);
            if (fr.outcome != Outcome::Ok) continue;
            int best = 0;
            for (int i = 1; i < static_cast<int>(fr.logits.size()); ++i)
                if (fr.logits[static_cast<size_t>(i)] > fr.logits[static_cast<size_t>(best)]) best = i;
            if (best == opt.target) ++hit;
        }
        if (n_src > 0) rep.asr = static_cast<float>(hit) / static_cast<float>(n_src);
    }
    return rep;
}

EvalReport replay(const MemoryImage& img, const AttackRecord& rec, const Dataset& ds,
                  const ReplayOptions& opt) {
    ReplayOptions o = opt;
    if (rec.mode == AttackMode::Targeted) {
        o.source = rec.source;
        o.target = rec.target;
    }
    return replay(img, rec.flips, ds, o);
}

std::vector<BitAddress> adaptive_flip_set(const AttackRecord& rec, const AdaptiveRangeSpec& spec,
                                          AttackLevel level, uint64_t payload_len) {
    if (spec.al <= 0) fail(Errc::ConfigError, "alignment must be > 0");
    std::set<uint64_t> bytes;
    for (const auto& a : rec.flips) {
        int64_t lo, hi;
        if (level == AttackLevel::Code) {
            lo = static_cast<int64_t>(a.byte_offset) - spec.x1 +
                 static_cast<int64_t>(spec.x2) * spec.al;
            hi = static_cast<int64_t>(a.byte_offset) + spec.x1 +
                 static_cast<int64_t>(spec.x2) * spec.al;
        } else {
            lo = static_cast<int64_t>(a.byte_offset) - spec.x;
            hi = static_cast<int64_t>(a.byte_offset) + spec.x;
        }
        lo = std::max<int64_t>(lo, 0);
        hi = std::min<int64_t>(hi, static_cast<int64_t>(payload_len) - 1);
        for (int64_t b = lo; b <= hi; ++b) bytes.insert(static_cast<uint64_t>(b));
    }
    std::vector<BitAddress> out;
    for (uint64_t b : bytes)
        for (uint8_t bit = 0; bit < 8; ++bit) out.push_back({b, bit});
    return out;
}

void save_attack_record(const AttackRecord& rec, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) fail(Errc::IoError, "cannot open for write: " + path);
    f << "attack v1 " << (rec.mode == AttackMode::Untargeted ? "untargeted" : "targeted") << " "
      << rec.source << " " << rec.target << " " << rec.budget << " " << rec.seed << " "
      << rec.achieved << "\n";
    for (const auto& a : rec.flips) f << a.byte_offset << " " << int(a.bit_index) << "\n";
    if (!f) fail(Errc::IoError, "write failed: " + path);
}

AttackRecord load_attack_record(const std::string& path) {
    std::ifstream f(path);
    if (!f) fail(Errc::IoError, "cannot open for read: " + path);
    AttackRecord rec;
    std::string tag, ver, mode;
    f >> tag >> ver >> mode >> rec.source >> rec.target >> rec.budget >> rec.seed >> rec.achieved;
    if (tag != "attack" || ver != "v1" || (mode != "untargeted" && mode != "targeted"))
        fail(Errc::ParseError, "bad attack record header");
    rec.mode = mode == "untargeted" ? AttackMode::Untargeted : AttackMode::Targeted;
    uint64_t byte;
    int bit;
    while (f >> byte >> bit) rec.flips.push_back({byte, static_cast<uint8_t>(bit)});
    return rec;
}

} // namespace flipguard
