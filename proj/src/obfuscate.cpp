#include "flipguard/obfuscate.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "flipguard/error.hpp"
#include "flipguard/rng.hpp"
#include "flipguard/vm_backend.hpp"

namespace flipguard {

namespace {

int conv_out_count(const QuantLayer& l) {
    int oh = l.in_shape.h - l.kh + 1, ow = l.in_shape.w - l.kw + 1;
    return l.filters * oh * ow;
}

} // namespace

Network insert_dummy_layer(const Network& net, int after) {
    const int L = static_cast<int>(net.layers.size());
    if (after < -1 || after >= L - 1)
        fail(Errc::OutOfRange, "dummy layer must precede an existing non-final layer");
    if (after >= 0) {
        Activation a = net.layers[static_cast<size_t>(after)].act;
        if (a != Activation::ReLU && a != Activation::None)
            fail(Errc::NonIdempotentActivation, "preceding activation is not idempotent");
    }
    const QuantLayer& ref = net.layers[static_cast<size_t>(after + 1)]; // displaced layer

    QuantLayer d;
    d.backend = Backend::Native;
    d.act = after >= 0 ? net.layers[static_cast<size_t>(after)].act : Activation::None;
    if (ref.kind == LayerKind::Linear) {
        d.kind = LayerKind::Linear;
        d.in = d.out = ref.in;
        d.w.assign(static_cast<size_t>(d.in) * static_cast<size_t>(d.out), 0);
        for (int i = 0; i < d.in; ++i)
            d.w[static_cast<size_t>(i) * static_cast<size_t>(d.in) + static_cast<size_t>(i)] = 1;
        d.b.assign(static_cast<size_t>(d.out), 0);
    } else {
        // 1x1 conv, each filter one-hot on its own channel.
        int c = ref.in_shape.c;
        d.kind = LayerKind::Conv2D;
        d.filters = d.channels = c;
        d.kh = d.kw = 1;
        d.in_shape = ref.in_shape;
        d.in = d.out = ref.in_shape.count();
        d.w.assign(static_cast<size_t>(c) * static_cast<size_t>(c), 0);
        for (int f = 0; f < c; ++f)
            d.w[static_cast<size_t>(f) * static_cast<size_t>(c) + static_cast<size_t>(f)] = 1;
        d.b.assign(static_cast<size_t>(c), 0);
    }
    // Passthrough quantization: M = scale_w*scale_in/scale_out = 1 exactly.
    d.scale_w = 1.0f;
    d.scale_in = ref.scale_in;
    d.scale_out = ref.scale_in;

    Network out = net;
    out.layers.insert(out.layers.begin() + static_cast<long>(after + 1), std::move(d));
    return out;
}

Network insert_dummy_neurons(const Network& net, int layer, int n) {
    const int L = static_cast<int>(net.layers.size());
    if (n < 1) fail(Errc::OutOfRange, "dummy neuron count must be >= 1");
    if (layer < 0 || layer >= L - 1)
        fail(Errc::BoundaryLayer, "dummy neurons need a following layer of the same kind");
    Network out = net;
    QuantLayer& a = out.layers[static_cast<size_t>(layer)];
    QuantLayer& b = out.layers[static_cast<size_t>(layer) + 1];
    if (a.kind != b.kind)
        fail(Errc::BoundaryLayer, "cannot extend a layer across a flatten boundary");

    // The dummies are PREPENDED (rows/filters in `a`, columns/channels in
    // `b`). That shifts every real weight of both layers to a new address,
    // and the zero bytes left behind at old addresses are flip-resilient: a
    // corrupted dummy row only feeds `b`'s zero column, and a corrupted zero
    // column only multiplies the dummy's zero activation.
    if (a.kind == LayerKind::Linear) {
        a.w.insert(a.w.begin(), static_cast<size_t>(n) * static_cast<size_t>(a.in), 0);
        a.b.insert(a.b.begin(), static_cast<size_t>(n), 0);
        a.out += n;
        std::vector<int8_t> nw(static_cast<size_t>(b.out) * static_cast<size_t>(b.in + n), 0);
        for (int r = 0; r < b.out; ++r)
            std::copy_n(b.w.data() + static_cast<size_t>(r) * static_cast<size_t>(b.in), b.in,
                        nw.data() + static_cast<size_t>(r) * static_cast<size_t>(b.in + n) +
                            static_cast<size_t>(n));
        b.w = std::move(nw);
        b.in += n;
    } else {
        const size_t block = static_cast<size_t>(a.channels) * static_cast<size_t>(a.kh) *
                             static_cast<size_t>(a.kw);
        a.w.insert(a.w.begin(), static_cast<size_t>(n) * block, 0);
        a.b.insert(a.b.begin(), static_cast<size_t>(n), 0);
        a.filters += n;
        a.out = conv_out_count(a);

        const size_t old_block = static_cast<size_t>(b.channels) * static_cast<size_t>(b.kh) *
                                 static_cast<size_t>(b.kw);
        const size_t pad = static_cast<size_t>(n) * static_cast<size_t>(b.kh) *
                           static_cast<size_t>(b.kw);
        std::vector<int8_t> nw(static_cast<size_t>(b.filters) * (old_block + pad), 0);
        for (int f = 0; f < b.filters; ++f)
            std::copy_n(b.w.data() + static_cast<size_t>(f) * old_block, old_block,
                        nw.data() + static_cast<size_t>(f) * (old_block + pad) + pad);
        b.w = std::move(nw);
        b.channels += n;
        b.in_shape.c += n;
        b.in = b.in_shape.count();
    }
    return out;
}

Program insert_nops(const Program& prog, uint32_t at, int count) {
    if (count < 1) fail(Errc::OutOfRange, "NOP count must be >= 1");
    std::vector<Instr> instrs = decode_program(prog.bytecode);

    size_t idx = instrs.size();
    if (at != prog.bytecode.size()) {
        bool found = false;
        for (size_t i = 0; i < instrs.size(); ++i)
            if (instrs[i].offset == at) {
                idx = i;
                found = true;
                break;
            }
        if (!found) fail(Errc::NotInstructionBoundary, "offset is not an instruction boundary");
    }

    std::vector<Instr> next;
    next.reserve(instrs.size() + static_cast<size_t>(count));
    next.insert(next.end(), instrs.begin(), instrs.begin() + static_cast<long>(idx));
    for (int i = 0; i < count; ++i) {
        Instr nop;
        nop.op = Op::Nop;
        next.push_back(nop);
    }
    next.insert(next.end(), instrs.begin() + static_cast<long>(idx), instrs.end());
    // Jumps to the displaced instruction land on the first NOP; strictly
    // later targets shift by `count` instructions.
    for (auto& in : next) {
        if (in.target < 0) continue;
        if (in.target > static_cast<int>(idx)) in.target += count;
        else if (in.target == static_cast<int>(idx)) in.target = static_cast<int>(idx);
    }

    Program out;
    out.bytecode = encode_program(next);
    std::vector<Instr> re = decode_program(out.bytecode);

    // Remap labels and the entry point through instruction indices.
    auto old_index_of = [&](uint32_t off) -> int {
        if (off == prog.bytecode.size()) return static_cast<int>(instrs.size());
        for (size_t i = 0; i < instrs.size(); ++i)
            if (instrs[i].offset == off) return static_cast<int>(i);
        return -1;
    };
    auto new_offset_of = [&](int old_i) -> uint32_t {
        int ni = old_i > static_cast<int>(idx) ? old_i + count : old_i;
        if (ni >= static_cast<int>(re.size())) return static_cast<uint32_t>(out.bytecode.size());
        return re[static_cast<size_t>(ni)].offset;
    };
    for (const auto& [name, off] : prog.labels) {
        int oi = old_index_of(off);
        out.labels[name] = oi < 0 ? off : new_offset_of(oi);
    }
    int ei = old_index_of(prog.entry);
    out.entry = ei < 0 ? prog.entry : new_offset_of(ei);
    return out;
}

namespace {

// Byte offsets (instruction boundaries) lying outside every loop body, i.e.,
// outside every [backedge-target, backedge-instruction] interval. NOP runs
// hoisted to such a boundary displace the same downstream addresses but
// execute only once per invocation.
std::vector<uint8_t> cold_boundaries(const std::vector<Instr>& instrs) {
    struct Interval { uint32_t a, b; };
    std::vector<Interval> loops;
    for (const auto& in : instrs) {
        if (in.target < 0) continue;
        uint32_t t = in.target < static_cast<int>(instrs.size())
                         ? instrs[static_cast<size_t>(in.target)].offset
                         : 0xFFFFFFFFu;
        if (t <= in.offset) loops.push_back({t, in.offset});
    }
    std::vector<uint8_t> cold(instrs.size(), 1);
    for (size_t i = 0; i < instrs.size(); ++i)
        for (const auto& lp : loops)
            if (instrs[i].offset >= lp.a && instrs[i].offset <= lp.b) {
                cold[i] = 0;
                break;
            }
    return cold;
}

uint32_t hoist_offset(const std::vector<Instr>& instrs, const std::vector<uint8_t>& cold,
                      uint32_t site) {
    uint32_t best = site;
    bool found = false;
    for (size_t i = 0; i < instrs.size(); ++i) {
        if (instrs[i].offset > site) break;
        if (cold[i]) {
            best = instrs[i].offset;
            found = true;
        }
    }
    return found ? best : site; // no cold spot below: fall back to adjacent
}

} // namespace

ObfuscationPattern generate_pattern(const MemoryImage& img, const Dataset& ds,
                                    const VulnerabilityList& vuln, float prob, uint64_t seed,
                                    const PatternOptions& options) {
    if (prob < 0.0f || prob > 1.0f) fail(Errc::ConfigError, "prob must be in [0,1]");

    bool model_level = false, code_level = false;
    std::set<int> vuln_layers;
    std::set<uint64_t> code_vuln_bytes;
    for (const auto& e : vuln.entries) {
        if (e.kind == VulnKind::Weight) {
            model_level = true;
            vuln_layers.insert(e.coord.layer);
        } else {
            code_level = true;
            code_vuln_bytes.insert(e.address.byte_offset);
        }
    }
    const int L = static_cast<int>(img.skeleton.layers.size());
    const Section& code = img.section("CODE");
    std::vector<uint8_t> code_bytes(img.payload.begin() + static_cast<long>(code.offset),
                                    img.payload.begin() +
                                        static_cast<long>(code.offset + code.length));
    std::vector<Instr> instrs;
    std::vector<uint8_t> cold;
    std::set<uint32_t> vuln_sites; // instruction offsets housing vulnerable bytes
    if (code_level) {
        instrs = decode_program(code_bytes);
        cold = cold_boundaries(instrs);
        for (uint64_t b : code_vuln_bytes) {
            uint64_t rel = b - code.offset;
            for (const auto& in : instrs)
                if (rel >= in.offset && rel < in.offset + in.length) {
                    vuln_sites.insert(in.offset);
                    break;
                }
        }
    }

    std::set<BitAddress> old_addrs;
    for (const auto& e : vuln.entries) old_addrs.insert(e.address);

    for (int attempt = 0; attempt <= options.max_retries; ++attempt) {
        SplitMix64 rng(derive_seed(seed, 0xB000 + static_cast<uint64_t>(attempt)));
        ObfuscationPattern pat;
        pat.prob = prob;
        pat.seed = seed;
        pat.generation_retries = attempt;

        if (model_level) {
            for (int i = 0; i < L; ++i) {
                bool insert = rng.next_double() <= prob || vuln_layers.count(i);
                if (!insert) continue;
                // Dummy neurons at element e are prepended to the (e-1, e)
                // layer pair, displacing the weights of both layers; layer 0
                // is therefore covered by a record at element 1.
                const int pe = std::max(i, 1);
                bool neurons_legal =
                    pe < L && img.skeleton.layers[static_cast<size_t>(pe - 1)].kind ==
                                  img.skeleton.layers[static_cast<size_t>(pe)].kind;
                bool use_neurons = false;
                if (neurons_legal)
                    use_neurons = options.prefer_neurons || rng.next_below(2) == 0;
                ObfuscationRecord r;
                if (use_neurons) {
                    r.kind = RecordKind::DummyNeurons;
                    r.element = pe;
                    r.count = static_cast<int>(rng.next_range(1, 4));
                } else {
                    r.kind = RecordKind::DummyLayer;
                    r.element = i;
                }
                pat.records.push_back(r);
            }
        }
        if (code_level) {
            for (const auto& in : instrs) {
                bool insert = rng.next_double() <= prob || vuln_sites.count(in.offset);
                if (!insert) continue;
                ObfuscationRecord r;
                r.kind = RecordKind::Nops;
                r.count = static_cast<int>(rng.next_range(1, 16));
                r.code_offset = options.placement == NopPlacement::Cold
                                    ? hoist_offset(instrs, cold, in.offset)
                                    : in.offset;
                pat.records.push_back(r);
            }
        }

        MemoryImage candidate = apply_pattern(img, pat);

        // Alg.-style NoCommonAddr: re-run the relevant searcher on the
        // obfuscated image and demand disjoint vulnerable address sets.
        std::set<BitAddress> new_addrs;
        if (model_level) {
            VulnerabilityList nv = rank_vulnerable_weights(candidate, ds, options.rank_k);
            for (const auto& e : nv.entries) new_addrs.insert(e.address);
        }
        if (code_level) {
            VulnerabilityList nv = search_code_vulnerabilities(candidate, ds,
                                                               options.drop_tolerance,
                                                               options.step_budget);
            for (const auto& e : nv.entries) new_addrs.insert(e.address);
        }
        bool disjoint = true;
        for (const auto& a : old_addrs)
            if (new_addrs.count(a)) {
                disjoint = false;
                break;
            }
        if (!disjoint) continue;

        // Defense-in-depth beyond the address check: replaying the old
        // addresses on the candidate must not silently degrade accuracy.
        MemoryImage probe = candidate;
        for (const auto& a : old_addrs)
            if (a.byte_offset < probe.payload.size()) flip_bit(probe, a);
        EvalReport rep = code_level ? run_inference_with_vm(probe, ds, options.step_budget)
                                    : evaluate(materialize_network(probe), ds);
        if (rep.outcome == Outcome::Ok &&
            rep.accuracy.value_or(0.0f) < vuln.baseline_accuracy - options.drop_tolerance)
            continue;

        // Final-layer bias words are the highest-leverage attack target (one
        // bit moves a logit by up to 2^31 bias steps), so their stale
        // addresses get an extra guard: probe every bit of their bytes
        // individually on the candidate and reject any layout where such a
        // landing spot silently skews even a single class. Per-class drops
        // are checked because a targeted-style skew can stay invisible in
        // the overall accuracy.
        if (model_level) {
            EvalReport clean = evaluate(materialize_network(img), ds);
            const CoordMap cm = coord_map(img);
            const uint64_t blo = cm.bias_offset.back();
            const uint64_t bhi =
                blo + 4 * static_cast<uint64_t>(img.skeleton.layers.back().out);
            bool safe = true;
            for (uint64_t byte = blo; byte < bhi && safe; ++byte) {
                for (uint8_t bit = 0; bit < 8 && safe; ++bit) {
                    MemoryImage one = candidate;
                    flip_bit(one, {byte, bit});
                    EvalReport r1 = evaluate(materialize_network(one), ds);
                    if (r1.outcome != Outcome::Ok) continue; // loud, not silent
                    for (size_t cls = 0; cls < r1.per_class_accuracy.size(); ++cls)
                        if (r1.per_class_accuracy[cls] <
                            clean.per_class_accuracy[cls] - options.drop_tolerance)
                            safe = false;
                }
            }
            if (!safe) continue;
        }

        return pat;
    }
    fail(Errc::RetriesExhausted, "no acceptable pattern within retry budget");
}

MemoryImage apply_pattern(const MemoryImage& img, const ObfuscationPattern& pat) {
    Network net = materialize_network(img);
    Program prog = materialize_program(img);
    std::vector<uint8_t> flags(img.dummy_layer_flags);
    flags.resize(net.layers.size(), 0);
    const int L0 = static_cast<int>(net.layers.size());

    std::vector<ObfuscationRecord> model_recs, code_recs;
    for (const auto& r : pat.records)
        (r.kind == RecordKind::Nops ? code_recs : model_recs).push_back(r);

    std::stable_sort(model_recs.begin(), model_recs.end(),
                     [](const auto& a, const auto& b) { return a.element > b.element; });
    std::stable_sort(code_recs.begin(), code_recs.end(),
                     [](const auto& a, const auto& b) { return a.code_offset > b.code_offset; });

    for (const auto& r : model_recs) {
        if (r.element < 0 || r.element >= L0)
            fail(Errc::StaleLocation, "model record references a missing layer");
        if (r.kind == RecordKind::DummyLayer) {
            net = insert_dummy_layer(net, r.element - 1);
            flags.insert(flags.begin() + r.element, 1);
        } else {
            if (r.element < 1) fail(Errc::StaleLocation, "dummy neurons need a preceding layer");
            net = insert_dummy_neurons(net, r.element - 1, r.count);
        }
    }
    for (const auto& r : code_recs) {
        if (r.code_offset > prog.bytecode.size())
            fail(Errc::StaleLocation, "code record past program end");
        try {
            prog = insert_nops(prog, r.code_offset, r.count);
        } catch (const Error& e) {
            if (e.code() == Errc::NotInstructionBoundary)
                fail(Errc::StaleLocation, "code record not on an instruction boundary");
            throw;
        }
    }

    MemoryImage out = build_image(net, prog);
    out.dummy_layer_flags = flags;
    return out;
}

void save_pattern(const ObfuscationPattern& pat, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) fail(Errc::IoError, "cannot open for write: " + path);
    f << "pattern v1 prob " << pat.prob << " seed " << pat.seed << " retries "
      << pat.generation_retries << "\n";
    for (const auto& r : pat.records) {
        switch (r.kind) {
            case RecordKind::DummyLayer: f << "layer " << r.element << "\n"; break;
            case RecordKind::DummyNeurons: f << "neurons " << r.element << " " << r.count << "\n"; break;
            case RecordKind::Nops: f << "nops " << r.code_offset << " " << r.count << "\n"; break;
        }
    }
    if (!f) fail(Errc::IoError, "write failed: " + path);
}

ObfuscationPattern load_pattern(const std::string& path) {
    std::ifstream f(path);
    if (!f) fail(Errc::IoError, "cannot open for read: " + path);
    ObfuscationPattern pat;
    std::string header;
    if (!std::getline(f, header)) fail(Errc::ParseError, "empty pattern file");
    {
        std::istringstream hs(header);
        std::string tag, ver, kp, ks, kr;
        hs >> tag >> ver >> kp >> pat.prob >> ks >> pat.seed >> kr >> pat.generation_retries;
        if (tag != "pattern" || ver != "v1") fail(Errc::ParseError, "bad pattern header");
    }
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        ObfuscationRecord r;
        if (kind == "layer") {
            r.kind = RecordKind::DummyLayer;
            ls >> r.element;
        } else if (kind == "neurons") {
            r.kind = RecordKind::DummyNeurons;
            ls >> r.element >> r.count;
        } else if (kind == "nops") {
            r.kind = RecordKind::Nops;
            ls >> r.code_offset >> r.count;
        } else {
            fail(Errc::ParseError, "bad pattern record: " + line);
        }
        if (!ls) fail(Errc::ParseError, "bad pattern record: " + line);
        pat.records.push_back(r);
    }
    return pat;
}

} // namespace flipguard
