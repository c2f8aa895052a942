#include "flipguard/vuln_search.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <tuple>

#include "flipguard/error.hpp"
#include "flipguard/vm_backend.hpp"

namespace flipguard {

std::vector<BitAddress> VulnerabilityList::addresses() const {
    std::vector<BitAddress> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.address);
    return out;
}

VulnerabilityList rank_vulnerable_weights(const MemoryImage& img, const Dataset& ds, int k) {
    if (k < 0) fail(Errc::ConfigError, "k must be >= 0");
    Network net = materialize_network(img);
    VulnerabilityList out;
    EvalReport base = evaluate(net, ds);
    out.baseline_accuracy = base.accuracy.value_or(0.0f);
    if (k == 0) return out;

    GradientMap g = compute_gradients(net, eval_samples(ds));
    CoordMap m = coord_map(img);

    struct Cand {
        float score;
        int layer, row, col;
    };
    std::vector<Cand> cands;
    for (size_t li = 0; li < g.weight_grads.size(); ++li) {
        int cols = m.layer_cols[li];
        const auto& wg = g.weight_grads[li];
        for (size_t i = 0; i < wg.size(); ++i)
            cands.push_back({std::fabs(wg[i]), static_cast<int>(li),
                             static_cast<int>(i) / cols, static_cast<int>(i) % cols});
    }
    auto better = [](const Cand& a, const Cand& b) {
        if (a.score != b.score) return a.score > b.score;
        return std::tie(a.layer, a.row, a.col) < std::tie(b.layer, b.row, b.col);
    };
    size_t kk = std::min<size_t>(static_cast<size_t>(k), cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<long>(kk), cands.end(), better);
    cands.resize(kk);

    for (const auto& c : cands) {
        VulnEntry e;
        e.kind = VulnKind::Weight;
        e.score = c.score;
        e.coord = {c.layer, c.row, c.col};
        WeightLocation loc = locate_weight(img, c.layer, c.row, c.col);
        for (int b = 0; b < 8; ++b) e.all_bits[b] = loc.bits[b];
        e.address = loc.bits[7]; // MSB: sign bit of the int8 weight
        out.entries.push_back(e);
    }
    return out;
}

VulnerabilityList search_code_vulnerabilities(const MemoryImage& img, const Dataset& ds,
                                              float drop_tolerance, uint64_t step_budget) {
    if (drop_tolerance <= 0.0f) fail(Errc::ConfigError, "drop_tolerance must be > 0");
    uint64_t pre_hash = img.payload_hash();
    const Section& code = img.section("CODE");
    std::vector<uint8_t> code_bytes(img.payload.begin() + static_cast<long>(code.offset),
                                    img.payload.begin() +
                                        static_cast<long>(code.offset + code.length));
    std::vector<CondJumpSite> sites = find_cond_jumps(code_bytes);

    VulnerabilityList out;
    EvalReport base = run_inference_with_vm(img, ds, step_budget);
    if (base.outcome != Outcome::Ok)
        fail(Errc::ImageCorrupt, "baseline VM inference did not complete");
    out.baseline_accuracy = *base.accuracy;
    out.stats.visited = static_cast<int>(sites.size());

    struct Trial {
        Outcome outcome;
        float accuracy;
    };
    std::vector<Trial> trials(sites.size());
    bool restore_failed = false;

#ifdef FLIPGUARD_OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (long si = 0; si < static_cast<long>(sites.size()); ++si) {
        const auto& s = sites[static_cast<size_t>(si)];
        MemoryImage clone = img; // each trial owns its mutation
        BitAddress a{code.offset + s.opcode_offset, 0};
        flip_bit(clone, a);
        EvalReport rep = run_inference_with_vm(clone, ds, step_budget);
        flip_bit(clone, a); // restore ("recover(Op)")
        if (clone.payload_hash() != pre_hash) restore_failed = true;
        trials[static_cast<size_t>(si)] = {rep.outcome, rep.accuracy.value_or(0.0f)};
    }
    if (restore_failed) fail(Errc::ImageCorrupt, "restore verification failed");

    for (size_t si = 0; si < sites.size(); ++si) {
        const auto& t = trials[si];
        if (t.outcome == Outcome::Crash) {
            out.stats.crash++;
        } else if (t.outcome == Outcome::Timeout) {
            out.stats.timeout++;
        } else if (t.accuracy < out.baseline_accuracy - drop_tolerance) {
            out.stats.drop++;
            VulnEntry e;
            e.kind = VulnKind::CodeJump;
            e.score = out.baseline_accuracy - t.accuracy;
            e.opcode_offset = sites[si].opcode_offset;
            e.near = sites[si].near;
            e.address = {code.offset + sites[si].opcode_offset, 0};
            out.entries.push_back(e);
        } else {
            out.stats.benign++;
        }
    }
    std::stable_sort(out.entries.begin(), out.entries.end(),
                     [](const VulnEntry& a, const VulnEntry& b) { return a.score > b.score; });
    return out;
}

void save_vuln_list(const VulnerabilityList& v, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) fail(Errc::IoError, "cannot open for write: " + path);
    f << "vulnlist v1 baseline " << v.baseline_accuracy << " stats " << v.stats.visited << " "
      << v.stats.benign << " " << v.stats.drop << " " << v.stats.crash << " " << v.stats.timeout
      << "\n";
    for (const auto& e : v.entries) {
        f << e.address.byte_offset << " " << int(e.address.bit_index) << " ";
        if (e.kind == VulnKind::Weight)
            f << "weight " << e.coord.layer << " " << e.coord.row << " " << e.coord.col;
        else
            f << "code " << e.opcode_offset << " " << (e.near ? "near" : "short");
        f << " " << e.score << "\n";
    }
    if (!f) fail(Errc::IoError, "write failed: " + path);
}

VulnerabilityList load_vuln_list(const std::string& path) {
    std::ifstream f(path);
    if (!f) fail(Errc::IoError, "cannot open for read: " + path);
    VulnerabilityList v;
    std::string header;
    if (!std::getline(f, header)) fail(Errc::ParseError, "empty vulnerability list");
    {
        std::istringstream hs(header);
        std::string tag, ver, kw, kw2;
        hs >> tag >> ver >> kw >> v.baseline_accuracy >> kw2 >> v.stats.visited >>
            v.stats.benign >> v.stats.drop >> v.stats.crash >> v.stats.timeout;
        if (tag != "vulnlist" || ver != "v1") fail(Errc::ParseError, "bad vulnerability list header");
    }
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        VulnEntry e;
        uint64_t byte;
        int bit;
        std::string kind;
        ls >> byte >> bit >> kind;
        e.address = {byte, static_cast<uint8_t>(bit)};
        if (kind == "weight") {
            e.kind = VulnKind::Weight;
            ls >> e.coord.layer >> e.coord.row >> e.coord.col >> e.score;
            for (int b = 0; b < 8; ++b) e.all_bits[b] = {byte, static_cast<uint8_t>(b)};
        } else if (kind == "code") {
            e.kind = VulnKind::CodeJump;
            std::string form;
            ls >> e.opcode_offset >> form >> e.score;
            e.near = form == "near";
        } else {
            fail(Errc::ParseError, "bad vulnerability entry: " + line);
        }
        if (!ls) fail(Errc::ParseError, "bad vulnerability entry: " + line);
        v.entries.push_back(e);
    }
    return v;
}

} // namespace flipguard
