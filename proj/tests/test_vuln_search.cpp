#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <tuple>

#include "flipguard/error.hpp"
#include "flipguard/vm.hpp"
#include "flipguard/vm_backend.hpp"
#include "flipguard/vuln_search.hpp"
#include "helpers.hpp"

using namespace flipguard;
using namespace testutil;

TEST_CASE("weight ranking equals brute-force sort for every k (net < 2000 weights)") {
    Fixture f = small_fixture(7, {16, 8, 4}, 20, 8); // 160 weights
    MemoryImage img = build_image(f.net, assemble(kGemmKernelSource));
    size_t total = f.net.total_weights();
    REQUIRE(total < 2000);

    // brute-force oracle: |grad| of every weight, full sort with the same
    // deterministic tie-break (score desc, then coordinate asc)
    GradientMap g = compute_gradients(f.net, eval_samples(f.ds));
    struct Row {
        float score;
        int layer, row, col;
    };
    std::vector<Row> all;
    for (size_t li = 0; li < g.weight_grads.size(); ++li) {
        int cols = f.net.layers[li].in;
        for (size_t i = 0; i < g.weight_grads[li].size(); ++i)
            all.push_back({std::abs(g.weight_grads[li][i]), static_cast<int>(li),
                           static_cast<int>(i) / cols, static_cast<int>(i) % cols});
    }
    std::sort(all.begin(), all.end(), [](const Row& a, const Row& b) {
        if (a.score != b.score) return a.score > b.score;
        return std::tie(a.layer, a.row, a.col) < std::tie(b.layer, b.row, b.col);
    });

    for (int k : {0, 1, 2, 5, 17, 100, static_cast<int>(total), static_cast<int>(total) + 50}) {
        VulnerabilityList v = rank_vulnerable_weights(img, f.ds, k);
        size_t expect = std::min<size_t>(static_cast<size_t>(k), total);
        REQUIRE(v.entries.size() == expect);
        for (size_t i = 0; i < expect; ++i) {
            CHECK(v.entries[i].coord.layer == all[i].layer);
            CHECK(v.entries[i].coord.row == all[i].row);
            CHECK(v.entries[i].coord.col == all[i].col);
            CHECK(v.entries[i].score == doctest::Approx(all[i].score));
            // address is the MSB of that weight's byte
            WeightLocation loc =
                locate_weight(img, all[i].layer, all[i].row, all[i].col);
            CHECK(v.entries[i].address == loc.bits[7]);
            CHECK(v.entries[i].kind == VulnKind::Weight);
        }
    }
}

TEST_CASE("code sweep: classification, restore correctness, benign minority") {
    Fixture f = small_fixture();
    MemoryImage img = build_image(f.net, assemble(kGemmKernelSource));
    uint64_t pre_hash = img.payload_hash();

    VulnerabilityList v = search_code_vulnerabilities(img, f.ds, 0.05f, kDefaultStepBudget);

    CHECK(img.payload_hash() == pre_hash); // flip-measure-restore left no trace
    CHECK(v.stats.visited == 9);           // one probe per conditional jump
    CHECK(v.stats.benign + v.stats.drop + v.stats.crash + v.stats.timeout == v.stats.visited);
    CHECK(v.stats.crash >= 1);
    CHECK(v.stats.drop >= 1);
    // fewer than half of the jcc flips silently degrade accuracy
    CHECK(v.stats.drop * 2 < v.stats.visited);
    // entries are the AccuracyDrop bits only (crash/timeout excluded), sorted
    REQUIRE(v.entries.size() == static_cast<size_t>(v.stats.drop));
    for (size_t i = 0; i + 1 < v.entries.size(); ++i)
        CHECK(v.entries[i].score >= v.entries[i + 1].score);
    const Section& code = img.section("CODE");
    for (const auto& e : v.entries) {
        CHECK(e.kind == VulnKind::CodeJump);
        CHECK(e.address.bit_index == 0); // condition inversion = bit 0 of the opcode
        CHECK(e.address.byte_offset >= code.offset);
        CHECK(e.address.byte_offset < code.offset + code.length);
        // flipping a listed bit really drops accuracy below tolerance
        MemoryImage probe = img;
        flip_bit(probe, e.address);
        EvalReport rep = run_inference_with_vm(probe, f.ds, kDefaultStepBudget);
        REQUIRE(rep.outcome == Outcome::Ok);
        CHECK(rep.accuracy.value() < v.baseline_accuracy - 0.05f);
    }
}

TEST_CASE("sweep scores reflect the measured accuracy drop") {
    Fixture f = small_fixture();
    MemoryImage img = build_image(f.net, assemble(kGemmKernelSource));
    VulnerabilityList v = search_code_vulnerabilities(img, f.ds, 0.05f, kDefaultStepBudget);
    for (const auto& e : v.entries) {
        MemoryImage probe = img;
        flip_bit(probe, e.address);
        EvalReport rep = run_inference_with_vm(probe, f.ds, kDefaultStepBudget);
        CHECK(e.score == doctest::Approx(v.baseline_accuracy - rep.accuracy.value()));
    }
}

TEST_CASE("corrupt baseline image is rejected") {
    Fixture f = small_fixture(7, {16, 8, 4}, 20, 8);
    MemoryImage img = build_image(f.net, assemble(kGemmKernelSource));
    // wreck the kernel entry: baseline run cannot complete
    const Section& code = img.section("CODE");
    img.payload[code.offset] ^= 0x01;
    CHECK_THROWS_AS((void)search_code_vulnerabilities(img, f.ds, 0.05f, kDefaultStepBudget),
                    Error);
}

TEST_CASE("vulnerability list round-trips through its text format") {
    Fixture f = small_fixture(7, {16, 8, 4}, 20, 8);
    MemoryImage img = build_image(f.net, assemble(kGemmKernelSource));
    VulnerabilityList w = rank_vulnerable_weights(img, f.ds, 25);
    VulnerabilityList c = search_code_vulnerabilities(img, f.ds, 0.05f, kDefaultStepBudget);
    // merge both kinds into one file
    VulnerabilityList merged = w;
    merged.stats = c.stats;
    merged.entries.insert(merged.entries.end(), c.entries.begin(), c.entries.end());

    const char* path = "test_vs_list.txt";
    save_vuln_list(merged, path);
    VulnerabilityList r = load_vuln_list(path);
    CHECK(r.baseline_accuracy == merged.baseline_accuracy);
    CHECK(r.stats.visited == merged.stats.visited);
    CHECK(r.stats.drop == merged.stats.drop);
    REQUIRE(r.entries.size() == merged.entries.size());
    for (size_t i = 0; i < r.entries.size(); ++i) {
        CHECK(r.entries[i].kind == merged.entries[i].kind);
        CHECK(r.entries[i].address == merged.entries[i].address);
        CHECK(r.entries[i].score == doctest::Approx(merged.entries[i].score));
        if (r.entries[i].kind == VulnKind::Weight) {
            CHECK(r.entries[i].coord.layer == merged.entries[i].coord.layer);
            CHECK(r.entries[i].coord.row == merged.entries[i].coord.row);
            CHECK(r.entries[i].coord.col == merged.entries[i].coord.col);
        }
    }
    std::remove(path);
}
