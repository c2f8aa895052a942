#pragma once

#include <string>
#include <vector>

#include "flipguard/memory_image.hpp"

namespace flipguard {

enum class VulnKind : uint8_t { Weight = 0, CodeJump = 1 };

struct VulnEntry {
    BitAddress address; // weights: the MSB bit; code: bit 0 of the opcode byte
    VulnKind kind = VulnKind::Weight;
    float score = 0.0f; // |gradient| or accuracy drop

    // Weight provenance
    WeightCoord coord;
    BitAddress all_bits[8]; // every bit of the housing byte, [7] = MSB

    // CodeJump provenance
    uint32_t opcode_offset = 0;
    bool near = false;
};

struct SweepStats {
    int visited = 0, benign = 0, drop = 0, crash = 0, timeout = 0;
};

struct VulnerabilityList {
    std::vector<VulnEntry> entries; // sorted by descending score, unique addresses
    float baseline_accuracy = 0.0f;
    SweepStats stats; // populated by code sweeps

    std::vector<BitAddress> addresses() const;
};

// Top-k weights by |gradient| over the eval split (native evaluation).
// Each entry's listed address is the weight's MSB; all 8 bit addresses are
// retained in provenance. Ties break by ascending coordinate.
VulnerabilityList rank_vulnerable_weights(const MemoryImage& img, const Dataset& ds, int k);

// Exhaustive conditional-jump inversion sweep over the CODE section: flip
// bit 0 of each jcc opcode byte, run VM-backed inference, classify, restore.
// Crash/Timeout sites are counted but excluded from the critical list. The
// image is restored bit-exactly (hash-verified) before returning.
VulnerabilityList search_code_vulnerabilities(const MemoryImage& img, const Dataset& ds,
                                              float drop_tolerance = 0.05f,
                                              uint64_t step_budget = kDefaultStepBudget);

// Structured text round-trip (one entry per line, order-preserving).
void save_vuln_list(const VulnerabilityList& v, const std::string& path);
VulnerabilityList load_vuln_list(const std::string& path);

} // namespace flipguard
