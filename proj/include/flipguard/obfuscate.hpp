#pragma once

#include <string>
#include <vector>

#include "flipguard/memory_image.hpp"
#include "flipguard/vuln_search.hpp"

namespace flipguard {

enum class RecordKind : uint8_t { DummyLayer = 0, DummyNeurons = 1, Nops = 2 };

// One insertion. Model records identify the element (layer index, in
// ORIGINAL coordinates) whose weights the insertion displaces: a dummy layer
// goes in front of that layer, dummy neurons extend the preceding layer
// pair. Code records hold the ORIGINAL byte offset (code-relative) of the
// splice point.
struct ObfuscationRecord {
    RecordKind kind = RecordKind::Nops;
    int element = 0;          // model records: layer index being displaced
    int count = 0;            // DummyNeurons: n; Nops: NOP count
    uint32_t code_offset = 0; // Nops: splice offset within CODE
};

struct ObfuscationPattern {
    std::vector<ObfuscationRecord> records;
    float prob = 0.3f;
    uint64_t seed = 0;
    int generation_retries = 0;
};

enum class NopPlacement : uint8_t {
    Adjacent = 0, // literally before the chosen instruction
    Cold = 1,     // hoisted to the nearest boundary at or below the site
                  // that sits outside every loop body (same displacement
                  // effect on the site, executed once per invocation)
};

struct PatternOptions {
    int max_retries = 32;
    bool prefer_neurons = false; // pick dummy neurons whenever legal
    NopPlacement placement = NopPlacement::Adjacent;
    int rank_k = 100;            // k for the model-level re-search
    float drop_tolerance = 0.05f;
    uint64_t step_budget = kDefaultStepBudget;
};

// Exact identity layer in front of layer `after`+1 (`after` = -1 inserts at
// the network front). Passthrough quantization: forward output bit-identical.
Network insert_dummy_layer(const Network& net, int after);

// n zero rows/filters on layer i, n zero columns/channels on layer i+1.
Network insert_dummy_neurons(const Network& net, int layer, int n);

// Splices `count` NOPs at instruction boundary `at`; displacements re-fixed
// (rel8 auto-promotes to near where needed).
Program insert_nops(const Program& prog, uint32_t at, int count);

// Alg.-style pattern generation: walk elements, always insert at vulnerable
// ones, insert elsewhere with probability `prob`; accept only when the
// re-run searcher's vulnerable addresses are disjoint from the old ones and
// replaying the old addresses causes no silent accuracy drop. Retries with a
// derived seed; RetriesExhausted past options.max_retries.
ObfuscationPattern generate_pattern(const MemoryImage& img, const Dataset& ds,
                                    const VulnerabilityList& vuln, float prob, uint64_t seed,
                                    const PatternOptions& options = {});

// Applies records in descending-location order; utility is exact.
MemoryImage apply_pattern(const MemoryImage& img, const ObfuscationPattern& pat);

// Structured text round-trip.
void save_pattern(const ObfuscationPattern& pat, const std::string& path);
ObfuscationPattern load_pattern(const std::string& path);

} // namespace flipguard
