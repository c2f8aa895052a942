#pragma once

#include <string>
#include <vector>

#include "flipguard/memory_image.hpp"

namespace flipguard {

enum class AttackMode : uint8_t { Untargeted = 0, Targeted = 1 };

struct AttackRecord {
    std::vector<BitAddress> flips; // committed, in order; clean-image addresses
    AttackMode mode = AttackMode::Untargeted;
    int source = -1, target = -1; // Targeted only
    int budget = 0;
    float achieved = 0.0f; // post-attack accuracy (untargeted) or ASR (targeted)
    uint64_t seed = 0;
};

struct AdaptiveRangeSpec {
    int x1 = 5, x2 = 0, al = 16; // code level, Eq.-style [addr-x1+x2*al, addr+x1+x2*al]
    int x = 3;                   // model level, [addr-x, addr+x]
};

enum class AttackLevel : uint8_t { Code = 0, Model = 1 };

// Progressive gradient-guided greedy: per round, rank every uncommitted
// parameter MSB (int8 weights and int32 biases) by its first-order loss
// impact |g|*|value step of the flip|, tentatively flip each of the top 16,
// commit the one that maximizes attack-batch loss; stop at budget or
// accuracy <= stop_acc.
AttackRecord untargeted_bfa(const MemoryImage& img, const Dataset& ds, int budget, float stop_acc,
                            uint64_t seed);

// Greedy over the final layer's (weight, bit) and (bias word, bit)
// candidates with incremental logit updates; objective = source->target
// misclassification rate minus the accuracy drop on all other samples
// (lambda = 1).
AttackRecord targeted_bfa(const MemoryImage& img, const Dataset& ds, int source, int target,
                          int budget, uint64_t seed);

struct ReplayOptions {
    bool use_vm = false; // evaluate through the image's CODE kernel
    int source = -1, target = -1; // compute ASR when both >= 0
    uint64_t step_budget = kDefaultStepBudget;
};

// Applies every in-range flip to a clone and evaluates. Out-of-range
// addresses (image shrank, which obfuscation never does) are skipped.
EvalReport replay(const MemoryImage& img, const std::vector<BitAddress>& flips, const Dataset& ds,
                  const ReplayOptions& opt = {});
EvalReport replay(const MemoryImage& img, const AttackRecord& rec, const Dataset& ds,
                  const ReplayOptions& opt = {});

// Range-expansion flip set: every bit of every byte in the window around
// each recorded address, unioned over records, clipped to [0, payload_len).
std::vector<BitAddress> adaptive_flip_set(const AttackRecord& rec, const AdaptiveRangeSpec& spec,
                                          AttackLevel level, uint64_t payload_len);

// Structured text round-trip.
void save_attack_record(const AttackRecord& rec, const std::string& path);
AttackRecord load_attack_record(const std::string& path);

} // namespace flipguard
