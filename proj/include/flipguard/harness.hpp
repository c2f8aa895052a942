#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "flipguard/attack.hpp"
#include "flipguard/dataset.hpp"
#include "flipguard/engine.hpp"
#include "flipguard/memory_image.hpp"
#include "flipguard/obfuscate.hpp"
#include "flipguard/vuln_search.hpp"

namespace flipguard {

// Which half of the pipeline an experiment exercises. Model defense inserts
// dummy layers/neurons and evaluates natively; code defense splices NOPs and
// evaluates through the VM; Both runs the two pipelines independently.
enum class DefenseLevel : uint8_t { Model = 0, Code = 1, Both = 2 };

struct ExperimentConfig {
    uint64_t seed = 7;

    // Dataset.
    int n_per_class = 250;
    int n_classes = 4;
    int dim = 16;

    // Network (layer widths, input first).
    std::vector<int> layer_spec = {16, 256, 256, 4};
    int epochs = 30;
    float lr = 0.05f;

    // Search.
    int rank_k = 100;
    float drop_tolerance = 0.05f;
    uint64_t step_budget = kDefaultStepBudget;

    // Obfuscation.
    float prob = 0.3f;
    int max_retries = 32;
    bool prefer_neurons = true;
    NopPlacement placement = NopPlacement::Cold;

    // Attacks.
    int untargeted_budget = 20;
    float untargeted_stop_acc = 0.35f;
    int targeted_source = 0;
    int targeted_target = 1;
    int targeted_budget = 8;

    // Adaptive grid.
    std::vector<int> adaptive_x1 = {5, 10, 15, 20, 25, 30, 35, 40, 45};
    std::vector<int> adaptive_x2 = {0, 1, 2};
    int adaptive_al = 16;
    std::vector<int> adaptive_x = {3, 5, 7, 9, 11};

    int trials = 20;
    DefenseLevel level = DefenseLevel::Both;

    // Overhead curve sweep.
    std::vector<float> curve_probs = {0.1f, 0.3f, 0.5f, 0.7f, 0.9f};
};

ExperimentConfig load_config(const std::string& path);
ExperimentConfig parse_config(const std::string& json_text);
std::string config_to_json(const ExperimentConfig& cfg);

// One replayed attack on one image variant.
struct ReportRow {
    std::string phase;   // e.g. "untargeted", "targeted", "adaptive-code"
    std::string variant; // "clean" or "defended"
    int trial = 0;
    int x1 = -1, x2 = -1, x = -1; // adaptive grid point, -1 when n/a
    int flips = 0;
    Outcome outcome = Outcome::Ok;
    float accuracy = 0.0f;
    float asr = -1.0f; // -1 when n/a
};

struct OverheadStats {
    double storage_clean = 0.0, storage_defended = 0.0; // WEIGHTS bytes
    double steps_clean = 0.0, steps_defended = 0.0;     // VM steps / sample
    double memory_clean = 0.0, memory_defended = 0.0;   // image payload bytes
    double wall_ms_clean = 0.0, wall_ms_defended = 0.0; // native eval time
    double storage_pct() const {
        return storage_clean > 0 ? 100.0 * (storage_defended - storage_clean) / storage_clean : 0;
    }
    double steps_pct() const {
        return steps_clean > 0 ? 100.0 * (steps_defended - steps_clean) / steps_clean : 0;
    }
    double memory_pct() const {
        return memory_clean > 0 ? 100.0 * (memory_defended - memory_clean) / memory_clean : 0;
    }
};

struct Report {
    ExperimentConfig config;
    float train_accuracy = 0.0f;
    float quantized_accuracy = 0.0f;
    float vm_accuracy = 0.0f;
    std::vector<ReportRow> rows;
    OverheadStats overhead_model;
    OverheadStats overhead_code;
    // prob -> (storage %, steps %) curve points, one per cfg.curve_probs.
    std::vector<std::array<double, 3>> prob_curve;
};

// Full pipeline: data -> train -> quantize -> image -> search -> obfuscate ->
// attack clean vs defended -> replay -> adaptive grid -> overhead.
Report run_experiment(const ExperimentConfig& cfg);

OverheadStats measure_overhead(const MemoryImage& clean, const MemoryImage& defended,
                               const Dataset& ds, bool through_vm, uint64_t step_budget);

// Regenerates the pattern every `interval` inferences across `total`
// requests; returns the payload hash of each rotation epoch's image (all
// distinct, all utility-verified).
std::vector<uint64_t> rotate_defenses(const MemoryImage& img, const Dataset& ds,
                                      const VulnerabilityList& vuln,
                                      const ExperimentConfig& cfg, int total, int interval);

// Writes <stem>.jsonl (one JSON object per row plus a summary object) and
// <stem>.csv (same rows, flat columns).
void emit_report(const Report& rep, const std::string& stem);

} // namespace flipguard
