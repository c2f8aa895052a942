#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace flipguard {

// Synthetic Gaussian-blob classification data. Regenerated from its seed on
// demand; never persisted.
struct Dataset {
    struct Sample {
        std::vector<float> x;
        int label = 0;
    };

    std::vector<Sample> samples;      // full set, generation order
    std::vector<size_t> train_index;  // 80% per class
    std::vector<size_t> eval_index;   // 20% per class, exactly balanced
    int n_classes = 0;
    int dim = 0;
    uint64_t seed = 0;

    size_t size() const { return samples.size(); }
};

// Class c is centered on a fixed unit-norm direction derived from (seed, c),
// with isotropic Gaussian noise sigma = 0.35. The train/eval split assigns
// every 5th sample of each class (in seeded-shuffled per-class order) to the
// eval side, so the eval split is exactly class-balanced.
Dataset generate_dataset(uint64_t seed, int n_per_class, int n_classes, int dim);

// View helpers: materialize a slice as sample pointers.
std::vector<const Dataset::Sample*> eval_samples(const Dataset& ds);
std::vector<const Dataset::Sample*> train_samples(const Dataset& ds);

} // namespace flipguard
