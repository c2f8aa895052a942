#include "flipguard/dataset.hpp"

#include <cmath>

#include "flipguard/error.hpp"
#include "flipguard/rng.hpp"

namespace flipguard {

Dataset generate_dataset(uint64_t seed, int n_per_class, int n_classes, int dim) {
    if (n_classes < 2) fail(Errc::ConfigError, "generate_dataset: n_classes must be >= 2");
    if (dim < 2) fail(Errc::ConfigError, "generate_dataset: dim must be >= 2");
    if (n_per_class < 1) fail(Errc::ConfigError, "generate_dataset: n_per_class must be >= 1");

    Dataset ds;
    ds.n_classes = n_classes;
    ds.dim = dim;
    ds.seed = seed;

    // Fixed unit-norm class centers, one stream per class.
    std::vector<std::vector<double>> centers(static_cast<size_t>(n_classes));
    for (int c = 0; c < n_classes; ++c) {
        SplitMix64 rng(derive_seed(seed, 0x1000 + static_cast<uint64_t>(c)));
        auto& mu = centers[static_cast<size_t>(c)];
        mu.resize(static_cast<size_t>(dim));
        double norm2 = 0.0;
        for (auto& v : mu) {
            v = rng.next_gaussian();
            norm2 += v * v;
        }
        double inv = 1.0 / std::sqrt(norm2);
        for (auto& v : mu) v *= inv;
    }

    constexpr double kSigma = 0.35;
    SplitMix64 noise(derive_seed(seed, 0x2000));
    ds.samples.reserve(static_cast<size_t>(n_classes) * static_cast<size_t>(n_per_class));
    for (int c = 0; c < n_classes; ++c) {
        for (int i = 0; i < n_per_class; ++i) {
            Dataset::Sample s;
            s.label = c;
            s.x.resize(static_cast<size_t>(dim));
            for (int d = 0; d < dim; ++d) {
                s.x[static_cast<size_t>(d)] = static_cast<float>(
                    centers[static_cast<size_t>(c)][static_cast<size_t>(d)] +
                    kSigma * noise.next_gaussian());
            }
            ds.samples.push_back(std::move(s));
        }
    }

    // Per-class seeded shuffle of sample positions, then every 5th -> eval.
    for (int c = 0; c < n_classes; ++c) {
        std::vector<size_t> idx(static_cast<size_t>(n_per_class));
        for (int i = 0; i < n_per_class; ++i)
            idx[static_cast<size_t>(i)] = static_cast<size_t>(c * n_per_class + i);
        SplitMix64 rng(derive_seed(seed, 0x3000 + static_cast<uint64_t>(c)));
        for (size_t i = idx.size(); i > 1; --i) {
            size_t j = rng.next_below(i);
            std::swap(idx[i - 1], idx[j]);
        }
        for (size_t i = 0; i < idx.size(); ++i) {
            if (i % 5 == 4)
                ds.eval_index.push_back(idx[i]);
            else
                ds.train_index.push_back(idx[i]);
        }
    }
    return ds;
}

std::vector<const Dataset::Sample*> eval_samples(const Dataset& ds) {
    std::vector<const Dataset::Sample*> out;
    out.reserve(ds.eval_index.size());
    for (size_t i : ds.eval_index) out.push_back(&ds.samples[i]);
    return out;
}

std::vector<const Dataset::Sample*> train_samples(const Dataset& ds) {
    std::vector<const Dataset::Sample*> out;
    out.reserve(ds.train_index.size());
    for (size_t i : ds.train_index) out.push_back(&ds.samples[i]);
    return out;
}

} // namespace flipguard
