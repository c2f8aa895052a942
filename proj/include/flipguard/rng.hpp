#pragma once

#include <cmath>
#include <cstdint>

namespace flipguard {

// splitmix64: the single PRNG used for every seeded decision in the toolkit.
// All derived streams are splitmix64 chains seeded from a parent value, so a
// run is reproducible from one top-level seed.
class SplitMix64 {
public:
    explicit SplitMix64(uint64_t seed) : state_(seed) {}

    uint64_t next() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, n). Modulo bias is negligible for the small n used here
    // and keeps the stream consumption rate fixed at one draw per call.
    uint64_t next_below(uint64_t n) { return next() % n; }

    // Uniform integer in [lo, hi] inclusive.
    int64_t next_range(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(next_below(static_cast<uint64_t>(hi - lo + 1)));
    }

    // Uniform in [0, 1).
    double next_double() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; deterministic given the stream.
    double next_gaussian() {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    uint64_t state_;
};

// Derives an independent child seed from (seed, tag). Used to split one
// experiment seed into per-stage streams.
inline uint64_t derive_seed(uint64_t seed, uint64_t tag) {
    SplitMix64 rng(seed ^ (0xA5A5A5A55A5A5A5AULL + tag * 0x9E3779B97F4A7C15ULL));
    return rng.next();
}

} // namespace flipguard
