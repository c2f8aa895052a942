#pragma once

// Test-side oracles and fixtures. These deliberately re-derive results with
// independent arithmetic (triple-loop matmuls, brute-force sorts, central
// finite differences) rather than calling back into the code under test.

#include <cmath>
#include <cstdint>
#include <vector>

#include "flipguard/engine.hpp"
#include "flipguard/rng.hpp"

namespace testutil {

using namespace flipguard;

// Plain triple-loop int32 matmul: C(MxN) = A(MxK) * B(KxN), with the same
// saturation window the VM kernel applies.
inline void matmul_oracle(int m, int n, int k, const int32_t* a, const int32_t* b, int32_t* c,
                          int32_t hi, int32_t lo) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            int64_t acc = 0;
            for (int t = 0; t < k; ++t) {
                acc += static_cast<int64_t>(a[i * k + t]) * b[t * n + j];
                if (acc > hi) acc = hi;
                if (acc < lo) acc = lo;
            }
            c[i * n + j] = static_cast<int32_t>(acc);
        }
}

// Independent re-implementation of the integer inference pipeline for Linear
// networks, capturing every layer's int32 accumulator vector and int8
// activation vector.
struct IntTrace {
    std::vector<std::vector<int32_t>> acc;  // per layer, post-bias
    std::vector<std::vector<int32_t>> act;  // per layer, post-requant (int8 range)
    std::vector<float> logits;
};

inline IntTrace int_forward_oracle(const Network& net, const std::vector<float>& x) {
    IntTrace tr;
    std::vector<int32_t> cur(x.size());
    float scale_in = net.layers.front().scale_in;
    for (size_t i = 0; i < x.size(); ++i) {
        long q = std::lrintf(x[i] / scale_in);
        cur[i] = static_cast<int32_t>(q < -127 ? -127 : (q > 127 ? 127 : q));
    }
    for (size_t li = 0; li < net.layers.size(); ++li) {
        const QuantLayer& l = net.layers[li];
        std::vector<int32_t> acc(static_cast<size_t>(l.out));
        for (int o = 0; o < l.out; ++o) {
            int64_t s = 0;
            for (int i = 0; i < l.in; ++i)
                s += static_cast<int64_t>(l.w[static_cast<size_t>(o) * l.in + i]) * cur[static_cast<size_t>(i)];
            acc[static_cast<size_t>(o)] = static_cast<int32_t>(s) + l.b[static_cast<size_t>(o)];
        }
        tr.acc.push_back(acc);
        if (li + 1 == net.layers.size()) {
            float s = l.scale_w * l.scale_in;
            tr.logits.resize(acc.size());
            for (size_t i = 0; i < acc.size(); ++i)
                tr.logits[i] = static_cast<float>(acc[i]) * s;
            tr.act.push_back(acc);
        } else {
            float mult = l.scale_w * l.scale_in / l.scale_out;
            std::vector<int32_t> nxt(acc.size());
            for (size_t i = 0; i < acc.size(); ++i) {
                long q = std::lrintf(static_cast<float>(acc[i]) * mult);
                int32_t v = static_cast<int32_t>(q < -127 ? -127 : (q > 127 ? 127 : q));
                if (l.act == Activation::ReLU && v < 0) v = 0;
                nxt[i] = v;
            }
            tr.act.push_back(nxt);
            cur = nxt;
        }
    }
    return tr;
}

// Small trained-and-quantized fixture shared across tests.
struct Fixture {
    Dataset ds;
    FloatNetwork fnet;
    Network net;
};

inline Fixture small_fixture(uint64_t seed = 7, std::vector<int> spec = {16, 32, 4},
                             int n_per_class = 40, int epochs = 30) {
    Fixture f{generate_dataset(seed, n_per_class, spec.back(), spec.front()), {}, {}};
    f.fnet = train(spec, f.ds, epochs, 0.05f, seed);
    f.net = quantize(f.fnet, train_samples(f.ds));
    return f;
}

} // namespace testutil
