#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "flipguard/dataset.hpp"

namespace flipguard {

enum class LayerKind : uint8_t { Linear = 0, Conv2D = 1 };
enum class Activation : uint8_t { None = 0, ReLU = 1 };
enum class Backend : uint8_t { Native = 0, VmKernel = 1 };
enum class Outcome : uint8_t { Ok = 0, Crash = 1, Timeout = 2 };

// Activation tensor shape for conv layers, flattened channel-major.
struct Shape3 {
    int c = 0, h = 0, w = 0;
    int count() const { return c * h * w; }
};

// ---------------------------------------------------------------------------
// fp32 network (training side)
// ---------------------------------------------------------------------------

struct FloatLayer {
    LayerKind kind = LayerKind::Linear;
    Activation act = Activation::None;
    // Linear: weights out x in, row-major.
    int in = 0, out = 0;
    // Conv2D: weights filters x channels x kh x kw; `in`/`out` hold the
    // flattened input/output element counts.
    int filters = 0, channels = 0, kh = 0, kw = 0;
    Shape3 in_shape;
    std::vector<float> w;
    std::vector<float> b;

    size_t weight_count() const { return w.size(); }
};

struct FloatNetwork {
    std::vector<FloatLayer> layers;
    int input_dim = 0;
    int n_classes = 0;

    std::vector<float> forward(const std::vector<float>& x) const;
};

// Per-layer dL/dW matrices, shape-congruent with the network's weights.
struct GradientMap {
    std::vector<std::vector<float>> weight_grads;
    std::vector<std::vector<float>> bias_grads;
};

// ---------------------------------------------------------------------------
// int8 quantized network (deployment side)
// ---------------------------------------------------------------------------

struct QuantLayer {
    LayerKind kind = LayerKind::Linear;
    Activation act = Activation::None;
    Backend backend = Backend::Native;
    int in = 0, out = 0;
    int filters = 0, channels = 0, kh = 0, kw = 0;
    Shape3 in_shape;
    std::vector<int8_t> w;
    std::vector<int32_t> b;
    float scale_w = 1.0f;   // dequantized weight = int8 * scale_w
    float scale_in = 1.0f;  // input activation quantization step
    float scale_out = 1.0f; // output activation step (next layer's scale_in)

    size_t weight_count() const { return w.size(); }
};

struct Network {
    std::vector<QuantLayer> layers;
    int input_dim = 0;
    int n_classes = 0;

    size_t total_weights() const;
};

struct EvalReport {
    Outcome outcome = Outcome::Ok;
    std::optional<float> accuracy; // absent on Crash/Timeout
    std::vector<float> per_class_accuracy;
    size_t n_samples = 0;
    uint64_t steps_executed = 0; // VM steps, 0 for pure native runs
    std::optional<float> asr;
};

struct ForwardResult {
    Outcome outcome = Outcome::Ok;
    std::vector<float> logits;
    uint64_t steps = 0;
};

// Executes an integer matmul C(MxN) = A(MxK) x B(KxN) for a VM-backed layer.
// Returns Ok/Crash/Timeout plus the step count consumed.
struct KernelExec {
    virtual ~KernelExec() = default;
    virtual Outcome matmul(int m, int n, int k, const int32_t* a, const int32_t* b,
                           int32_t* c, uint64_t& steps) = 0;
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

// Plain SGD on mean cross-entropy; deterministic given all inputs.
// `spec` lists layer widths including input and output, e.g. {16,256,256,4}.
FloatNetwork train(const std::vector<int>& spec, const Dataset& ds, int epochs, float lr,
                   uint64_t seed);

// Seeded He-style initialization (the epochs=0 network).
FloatNetwork init_network(const std::vector<int>& spec, uint64_t seed);

// Symmetric per-layer int8 quantization: scale_w = max|w|/127. Activation
// scales are calibrated from the fp32 activations over `calib` inputs.
Network quantize(const FloatNetwork& net, const std::vector<const Dataset::Sample*>& calib);

// fp32 view of a quantized network: w = q*scale_w, b = q*scale_w*scale_in.
FloatNetwork dequantize_view(const Network& net);

// Integer-path forward: activations are quantized to int8 per layer, matmuls
// accumulate in int32, hidden outputs are requantized (round, clamp to
// [-127,127]) and the last layer emits dequantized fp32 logits. VM-backed
// layers delegate their matmul to `exec` when given, otherwise they run the
// same arithmetic natively (bit-identical by construction).
ForwardResult forward(const Network& net, const std::vector<float>& x, KernelExec* exec = nullptr);

// Argmax accuracy over the dataset's eval split; ties break to the lower
// class index.
EvalReport evaluate(const Network& net, const Dataset& ds, KernelExec* exec = nullptr);
EvalReport evaluate_samples(const Network& net, const std::vector<const Dataset::Sample*>& samples,
                            KernelExec* exec = nullptr);
EvalReport evaluate_float(const FloatNetwork& net, const Dataset& ds);

// Mean cross-entropy of the integer-path logits over `samples`.
double batch_loss(const Network& net, const std::vector<const Dataset::Sample*>& samples);

// Backprop of mean cross-entropy through the fp32 network (or the dequantized
// view of a quantized network).
GradientMap compute_gradients(const FloatNetwork& net,
                              const std::vector<const Dataset::Sample*>& batch);
GradientMap compute_gradients(const Network& net,
                              const std::vector<const Dataset::Sample*>& batch);

// Model file ("BANN", little-endian).
void save_network(const Network& net, const std::string& path);
Network load_network(const std::string& path);

} // namespace flipguard
