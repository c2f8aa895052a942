#include "flipguard/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "flipguard/bytes.hpp"
#include "flipguard/error.hpp"
#include "flipguard/rng.hpp"

namespace flipguard {

namespace {

// Shared conv geometry. Output spatial size for stride-1, no-padding conv.
struct ConvDims {
    int oh, ow;
};

ConvDims conv_dims(const Shape3& in, int kh, int kw) { return {in.h - kh + 1, in.w - kw + 1}; }

template <typename W, typename X, typename Acc>
void conv_forward(const W* w, const X* x, Acc* acc, const Shape3& in, int filters, int kh,
                  int kw) {
    ConvDims od = conv_dims(in, kh, kw);
    for (int f = 0; f < filters; ++f) {
        for (int oy = 0; oy < od.oh; ++oy) {
            for (int ox = 0; ox < od.ow; ++ox) {
                Acc s = 0;
                for (int d = 0; d < in.c; ++d) {
                    for (int ky = 0; ky < kh; ++ky) {
                        for (int kx = 0; kx < kw; ++kx) {
                            Acc wv = static_cast<Acc>(w[((f * in.c + d) * kh + ky) * kw + kx]);
                            Acc xv = static_cast<Acc>(
                                x[(d * in.h + oy + ky) * in.w + ox + kx]);
                            s += wv * xv;
                        }
                    }
                }
                acc[(f * od.oh + oy) * od.ow + ox] = s;
            }
        }
    }
}

std::vector<float> layer_forward_float(const FloatLayer& l, const std::vector<float>& x) {
    std::vector<float> out(static_cast<size_t>(l.out), 0.0f);
    if (l.kind == LayerKind::Linear) {
        for (int m = 0; m < l.out; ++m) {
            float s = l.b[static_cast<size_t>(m)];
            const float* row = l.w.data() + static_cast<size_t>(m) * static_cast<size_t>(l.in);
            for (int j = 0; j < l.in; ++j) s += row[j] * x[static_cast<size_t>(j)];
            out[static_cast<size_t>(m)] = s;
        }
    } else {
        conv_forward<float, float, float>(l.w.data(), x.data(), out.data(), l.in_shape,
                                          l.filters, l.kh, l.kw);
        ConvDims od = conv_dims(l.in_shape, l.kh, l.kw);
        for (int f = 0; f < l.filters; ++f)
            for (int p = 0; p < od.oh * od.ow; ++p)
                out[static_cast<size_t>(f * od.oh * od.ow + p)] += l.b[static_cast<size_t>(f)];
    }
    if (l.act == Activation::ReLU)
        for (auto& v : out) v = v > 0.0f ? v : 0.0f;
    return out;
}

// Softmax probabilities, numerically stable, double precision.
std::vector<double> softmax(const std::vector<float>& logits) {
    double mx = logits[0];
    for (float v : logits) mx = std::max(mx, static_cast<double>(v));
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(static_cast<double>(logits[i]) - mx);
        sum += p[i];
    }
    for (auto& v : p) v /= sum;
    return p;
}

int argmax_low_tie(const std::vector<float>& v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i)
        if (v[static_cast<size_t>(i)] > v[static_cast<size_t>(best)]) best = i;
    return best;
}

int8_t quantize_value(float x, float scale) {
    long q = lrintf(x / scale);
    if (q > 127) q = 127;
    if (q < -127) q = -127;
    return static_cast<int8_t>(q);
}

} // namespace

// ---------------------------------------------------------------------------
// FloatNetwork
// ---------------------------------------------------------------------------

std::vector<float> FloatNetwork::forward(const std::vector<float>& x) const {
    std::vector<float> a = x;
    for (const auto& l : layers) a = layer_forward_float(l, a);
    return a;
}

size_t Network::total_weights() const {
    size_t n = 0;
    for (const auto& l : layers) n += l.w.size();
    return n;
}

FloatNetwork init_network(const std::vector<int>& spec, uint64_t seed) {
    if (spec.size() < 2) fail(Errc::ConfigError, "network spec needs at least input and output sizes");
    FloatNetwork net;
    net.input_dim = spec.front();
    net.n_classes = spec.back();
    for (size_t i = 0; i + 1 < spec.size(); ++i) {
        FloatLayer l;
        l.kind = LayerKind::Linear;
        l.in = spec[i];
        l.out = spec[i + 1];
        l.act = (i + 2 < spec.size()) ? Activation::ReLU : Activation::None;
        l.w.resize(static_cast<size_t>(l.in) * static_cast<size_t>(l.out));
        l.b.assign(static_cast<size_t>(l.out), 0.0f);
        SplitMix64 rng(derive_seed(seed, 0x4000 + i));
        float std_dev = std::sqrt(2.0f / static_cast<float>(l.in));
        for (auto& w : l.w) w = static_cast<float>(rng.next_gaussian()) * std_dev;
        net.layers.push_back(std::move(l));
    }
    return net;
}

// ---------------------------------------------------------------------------
// Backprop
// ---------------------------------------------------------------------------

namespace {

struct BackpropScratch {
    std::vector<std::vector<float>> inputs; // per-layer input activations
    std::vector<float> logits;
};

BackpropScratch forward_cached(const FloatNetwork& net, const std::vector<float>& x) {
    BackpropScratch s;
    std::vector<float> a = x;
    for (const auto& l : net.layers) {
        s.inputs.push_back(a);
        a = layer_forward_float(l, a);
    }
    s.logits = a;
    return s;
}

// Accumulates one sample's gradient contribution; dOut is dL/d(layer output).
void backward_layer(const FloatLayer& l, const std::vector<float>& input,
                    std::vector<float>& d_out, std::vector<float>& wg, std::vector<float>& bg,
                    std::vector<float>& d_in) {
    d_in.assign(input.size(), 0.0f);
    if (l.kind == LayerKind::Linear) {
        for (int m = 0; m < l.out; ++m) {
            float g = d_out[static_cast<size_t>(m)];
            if (g == 0.0f) continue;
            const size_t row = static_cast<size_t>(m) * static_cast<size_t>(l.in);
            bg[static_cast<size_t>(m)] += g;
            for (int j = 0; j < l.in; ++j) {
                wg[row + static_cast<size_t>(j)] += g * input[static_cast<size_t>(j)];
                d_in[static_cast<size_t>(j)] += g * l.w[row + static_cast<size_t>(j)];
            }
        }
    } else {
        ConvDims od = conv_dims(l.in_shape, l.kh, l.kw);
        const Shape3& in = l.in_shape;
        for (int f = 0; f < l.filters; ++f) {
            for (int oy = 0; oy < od.oh; ++oy) {
                for (int ox = 0; ox < od.ow; ++ox) {
                    float g = d_out[static_cast<size_t>((f * od.oh + oy) * od.ow + ox)];
                    if (g == 0.0f) continue;
                    bg[static_cast<size_t>(f)] += g;
                    for (int d = 0; d < in.c; ++d) {
                        for (int ky = 0; ky < l.kh; ++ky) {
                            for (int kx = 0; kx < l.kw; ++kx) {
                                size_t wi = static_cast<size_t>(
                                    ((f * in.c + d) * l.kh + ky) * l.kw + kx);
                                size_t xi = static_cast<size_t>(
                                    (d * in.h + oy + ky) * in.w + ox + kx);
                                wg[wi] += g * input[xi];
                                d_in[xi] += g * l.w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
}

GradientMap zero_grads(const FloatNetwork& net) {
    GradientMap g;
    for (const auto& l : net.layers) {
        g.weight_grads.emplace_back(l.w.size(), 0.0f);
        g.bias_grads.emplace_back(l.b.size(), 0.0f);
    }
    return g;
}

void check_finite(const GradientMap& g) {
    for (const auto& layer : g.weight_grads)
        for (float v : layer)
            if (!std::isfinite(v)) fail(Errc::NonFinite, "non-finite gradient");
}

} // namespace

GradientMap compute_gradients(const FloatNetwork& net,
                              const std::vector<const Dataset::Sample*>& batch) {
    if (batch.empty()) fail(Errc::ConfigError, "compute_gradients: empty batch");
    GradientMap g = zero_grads(net);
    const float inv_b = 1.0f / static_cast<float>(batch.size());
    std::vector<float> d_out, d_in;
    for (const auto* s : batch) {
        BackpropScratch cache = forward_cached(net, s->x);
        std::vector<double> p = softmax(cache.logits);
        d_out.resize(cache.logits.size());
        for (size_t i = 0; i < p.size(); ++i)
            d_out[i] = static_cast<float>(p[i] - (static_cast<int>(i) == s->label ? 1.0 : 0.0)) *
                       inv_b;
        for (int li = static_cast<int>(net.layers.size()) - 1; li >= 0; --li) {
            const auto& l = net.layers[static_cast<size_t>(li)];
            // Peel activation: dL/d(pre-act) = dL/d(post-act) * act'.
            if (l.act == Activation::ReLU) {
                // Recompute the post-activation output to get the mask.
                std::vector<float> out = layer_forward_float(l, cache.inputs[static_cast<size_t>(li)]);
                for (size_t i = 0; i < d_out.size(); ++i)
                    if (out[i] <= 0.0f) d_out[i] = 0.0f;
            }
            backward_layer(l, cache.inputs[static_cast<size_t>(li)], d_out,
                           g.weight_grads[static_cast<size_t>(li)],
                           g.bias_grads[static_cast<size_t>(li)], d_in);
            d_out = d_in;
        }
    }
    check_finite(g);
    return g;
}

GradientMap compute_gradients(const Network& net,
                              const std::vector<const Dataset::Sample*>& batch) {
    return compute_gradients(dequantize_view(net), batch);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

FloatNetwork train(const std::vector<int>& spec, const Dataset& ds, int epochs, float lr,
                   uint64_t seed) {
    if (spec.front() != ds.dim || spec.back() != ds.n_classes)
        fail(Errc::ConfigError, "train: spec incompatible with dataset dimensions");
    FloatNetwork net = init_network(spec, seed);
    auto train_set = train_samples(ds);
    SplitMix64 shuffle_rng(derive_seed(seed, 0x5000));
    constexpr size_t kBatch = 32;

    std::vector<size_t> order(train_set.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int e = 0; e < epochs; ++e) {
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);
        for (size_t start = 0; start < order.size(); start += kBatch) {
            size_t end = std::min(start + kBatch, order.size());
            std::vector<const Dataset::Sample*> batch;
            batch.reserve(end - start);
            for (size_t i = start; i < end; ++i) batch.push_back(train_set[order[i]]);
            GradientMap g = compute_gradients(net, batch);
            for (size_t li = 0; li < net.layers.size(); ++li) {
                auto& l = net.layers[li];
                for (size_t i = 0; i < l.w.size(); ++i) l.w[i] -= lr * g.weight_grads[li][i];
                for (size_t i = 0; i < l.b.size(); ++i) l.b[i] -= lr * g.bias_grads[li][i];
            }
        }
    }
    for (const auto& l : net.layers)
        for (float w : l.w)
            if (!std::isfinite(w)) fail(Errc::NonFinite, "training diverged (non-finite weight)");
    return net;
}

// ---------------------------------------------------------------------------
// Quantization
// ---------------------------------------------------------------------------

Network quantize(const FloatNetwork& fnet, const std::vector<const Dataset::Sample*>& calib) {
    Network net;
    net.input_dim = fnet.input_dim;
    net.n_classes = fnet.n_classes;

    // Calibrate per-layer input activation ranges on the fp32 network.
    std::vector<float> max_in(fnet.layers.size(), 0.0f);
    for (const auto* s : calib) {
        std::vector<float> a = s->x;
        for (size_t li = 0; li < fnet.layers.size(); ++li) {
            for (float v : a) max_in[li] = std::max(max_in[li], std::fabs(v));
            a = layer_forward_float(fnet.layers[li], a);
        }
    }

    for (size_t li = 0; li < fnet.layers.size(); ++li) {
        const auto& fl = fnet.layers[li];
        QuantLayer l;
        l.kind = fl.kind;
        l.act = fl.act;
        l.backend = Backend::Native;
        l.in = fl.in;
        l.out = fl.out;
        l.filters = fl.filters;
        l.channels = fl.channels;
        l.kh = fl.kh;
        l.kw = fl.kw;
        l.in_shape = fl.in_shape;

        float max_w = 0.0f;
        for (float w : fl.w) max_w = std::max(max_w, std::fabs(w));
        if (max_w == 0.0f) fail(Errc::DegenerateLayer, "quantize: layer is all-zero, scale undefined");
        l.scale_w = max_w / 127.0f;
        l.scale_in = max_in[li] > 0.0f ? max_in[li] / 127.0f : 1.0f;
        l.w.resize(fl.w.size());
        for (size_t i = 0; i < fl.w.size(); ++i) l.w[i] = quantize_value(fl.w[i], l.scale_w);
        l.b.resize(fl.b.size());
        const double bias_scale = static_cast<double>(l.scale_w) * static_cast<double>(l.scale_in);
        for (size_t i = 0; i < fl.b.size(); ++i)
            l.b[i] = static_cast<int32_t>(llround(static_cast<double>(fl.b[i]) / bias_scale));
        net.layers.push_back(std::move(l));
    }
    for (size_t li = 0; li + 1 < net.layers.size(); ++li)
        net.layers[li].scale_out = net.layers[li + 1].scale_in;
    if (!net.layers.empty()) net.layers.back().scale_out = 1.0f;
    return net;
}

FloatNetwork dequantize_view(const Network& net) {
    FloatNetwork f;
    f.input_dim = net.input_dim;
    f.n_classes = net.n_classes;
    for (const auto& l : net.layers) {
        FloatLayer fl;
        fl.kind = l.kind;
        fl.act = l.act;
        fl.in = l.in;
        fl.out = l.out;
        fl.filters = l.filters;
        fl.channels = l.channels;
        fl.kh = l.kh;
        fl.kw = l.kw;
        fl.in_shape = l.in_shape;
        fl.w.resize(l.w.size());
        for (size_t i = 0; i < l.w.size(); ++i) fl.w[i] = static_cast<float>(l.w[i]) * l.scale_w;
        fl.b.resize(l.b.size());
        for (size_t i = 0; i < l.b.size(); ++i)
            fl.b[i] = static_cast<float>(l.b[i]) * l.scale_w * l.scale_in;
        f.layers.push_back(std::move(fl));
    }
    return f;
}

// ---------------------------------------------------------------------------
// Integer-path forward
// ---------------------------------------------------------------------------

ForwardResult forward(const Network& net, const std::vector<float>& x, KernelExec* exec) {
    ForwardResult res;
    if (net.layers.empty()) fail(Errc::ConfigError, "forward: empty network");
    if (static_cast<int>(x.size()) != net.layers.front().in)
        fail(Errc::ConfigError, "forward: input dimension mismatch");

    // Quantize the input with the first layer's activation scale.
    std::vector<int8_t> u(x.size());
    for (size_t i = 0; i < x.size(); ++i) u[i] = quantize_value(x[i], net.layers.front().scale_in);

    std::vector<int32_t> acc;
    for (size_t li = 0; li < net.layers.size(); ++li) {
        const auto& l = net.layers[li];
        acc.assign(static_cast<size_t>(l.out), 0);

        if (l.kind == LayerKind::Linear && l.backend == Backend::VmKernel && exec != nullptr) {
            // Delegate the matmul (M=out, K=in, N=1) to the code kernel; bias
            // and requantization stay on the host.
            std::vector<int32_t> a(l.w.size()), b(u.size());
            for (size_t i = 0; i < l.w.size(); ++i) a[i] = l.w[i];
            for (size_t i = 0; i < u.size(); ++i) b[i] = u[i];
            uint64_t steps = 0;
            Outcome oc = exec->matmul(l.out, 1, l.in, a.data(), b.data(), acc.data(), steps);
            res.steps += steps;
            if (oc != Outcome::Ok) {
                res.outcome = oc;
                return res;
            }
            for (int m = 0; m < l.out; ++m) acc[static_cast<size_t>(m)] += l.b[static_cast<size_t>(m)];
        } else if (l.kind == LayerKind::Linear) {
            for (int m = 0; m < l.out; ++m) {
                int32_t s = l.b[static_cast<size_t>(m)];
                const int8_t* row = l.w.data() + static_cast<size_t>(m) * static_cast<size_t>(l.in);
                for (int j = 0; j < l.in; ++j)
                    s += static_cast<int32_t>(row[j]) * static_cast<int32_t>(u[static_cast<size_t>(j)]);
                acc[static_cast<size_t>(m)] = s;
            }
        } else {
            conv_forward<int8_t, int8_t, int32_t>(l.w.data(), u.data(), acc.data(), l.in_shape,
                                                  l.filters, l.kh, l.kw);
            ConvDims od = conv_dims(l.in_shape, l.kh, l.kw);
            for (int f = 0; f < l.filters; ++f)
                for (int p = 0; p < od.oh * od.ow; ++p)
                    acc[static_cast<size_t>(f * od.oh * od.ow + p)] += l.b[static_cast<size_t>(f)];
        }

        if (li + 1 == net.layers.size()) {
            res.logits.resize(static_cast<size_t>(l.out));
            const float s = l.scale_w * l.scale_in;
            for (int m = 0; m < l.out; ++m)
                res.logits[static_cast<size_t>(m)] = static_cast<float>(acc[static_cast<size_t>(m)]) * s;
            if (l.act == Activation::ReLU)
                for (auto& v : res.logits) v = v > 0.0f ? v : 0.0f;
        } else {
            // Requantize onto the next layer's input grid.
            const float mult = l.scale_w * l.scale_in / l.scale_out;
            u.resize(static_cast<size_t>(l.out));
            for (int m = 0; m < l.out; ++m) {
                long q = lrintf(static_cast<float>(acc[static_cast<size_t>(m)]) * mult);
                if (q > 127) q = 127;
                if (q < -127) q = -127;
                if (l.act == Activation::ReLU && q < 0) q = 0;
                u[static_cast<size_t>(m)] = static_cast<int8_t>(q);
            }
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Evaluation / loss
// ---------------------------------------------------------------------------

EvalReport evaluate_samples(const Network& net, const std::vector<const Dataset::Sample*>& samples,
                            KernelExec* exec) {
    EvalReport rep;
    rep.n_samples = samples.size();
    if (samples.empty()) fail(Errc::ConfigError, "evaluate: empty sample set");
    std::vector<size_t> correct(static_cast<size_t>(net.n_classes), 0);
    std::vector<size_t> total(static_cast<size_t>(net.n_classes), 0);
    size_t n_correct = 0;
    for (const auto* s : samples) {
        ForwardResult fr = forward(net, s->x, exec);
        rep.steps_executed += fr.steps;
        if (fr.outcome != Outcome::Ok) {
            rep.outcome = fr.outcome;
            rep.accuracy.reset();
            return rep;
        }
        total[static_cast<size_t>(s->label)]++;
        if (argmax_low_tie(fr.logits) == s->label) {
            correct[static_cast<size_t>(s->label)]++;
            n_correct++;
        }
    }
    rep.accuracy = static_cast<float>(n_correct) / static_cast<float>(samples.size());
    rep.per_class_accuracy.resize(static_cast<size_t>(net.n_classes), 0.0f);
    for (int c = 0; c < net.n_classes; ++c)
        if (total[static_cast<size_t>(c)] > 0)
            rep.per_class_accuracy[static_cast<size_t>(c)] =
                static_cast<float>(correct[static_cast<size_t>(c)]) /
                static_cast<float>(total[static_cast<size_t>(c)]);
    return rep;
}

EvalReport evaluate(const Network& net, const Dataset& ds, KernelExec* exec) {
    return evaluate_samples(net, eval_samples(ds), exec);
}

EvalReport evaluate_float(const FloatNetwork& net, const Dataset& ds) {
    EvalReport rep;
    auto samples = eval_samples(ds);
    rep.n_samples = samples.size();
    size_t n_correct = 0;
    for (const auto* s : samples)
        if (argmax_low_tie(net.forward(s->x)) == s->label) n_correct++;
    rep.accuracy = static_cast<float>(n_correct) / static_cast<float>(samples.size());
    return rep;
}

double batch_loss(const Network& net, const std::vector<const Dataset::Sample*>& samples) {
    double loss = 0.0;
    for (const auto* s : samples) {
        ForwardResult fr = forward(net, s->x);
        std::vector<double> p = softmax(fr.logits);
        double pl = std::max(p[static_cast<size_t>(s->label)], 1e-12);
        loss -= std::log(pl);
    }
    return loss / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Model file ("BANN")
// ---------------------------------------------------------------------------

void save_network(const Network& net, const std::string& path) {
    ByteWriter w;
    w.bytes("BANN", 4);
    w.u16(1); // format version
    w.u32(static_cast<uint32_t>(net.input_dim));
    w.u32(static_cast<uint32_t>(net.n_classes));
    w.u16(static_cast<uint16_t>(net.layers.size()));
    for (const auto& l : net.layers) {
        w.u8(static_cast<uint8_t>(l.kind));
        w.u8(static_cast<uint8_t>(l.act));
        w.u8(static_cast<uint8_t>(l.backend));
        w.u32(static_cast<uint32_t>(l.in));
        w.u32(static_cast<uint32_t>(l.out));
        w.u32(static_cast<uint32_t>(l.filters));
        w.u32(static_cast<uint32_t>(l.channels));
        w.u32(static_cast<uint32_t>(l.kh));
        w.u32(static_cast<uint32_t>(l.kw));
        w.u32(static_cast<uint32_t>(l.in_shape.c));
        w.u32(static_cast<uint32_t>(l.in_shape.h));
        w.u32(static_cast<uint32_t>(l.in_shape.w));
        w.f32(l.scale_w);
        w.f32(l.scale_in);
        w.f32(l.scale_out);
        w.u64(l.w.size());
        w.u64(l.b.size());
    }
    for (const auto& l : net.layers) {
        w.bytes(l.w.data(), l.w.size());
        for (int32_t b : l.b) w.i32(b);
    }
    write_file(path, w.buf);
}

Network load_network(const std::string& path) {
    auto data = read_file(path);
    ByteReader r(data);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, "BANN", 4) != 0) fail(Errc::ParseError, "bad model magic");
    if (r.u16() != 1) fail(Errc::ParseError, "unsupported model version");
    Network net;
    net.input_dim = static_cast<int>(r.u32());
    net.n_classes = static_cast<int>(r.u32());
    size_t n_layers = r.u16();
    std::vector<std::pair<size_t, size_t>> counts;
    for (size_t i = 0; i < n_layers; ++i) {
        QuantLayer l;
        l.kind = static_cast<LayerKind>(r.u8());
        l.act = static_cast<Activation>(r.u8());
        l.backend = static_cast<Backend>(r.u8());
        l.in = static_cast<int>(r.u32());
        l.out = static_cast<int>(r.u32());
        l.filters = static_cast<int>(r.u32());
        l.channels = static_cast<int>(r.u32());
        l.kh = static_cast<int>(r.u32());
        l.kw = static_cast<int>(r.u32());
        l.in_shape.c = static_cast<int>(r.u32());
        l.in_shape.h = static_cast<int>(r.u32());
        l.in_shape.w = static_cast<int>(r.u32());
        l.scale_w = r.f32();
        l.scale_in = r.f32();
        l.scale_out = r.f32();
        size_t wn = r.u64();
        size_t bn = r.u64();
        counts.emplace_back(wn, bn);
        net.layers.push_back(std::move(l));
    }
    for (size_t i = 0; i < n_layers; ++i) {
        auto& l = net.layers[i];
        l.w.resize(counts[i].first);
        r.bytes(l.w.data(), l.w.size());
        l.b.resize(counts[i].second);
        for (auto& b : l.b) b = r.i32();
    }
    return net;
}

} // namespace flipguard
