#include "flipguard/vm_backend.hpp"

namespace flipguard {

Outcome VmKernelExec::matmul(int m, int n, int k, const int32_t* a, const int32_t* b, int32_t* c,
                             uint64_t& steps) {
    const size_t na = static_cast<size_t>(m) * static_cast<size_t>(k);
    const size_t nb = static_cast<size_t>(k) * static_cast<size_t>(n);
    const size_t nc = static_cast<size_t>(m) * static_cast<size_t>(n);
    std::vector<int32_t> mem(8 + na + nb + nc);
    mem[0] = m;
    mem[1] = n;
    mem[2] = k;
    mem[3] = 8;
    mem[4] = static_cast<int32_t>(8 + na);
    mem[5] = static_cast<int32_t>(8 + na + nb);
    mem[6] = kClampHi;
    mem[7] = kClampLo;
    std::copy(a, a + na, mem.begin() + 8);
    std::copy(b, b + nb, mem.begin() + 8 + static_cast<long>(na));
    std::fill(mem.end() - static_cast<long>(nc), mem.end(), kCanary);

    VmOutcome out = execute(code_, len_, entry_, mem, budget_);
    steps += out.steps;
    if (out.status != Outcome::Ok) return out.status;
    for (size_t i = 0; i < nc; ++i)
        if (mem[8 + na + nb + i] == kCanary) return Outcome::Crash; // incomplete kernel
    std::copy(mem.end() - static_cast<long>(nc), mem.end(), c);
    return Outcome::Ok;
}

EvalReport run_inference_with_vm(const MemoryImage& img,
                                 const std::vector<const Dataset::Sample*>& samples,
                                 uint64_t step_budget) {
    Network net = materialize_network(img);
    for (auto& l : net.layers)
        if (l.kind == LayerKind::Linear) l.backend = Backend::VmKernel;
    const Section& code = img.section("CODE");
    VmKernelExec exec(img.payload.data() + code.offset, code.length, img.program_meta.entry,
                      step_budget);
    return evaluate_samples(net, samples, &exec);
}

EvalReport run_inference_with_vm(const MemoryImage& img, const Dataset& ds, uint64_t step_budget) {
    return run_inference_with_vm(img, eval_samples(ds), step_budget);
}

} // namespace flipguard
