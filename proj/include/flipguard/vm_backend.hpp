#pragma once

#include "flipguard/memory_image.hpp"
#include "flipguard/vm.hpp"

namespace flipguard {

// KernelExec backed by the VM executing a GEMM kernel bytecode. Each matmul
// call builds the kernel's data memory (header, A, B, canary-filled C),
// runs the VM, and copies C back out. An Ok run that left any C word
// unwritten (canary intact) is reported as Crash: the kernel completed
// without doing its job, which real callers would observe as corruption.
class VmKernelExec : public KernelExec {
public:
    VmKernelExec(const uint8_t* code, size_t code_len, uint32_t entry,
                 uint64_t step_budget = kDefaultStepBudget)
        : code_(code), len_(code_len), entry_(entry), budget_(step_budget) {}

    Outcome matmul(int m, int n, int k, const int32_t* a, const int32_t* b, int32_t* c,
                   uint64_t& steps) override;

private:
    const uint8_t* code_;
    size_t len_;
    uint32_t entry_;
    uint64_t budget_;
};

constexpr int32_t kCanary = 0x7FFFFFFF;

// Full-dataset evaluation with every VmKernel-backend layer executed by the
// image's CODE section.
EvalReport run_inference_with_vm(const MemoryImage& img, const Dataset& ds,
                                 uint64_t step_budget = kDefaultStepBudget);
EvalReport run_inference_with_vm(const MemoryImage& img,
                                 const std::vector<const Dataset::Sample*>& samples,
                                 uint64_t step_budget = kDefaultStepBudget);

} // namespace flipguard
