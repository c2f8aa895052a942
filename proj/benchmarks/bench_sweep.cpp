// Times the code-vulnerability sweep (the hot path: one full VM evaluation
// per candidate jump bit) single-threaded vs. with all OpenMP threads.

#include <chrono>
#include <iostream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "flipguard/memory_image.hpp"
#include "flipguard/vm.hpp"
#include "flipguard/vuln_search.hpp"

using namespace flipguard;

namespace {

double time_sweep(const MemoryImage& img, const Dataset& ds, int reps) {
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i)
        (void)search_code_vulnerabilities(img, ds, 0.05f, kDefaultStepBudget);
    auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

} // namespace

int main() {
    Dataset ds = generate_dataset(7, 100, 4, 16);
    FloatNetwork fnet = train({16, 128, 128, 4}, ds, 10, 0.05f, 7);
    Network net = quantize(fnet, train_samples(ds));
    MemoryImage img = build_image(net, assemble(kGemmKernelSource));

    const int reps = 3;
#ifdef _OPENMP
    omp_set_num_threads(1);
    double serial = time_sweep(img, ds, reps);
    omp_set_num_threads(omp_get_num_procs());
    double parallel = time_sweep(img, ds, reps);
    std::cout << "sweep serial:   " << serial << " ms\n";
    std::cout << "sweep parallel: " << parallel << " ms (" << omp_get_num_procs()
              << " threads, speedup " << serial / parallel << "x)\n";
#else
    double serial = time_sweep(img, ds, reps);
    std::cout << "sweep serial: " << serial << " ms (built without OpenMP)\n";
#endif
    return 0;
}
