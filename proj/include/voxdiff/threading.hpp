#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace voxdiff {

// Worker count: min(requested, VOXDIFF_THREADS, hardware). requested == 0
// means "as many as allowed".
inline int resolve_jobs(int requested) {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    int cap = hw;
    if (const char* env = std::getenv("VOXDIFF_THREADS")) {
        const int v = std::atoi(env);
        if (v >= 1) cap = std::min(cap, v);
    }
    if (requested <= 0) return cap;
    return std::min(requested, cap);
}

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Work items must write to
// disjoint state; the partition is by fixed stride so results never depend on
// the thread count.
template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
    const int workers = std::min<std::size_t>(resolve_jobs(jobs), n == 0 ? 1 : n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace voxdiff
