#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace mosaic {

// Upper bound on worker threads; SPHERE_BSA_THREADS caps it.
inline std::size_t thread_limit() {
    std::size_t hw = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("SPHERE_BSA_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v >= 1) hw = std::min<std::size_t>(hw, static_cast<std::size_t>(v));
        } catch (...) {
        }
    }
    return hw;
}

// Static-chunked loop over [0, n). Work items must write disjoint memory.
template <class F>
void parallel_for(std::size_t n, F&& fn) {
    const std::size_t threads = std::min(thread_limit(), n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t)
        pool.emplace_back([&, t] {
            for (std::size_t i = t; i < n; i += threads) fn(i);
        });
    for (auto& th : pool) th.join();
}

// Multiply-accumulate counter for the attention kernels.
struct FlopCounter {
    std::atomic<std::uint64_t> macs{0};
};

inline std::atomic<FlopCounter*>& active_flop_counter() {
    static std::atomic<FlopCounter*> counter{nullptr};
    return counter;
}

inline void count_macs(std::uint64_t n) {
    if (FlopCounter* c = active_flop_counter().load(std::memory_order_relaxed))
        c->macs.fetch_add(n, std::memory_order_relaxed);
}

class CountFlops {
public:
    explicit CountFlops(FlopCounter& c) : prev_(active_flop_counter().exchange(&c)) {}
    ~CountFlops() { active_flop_counter().store(prev_); }
    CountFlops(const CountFlops&) = delete;
    CountFlops& operator=(const CountFlops&) = delete;

private:
    FlopCounter* prev_;
};

}  // namespace mosaic
