#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace paleorec {

// Runs fn(index, worker) for every index in [0, count), spread over at most
// `threads` workers in a strided pattern. Worker w handles indices w,
// w + workers, ... so callers can keep per-worker scratch state; results must
// be written to per-index slots, which keeps the outcome independent of the
// worker count. The first exception thrown by any worker is rethrown after
// all workers finish.
inline void parallel_for(std::size_t count, int threads,
                         const std::function<void(std::size_t, int)>& fn) {
    if (threads <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i, 0);
        return;
    }
    const int workers = static_cast<int>(std::min<std::size_t>(threads, count));
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::exception_ptr failure;
    std::mutex failure_mutex;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < count; i += workers) fn(i, w);
            } catch (...) {
                const std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        });
    }
    for (auto& worker : pool) worker.join();
    if (failure) std::rethrow_exception(failure);
}

// Thread budget: an explicit positive request wins, otherwise the hardware
// concurrency (which may report 0 -> treat as 1).
inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace paleorec
