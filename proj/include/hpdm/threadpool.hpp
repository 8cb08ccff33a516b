#pragma once

#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace hpdm {

// Fork-join parallel map over [0, n). Items must write disjoint state; any
// reduction happens after the join, in index order, so results do not depend
// on scheduling. threads <= 1 runs inline (the deterministic mode).
inline void parallel_for(int64_t n, int threads, const std::function<void(int64_t)>& fn) {
    if (n <= 0) return;
    if (threads <= 1 || n == 1) {
        for (int64_t i = 0; i < n; i++) fn(i);
        return;
    }
    const int workers = int(std::min<int64_t>(threads, n));
    std::atomic<int64_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr first_error{};
    auto body = [&]() {
        while (true) {
            const int64_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (int w = 1; w < workers; w++) pool.emplace_back(body);
    body();
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace hpdm
