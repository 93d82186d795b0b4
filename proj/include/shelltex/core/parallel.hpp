// Copyright Contributors to the shelltex project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace shelltex {

namespace detail {
inline std::atomic<int> &threadSetting() {
    static std::atomic<int> value{0};
    return value;
}
} // namespace detail

/// Caps the number of workers used by every parallel loop. 0 selects the
/// number of hardware threads.
inline void set_thread_count(int n) { detail::threadSetting().store(std::max(0, n)); }

inline int thread_count() {
    const int n = detail::threadSetting().load();
    if (n > 0)
        return n;
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n). Tasks are independent; any result that is
/// later reduced must be stored per task and combined in task order by the
/// caller, so outputs never depend on the worker count.
template <class Fn>
void parallel_for(std::size_t n, Fn &&fn) {
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(thread_count()), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex errorMutex;
    auto body = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n)
                return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(errorMutex);
                if (!error)
                    error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w)
        pool.emplace_back(body);
    body();
    for (auto &t : pool)
        t.join();
    if (error)
        std::rethrow_exception(error);
}

} // namespace shelltex
