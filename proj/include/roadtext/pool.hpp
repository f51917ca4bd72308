#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "roadtext/util.hpp"

namespace roadtext {

/// Runs `count` independent tasks on a fixed-size pool and returns results
/// merged by task index, so the output does not depend on the worker count.
/// The first task exception aborts the run and is rethrown on the caller.
template <typename T>
std::vector<T> parallel_map(std::size_t count, std::size_t workers,
                            const std::function<T(std::size_t)>& task) {
    if (workers == 0) throw error("parallel_map: workers must be >= 1");
    std::vector<T> results(count);
    if (count == 0) return results;

    if (workers == 1 || count == 1) {
        for (std::size_t i = 0; i < count; ++i) results[i] = task(i);
        return results;
    }

    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr first_error;
    std::mutex error_mutex;

    auto worker = [&]() {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= count || failed.load()) return;
            try {
                results[i] = task(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
                failed.store(true);
                return;
            }
        }
    };

    std::vector<std::thread> threads;
    std::size_t n_threads = std::min(workers, count);
    threads.reserve(n_threads);
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
    return results;
}

inline void parallel_for(std::size_t count, std::size_t workers,
                         const std::function<void(std::size_t)>& task) {
    parallel_map<int>(count, workers, [&](std::size_t i) {
        task(i);
        return 0;
    });
}

}  // namespace roadtext
