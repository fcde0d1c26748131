#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace catlgp {

// Thread budget: CATLGP_THREADS env var if set, else hardware concurrency.
inline int thread_cap() {
    static const int cap = [] {
        if (const char* env = std::getenv("CATLGP_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hc = std::thread::hardware_concurrency();
        return hc ? int(hc) : 1;
    }();
    return cap;
}

// Runs fn(i) for i in [0, count) on up to thread_cap() threads with a static
// striped schedule. Each index must write only its own output slots; under
// that contract the result cannot depend on the schedule or thread count.
template <typename Fn>
void parallel_for(int count, Fn&& fn) {
    int threads = std::min(thread_cap(), count);
    if (threads <= 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(size_t(threads));
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (int i = t; i < count; i += threads) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

} // namespace catlgp
