#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace tcclab {

// Sample-level parallelism cap, read once per process from TCC_LAB_THREADS.
// Unset, 0 or 1 means single-threaded; that is the mode every bitwise
// reproducibility guarantee is stated for. Parallel runs stay deterministic
// anyway because each index writes only its own slot, but keeping the default
// serial makes the guarantee trivial to audit.
inline int thread_cap() {
    static const int cap = [] {
        const char* env = std::getenv("TCC_LAB_THREADS");
        if (env == nullptr || *env == '\0') return 0;
        return std::atoi(env);
    }();
    return cap;
}

inline void for_each_index(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const int cap = thread_cap();
    if (cap <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(cap), n);
    std::vector<std::thread> pool;
    std::exception_ptr first_error = nullptr;
    std::vector<std::exception_ptr> errors(workers, nullptr);
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (const auto& e : errors) {
        if (e) {
            first_error = e;
            break;
        }
    }
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace tcclab
