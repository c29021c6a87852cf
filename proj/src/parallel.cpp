#include "gridreg/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <stdexcept>
#include <thread>
#include <vector>

namespace gridreg {

namespace {
std::atomic<int> g_threads{1};
}

int thread_count() { return g_threads.load(); }

void set_thread_count(int n) {
    if (n < 1) {
        throw std::invalid_argument("thread count must be >= 1");
    }
    g_threads.store(n);
}

void parallel_for(std::int64_t begin, std::int64_t end, const std::function<void(std::int64_t)>& body) {
    const std::int64_t count = end - begin;
    const int workers = static_cast<int>(std::min<std::int64_t>(thread_count(), count));
    if (workers <= 1) {
        for (std::int64_t n = begin; n < end; ++n) {
            body(n);
        }
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    const std::int64_t chunk = (count + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        const std::int64_t lo = begin + w * chunk;
        const std::int64_t hi = std::min(end, lo + chunk);
        pool.emplace_back([lo, hi, &body] {
            for (std::int64_t n = lo; n < hi; ++n) {
                body(n);
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
}

} // namespace gridreg
