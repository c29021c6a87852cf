#pragma once

#include <cstdint>
#include <functional>

namespace gridreg {

/// Number of worker threads used by per-voxel loops. Defaults to 1 (serial).
int thread_count();
void set_thread_count(int n);

/// Runs body(n) for n in [begin, end). Iterations must write disjoint outputs;
/// the result is then independent of the thread count.
void parallel_for(std::int64_t begin, std::int64_t end, const std::function<void(std::int64_t)>& body);

} // namespace gridreg
