#pragma once

#include <cstddef>
#include <functional>

namespace circuitscope {

// Worker count: CIRCUITSCOPE_THREADS if set and positive, otherwise the
// hardware concurrency.
std::size_t thread_count();

// Runs fn(i) for i in [0, n). Each index is handled by exactly one worker;
// callers write results into per-index slots and reduce in index order, so
// output never depends on the number of threads. The first exception thrown
// by any worker is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace circuitscope
