#pragma once

#include <cstddef>
#include <functional>

namespace rsdyn {

/// Process-wide worker cap. 0 means hardware concurrency.
void set_thread_count(unsigned n);
unsigned thread_count();

/// Runs body(i) for i in [0, n) across worker threads. Each index is visited
/// exactly once; callers write into pre-sized per-index slots so results do
/// not depend on the number of workers. The first exception thrown by any
/// body is rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace rsdyn
