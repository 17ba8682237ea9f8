#pragma once

#include <cstddef>
#include <functional>

namespace retinet {

// Worker count: RETINET_THREADS if set (>=1), else hardware concurrency.
std::size_t worker_count();

// Override for tests and embedding; 0 restores the environment default.
void set_worker_count(std::size_t n);

// Runs fn(i) for i in [0, n) over a static partition of contiguous chunks.
// Each index is processed exactly once, so any computation that writes only
// to index-owned storage is bitwise independent of the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace retinet
