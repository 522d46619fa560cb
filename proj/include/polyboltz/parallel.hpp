#pragma once

#include <cstddef>
#include <functional>

namespace polyboltz {

/// Number of worker threads used by parallel_for. Defaults to the
/// POLYBOLTZ_THREADS environment variable if set, otherwise the hardware
/// concurrency. Thread count never changes results, only wall time.
int thread_count();

/// Override the worker count (0 restores the default resolution order).
void set_thread_count(int n);

/// Splits [0, n) into contiguous chunks and runs fn(begin, end) on each.
/// Chunks are disjoint, so writers to per-index slots need no locking.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

} // namespace polyboltz
