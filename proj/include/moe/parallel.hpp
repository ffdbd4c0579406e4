#pragma once

#include <cstddef>
#include <functional>

namespace moe {

// Caps worker threads used by evaluation and gradient computation. 0 means
// one per hardware thread.
void set_thread_limit(std::size_t threads);
std::size_t thread_limit();

// Runs fn(i) for i in [0, n) over contiguous chunks, one chunk per worker.
// Callers write results to slot i so the outcome is schedule-independent.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace moe
