#pragma once

#include <cstddef>
#include <functional>

namespace mergeforge {

// Number of workers: min(hardware_concurrency, MERGEFORGE_THREADS if set).
int worker_count();

// Runs fn(i) for i in [0, n). Items must be independent; callers that reduce
// results do so afterwards in index order, which keeps every pipeline
// deterministic regardless of the worker count.
void parallel_for(size_t n, const std::function<void(size_t)>& fn);

}  // namespace mergeforge
