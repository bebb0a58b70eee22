#pragma once

#include <cstddef>
#include <functional>

namespace cdtta {

// Worker cap: CDTTA_THREADS if set and positive, otherwise hardware concurrency.
std::size_t thread_budget();

// Runs body(i) for i in [0, count). Each index must touch disjoint output, so the
// result never depends on the number of workers.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace cdtta
