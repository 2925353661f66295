#pragma once

#include <cstddef>
#include <functional>

namespace dimae {

/// Worker cap: DIMAE_NUM_THREADS if set, else hardware concurrency.
int num_threads();

/// Runs fn(i) for i in [0, n) over at most num_threads() workers with a static
/// partition. Callers only write to disjoint outputs, so results do not depend on
/// the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace dimae
