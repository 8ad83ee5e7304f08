#pragma once

#include <cstddef>
#include <functional>

namespace facm {

/// Worker cap used by parallel_for. 0 resets to the hardware concurrency.
void set_num_threads(std::size_t n);
std::size_t num_threads();

/// Runs fn(lo, hi) over contiguous chunks of [0, n). Each index is handled
/// by exactly one call, and chunk boundaries never change per-index
/// arithmetic, so results do not depend on the thread count.
void parallel_for(std::size_t n, std::size_t min_chunk,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace facm
