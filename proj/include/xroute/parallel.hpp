#pragma once

#include <cstddef>
#include <functional>

namespace xroute {

/// Worker count used by parallel kernels. 0 means "hardware concurrency".
void set_num_threads(std::size_t n);
std::size_t num_threads();

/// Runs fn(i) for every i in [begin, end). Work is split into contiguous
/// chunks; each index is processed exactly once, so any per-index output is
/// independent of the thread count.
void parallel_for(std::size_t begin, std::size_t end, const std::function<void(std::size_t)>& fn);

} // namespace xroute
