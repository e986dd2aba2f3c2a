#pragma once

#include <cstddef>
#include <functional>

namespace condenser {

/// Worker count used inside primitives. Work is split into disjoint output
/// ranges, so results do not depend on the thread count.
void set_num_threads(int n);
int num_threads();

/// Calls fn(begin, end) over a partition of [0, n).
void parallel_for(std::size_t n, std::size_t min_chunk,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace condenser
