#pragma once

#include <cstddef>
#include <functional>

namespace codequant {

// Process-wide worker count used by the row-parallel kernels. Results never
// depend on this value: every output element is produced by exactly one
// worker with a fixed accumulation order.
void set_num_threads(int n);
int num_threads();

// Splits [0, n) into contiguous chunks and calls body(begin, end) on each.
// Runs inline when only one worker is configured or n is small.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body,
                  std::size_t min_chunk = 1);

}  // namespace codequant
