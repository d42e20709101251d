#pragma once

#include <cstddef>
#include <functional>

namespace modfuse {

// Worker count used by parallel kernels. Defaults to the hardware concurrency,
// capped by the MODFUSE_THREADS environment variable when set.
std::size_t num_threads();
void set_num_threads(std::size_t n);

// Runs body(i) for i in [0, n). Iterations must write disjoint outputs; the
// result is then independent of the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace modfuse
