#pragma once

#include <cstddef>
#include <functional>

namespace p2i {

/// Number of worker threads used by parallel_for. Initialised from the
/// P2I_THREADS environment variable, falling back to hardware concurrency.
std::size_t thread_count();
void set_thread_count(std::size_t n);

/// Runs body(i) for i in [0, n). Each index is executed exactly once; the
/// caller must make distinct indices write to disjoint memory. Work splitting
/// never depends on the thread count, so results stay bitwise reproducible.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace p2i
