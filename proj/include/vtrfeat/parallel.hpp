#pragma once

#include <cstddef>
#include <functional>

namespace vtrfeat {

/// Worker cap for internal parallel loops; 1 (the default) runs inline.
void set_thread_count(int threads);
int thread_count();

/// Runs fn(i) for i in [0, n). Each index is visited exactly once; callers
/// write results by index so output order never depends on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace vtrfeat
