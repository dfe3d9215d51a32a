// Copyright (c) 2026, The rcpmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <functional>

namespace rcpmerge {

/// Worker cap: RCPMERGE_THREADS if set and positive, else the hardware
/// concurrency (at least 1).
int default_thread_count();

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
/// visited exactly once; the first exception thrown by any worker is
/// rethrown on the calling thread after all workers join.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace rcpmerge
