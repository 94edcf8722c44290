#pragma once

#include <cstddef>
#include <functional>

namespace multirep {

/// Runs body(0..count-1) on up to `jobs` threads (0 means hardware
/// concurrency). Work items must be independent; results must be written to
/// per-index slots so the outcome does not depend on scheduling. If items
/// throw, the exception from the lowest failing index is rethrown.
void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& body);

std::size_t resolve_jobs(std::size_t jobs);

}  // namespace multirep
