#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>

namespace xspec {

/// SplitMix64 finalizer; used to derive independent seeds for named substreams.
std::uint64_t mix_seed(std::uint64_t x);

/// Seed of substream `index` of `seed`. Results depend only on (seed, index).
std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t index);

/// Thread cap from XSPEC_THREADS, falling back to hardware concurrency.
unsigned default_thread_count();

/// Runs fn(i) for i in [0, n) over up to `threads` workers. Work is split into
/// contiguous chunks; fn must only write to per-index state.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn);

}  // namespace xspec
