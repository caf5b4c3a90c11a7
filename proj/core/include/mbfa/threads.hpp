#pragma once

#include <cstddef>
#include <functional>

namespace mbfa {

// Worker count for data-parallel loops: MBFA_THREADS if set, otherwise
// hardware concurrency.
unsigned worker_count();

// Runs fn(chunk_index, begin, end) over [0, n) split into fixed-size chunks.
// Chunks are claimed dynamically by a small thread pool, but the chunk
// boundaries depend only on (n, chunk_size): callers that write per-chunk
// results and reduce them in chunk order get answers independent of the
// number of workers. fn must not throw across threads with shared state;
// the first exception is rethrown on the calling thread.
void parallel_chunks(std::size_t n, std::size_t chunk_size,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn);

inline std::size_t chunk_count(std::size_t n, std::size_t chunk_size) {
    return chunk_size == 0 ? 0 : (n + chunk_size - 1) / chunk_size;
}

}  // namespace mbfa
