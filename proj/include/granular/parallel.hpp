#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace granular {

/// Fixed simulation chunk size. Substreams are keyed by chunk index, so the
/// partition of work (and every random draw) is independent of how many
/// threads execute it.
inline constexpr std::size_t kChunkSize = 8192;

inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Runs fn(chunk_index, begin, end) over [0, total) split into fixed-size
/// chunks. Threads pull chunk indices from a shared counter; because every
/// chunk owns its outputs and its random substream, results are identical
/// for any thread count.
template <typename F>
void parallel_chunks(std::size_t total, std::size_t chunk_size, int threads, F&& fn) {
    if (total == 0) return;
    const std::size_t n_chunks = (total + chunk_size - 1) / chunk_size;
    const int n_threads = std::min<std::size_t>(resolve_threads(threads), n_chunks);

    auto run_chunk = [&](std::size_t c) {
        const std::size_t begin = c * chunk_size;
        const std::size_t end = std::min(total, begin + chunk_size);
        fn(c, begin, end);
    };

    if (n_threads <= 1) {
        for (std::size_t c = 0; c < n_chunks; ++c) run_chunk(c);
        return;
    }

    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::atomic<bool> failed{false};
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (int i = 0; i < n_threads; ++i) {
        pool.emplace_back([&] {
            try {
                for (;;) {
                    const std::size_t c = next.fetch_add(1);
                    if (c >= n_chunks || failed.load()) return;
                    run_chunk(c);
                }
            } catch (...) {
                if (!failed.exchange(true)) error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace granular
