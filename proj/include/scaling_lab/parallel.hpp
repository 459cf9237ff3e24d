#pragma once

// Index-parallel loop. Work items write into their own slots, so the result
// never depends on scheduling.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace scaling_lab {

/// Calls fn(i) for i in [0, n) on up to `jobs` threads. The first exception
/// (lowest index) is rethrown after all workers stop.
template <class F>
void parallel_for(std::size_t n, int jobs, F&& fn) {
  const std::size_t width = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(jobs, 1)));
  if (width <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex guard;
  std::exception_ptr error;
  std::size_t error_index = n;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(guard);
        if (i < error_index) {
          error_index = i;
          error = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < width; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace scaling_lab
