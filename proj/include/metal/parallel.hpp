#pragma once

#include <algorithm>
#include <exception>
#include <thread>
#include <vector>

namespace metal {

/// Calls fn(i) for i in [0, n) on up to `workers` threads. Results must be
/// written by index so the outcome does not depend on scheduling. The first
/// exception (by index) is rethrown after all threads join.
template <class Fn>
void parallel_for(int n, int workers, Fn&& fn) {
  if (n <= 0) return;
  workers = std::clamp(workers, 1, n);
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace metal
