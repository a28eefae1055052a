#pragma once

#include <algorithm>
#include <functional>
#include <thread>
#include <vector>

namespace pivsem {

// Runs fn(i) for i in [0, count) across up to n_threads workers. Callers are
// responsible for writing results into disjoint, index-addressed slots so the
// merge is deterministic regardless of scheduling. n_threads <= 0 picks the
// hardware count.
inline void parallel_for(int count, const std::function<void(int)>& fn, int n_threads = 0) {
  if (count <= 0) return;
  int hw = n_threads > 0 ? n_threads : static_cast<int>(std::thread::hardware_concurrency());
  hw = std::max(1, std::min(hw, count));
  if (hw == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(hw);
  for (int t = 0; t < hw; ++t) {
    pool.emplace_back([&, t]() {
      try {
        for (int i = t; i < count; i += hw) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace pivsem
