#pragma once

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

namespace mmsb {

namespace detail {
inline std::atomic<int>& thread_count() {
  static std::atomic<int> n{1};
  return n;
}
}  // namespace detail

/// Worker threads used for batch-parallel loops. Work is split over
/// independent output blocks, so results do not depend on this setting.
inline void set_num_threads(int n) { detail::thread_count() = std::max(1, n); }
inline int num_threads() { return detail::thread_count(); }

/// Calls fn(i) for i in [0, count), spreading indices over the worker threads.
template <class Fn>
void parallel_for(long count, Fn&& fn) {
  const int workers = static_cast<int>(std::min<long>(num_threads(), count));
  if (workers <= 1) {
    for (long i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers - 1));
  auto run = [&](int w) {
    for (long i = w; i < count; i += workers) fn(i);
  };
  for (int w = 1; w < workers; ++w) pool.emplace_back(run, w);
  run(0);
  for (auto& th : pool) th.join();
}

}  // namespace mmsb
