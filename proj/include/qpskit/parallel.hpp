#pragma once

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace qpskit {

// Worker count used by data-parallel loops: the QPSKIT_THREADS environment
// variable when set (clamped to >= 1), otherwise the hardware concurrency.
inline int thread_budget() {
  if (const char* env = std::getenv("QPSKIT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) return static_cast<int>(std::min<long>(v, 1024));
    return 1;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

// Runs body(i) for i in [0, count) across the thread budget with static
// interleaved scheduling. The body must only write to its own slot i, which
// keeps the output independent of the thread count.
template <typename Body>
void parallel_for(long long count, Body&& body, int threads = thread_budget()) {
  if (count <= 0) return;
  threads = static_cast<int>(std::min<long long>(threads, count));
  if (threads <= 1) {
    for (long long i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(threads));
  for (int w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      for (long long i = w; i < count; i += threads) body(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace qpskit
