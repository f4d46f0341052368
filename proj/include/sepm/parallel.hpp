#pragma once

#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace sepm {

// Intra-op worker count. Read once from SEPM_THREADS (default 1) and
// overridable programmatically. Kernels partition OUTPUT ranges, so results
// are bit-identical for any thread count.
inline int& thread_count_ref() {
  static int n = [] {
    if (const char* env = std::getenv("SEPM_THREADS")) {
      const int v = std::atoi(env);
      if (v >= 1) return v;
    }
    return 1;
  }();
  return n;
}

inline int thread_count() { return thread_count_ref(); }
inline void set_thread_count(int n) { thread_count_ref() = n >= 1 ? n : 1; }

// Runs f(begin, end) over disjoint slices of [0, n).
template <typename F>
void parallel_for(std::int64_t n, F&& f, std::int64_t grain = 256) {
  const int workers = thread_count();
  if (workers <= 1 || n < 2 * grain) {
    f(std::int64_t{0}, n);
    return;
  }
  const int used = static_cast<int>(std::min<std::int64_t>(workers, (n + grain - 1) / grain));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(used));
  const std::int64_t chunk = (n + used - 1) / used;
  for (int w = 0; w < used; ++w) {
    const std::int64_t b = w * chunk;
    const std::int64_t e = std::min<std::int64_t>(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&f, b, e] { f(b, e); });
  }
  for (auto& t : pool) t.join();
}

}  // namespace sepm
