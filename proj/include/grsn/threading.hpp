#pragma once

#include <omp.h>

#include <algorithm>
#include <cstdlib>
#include <string>

namespace grsn::threading {

// Process-wide cap on OpenMP worker threads used by the kernels.  The cap is
// initialised once from the GRSN_THREADS environment variable (if set) and
// can be tightened at runtime, e.g. the throughput benchmark pins itself to
// a single thread so reported rates are comparable across machines.

inline int& cap_ref() {
  static int cap = [] {
    int n = omp_get_max_threads();
    if (const char* env = std::getenv("GRSN_THREADS")) {
      try {
        int req = std::stoi(env);
        if (req >= 1) n = std::min(n, req);
      } catch (...) {
        // Ignore unparseable values; keep the OpenMP default.
      }
    }
    return n;
  }();
  return cap;
}

inline int thread_cap() { return cap_ref(); }

inline void set_thread_cap(int n) { cap_ref() = std::max(1, n); }

// RAII guard used by code that needs a temporary cap (benchmarks, tests).
class ThreadCapGuard {
 public:
  explicit ThreadCapGuard(int n) : saved_(thread_cap()) { set_thread_cap(n); }
  ~ThreadCapGuard() { set_thread_cap(saved_); }
  ThreadCapGuard(const ThreadCapGuard&) = delete;
  ThreadCapGuard& operator=(const ThreadCapGuard&) = delete;

 private:
  int saved_;
};

}  // namespace grsn::threading
