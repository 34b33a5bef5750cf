#pragma once

#include <cstddef>
#include <exception>
#include <mutex>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pcml {

/// How a data-parallel loop runs. `serial` is the reference path; both must
/// produce bit-identical results because every iteration writes its own slot
/// and reductions happen afterwards in index order.
enum class Execution { serial, parallel };

inline int available_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

/// Calls body(i) for i in [0, n). Exceptions thrown by any iteration are
/// captured and the one from the lowest index is rethrown after the loop.
template <class Body>
void for_each_index(std::size_t n, Execution exec, Body&& body, int threads = 0) {
  if (exec == Execution::serial || n < 2) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::exception_ptr first_error;
  std::size_t first_index = n;
  std::mutex guard;
  const long count = static_cast<long>(n);
  const int nthreads = threads > 0 ? threads : available_threads();
  (void)nthreads;
#pragma omp parallel for schedule(dynamic, 1) num_threads(nthreads)
  for (long i = 0; i < count; ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
      std::lock_guard<std::mutex> lock(guard);
      if (static_cast<std::size_t>(i) < first_index) {
        first_index = static_cast<std::size_t>(i);
        first_error = std::current_exception();
      }
    }
  }
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace pcml
