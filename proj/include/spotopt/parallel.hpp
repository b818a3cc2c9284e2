// Execution-mode switch and deterministic parallel primitives.
//
// Every hot kernel in this project exists in two variants: a plain serial
// loop (the reference) and an OpenMP version. Both produce bit-identical
// results for any thread count: reductions are computed over fixed-size
// blocks whose partials are combined in index order, so a trace produced
// on one machine configuration replays exactly on another thread count.

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace spotopt {

enum class Exec { serial, parallel };

// Process-wide default used by kernels when no explicit Exec is passed.
Exec default_exec();
void set_default_exec(Exec e);

int max_threads();

// Caps the OpenMP worker count (no-op without OpenMP or for n < 1).
void set_thread_cap(int n);

// Fixed block size for deterministic reductions. Independent of thread
// count by design; changing it changes the rounding of block sums.
inline constexpr std::size_t kReduceBlock = 4096;

namespace detail {

template <class F>
double block_sum_impl(std::size_t n, F&& term, bool par) {
  if (n == 0) return 0.0;
  const std::size_t nblocks = (n + kReduceBlock - 1) / kReduceBlock;
  std::vector<double> partial(nblocks, 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#endif
  for (std::int64_t b = 0; b < static_cast<std::int64_t>(nblocks); ++b) {
    const std::size_t lo = static_cast<std::size_t>(b) * kReduceBlock;
    const std::size_t hi = lo + kReduceBlock < n ? lo + kReduceBlock : n;
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += term(i);
    partial[static_cast<std::size_t>(b)] = s;
  }
  (void)par;
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

}  // namespace detail

// Deterministic sum of term(i) for i in [0, n): identical result in serial
// and parallel mode.
template <class F>
double block_sum(std::size_t n, F&& term, Exec e) {
  return detail::block_sum_impl(n, term, e == Exec::parallel);
}
template <class F>
double block_sum(std::size_t n, F&& term) {
  return block_sum(n, term, default_exec());
}

// Parallel loop over [0, n) with independent iterations.
template <class F>
void parallel_for(std::int64_t n, F&& body, Exec e) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (e == Exec::parallel)
#endif
  for (std::int64_t i = 0; i < n; ++i) body(i);
  (void)e;
}
template <class F>
void parallel_for(std::int64_t n, F&& body) {
  parallel_for(n, body, default_exec());
}

}  // namespace spotopt
