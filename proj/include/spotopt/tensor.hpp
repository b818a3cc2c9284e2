// Small dense row-major matrix type and blocked matrix products.
//
// Everything is templated on the scalar type: double for tight-tolerance
// checks, float for the training hot path. Parallel and serial execution
// give bit-identical results (row-partitioned work, fixed-order inner
// accumulation).

#pragma once

#include <cassert>
#include <cstdint>
#include <cstring>
#include <vector>

#include "spotopt/parallel.hpp"

namespace spotopt {

template <class T>
struct Mat {
  std::int64_t rows = 0, cols = 0;
  std::vector<T> a;

  Mat() = default;
  Mat(std::int64_t r, std::int64_t c) : rows(r), cols(c), a(static_cast<std::size_t>(r * c)) {}

  T* row(std::int64_t r) { return a.data() + r * cols; }
  const T* row(std::int64_t r) const { return a.data() + r * cols; }
  T& at(std::int64_t r, std::int64_t c) { return a[static_cast<std::size_t>(r * cols + c)]; }
  T at(std::int64_t r, std::int64_t c) const { return a[static_cast<std::size_t>(r * cols + c)]; }
  void zero() { std::memset(a.data(), 0, a.size() * sizeof(T)); }
};

// c = a * b (plus c when accumulate). a: [m,k], b: [k,n], c: [m,n].
// Rows of the output are partitioned across threads; each row's dot
// products accumulate over k in ascending order regardless of Exec.
template <class T>
void gemm_nn(const Mat<T>& a, const Mat<T>& b, Mat<T>& c, bool accumulate = false,
             Exec e = default_exec()) {
  assert(a.cols == b.rows && a.rows == c.rows && b.cols == c.cols);
  const std::int64_t m = a.rows, k = a.cols, n = b.cols;
  parallel_for(
      m,
      [&](std::int64_t i) {
        T* ci = c.a.data() + i * n;
        if (!accumulate) std::memset(ci, 0, static_cast<std::size_t>(n) * sizeof(T));
        const T* ai = a.a.data() + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
          const T av = ai[p];
          const T* bp = b.a.data() + p * n;
          for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
      },
      e);
}

// c = a^T * b. a: [k,m], b: [k,n], c: [m,n]. Output rows are processed in
// blocks; within a block the k loop runs outermost so the reads of a stay
// contiguous and the b row stays cached. Accumulation order over k is fixed
// for every output element.
template <class T>
void gemm_tn(const Mat<T>& a, const Mat<T>& b, Mat<T>& c, bool accumulate = false,
             Exec e = default_exec()) {
  assert(a.rows == b.rows && a.cols == c.rows && b.cols == c.cols);
  const std::int64_t k = a.rows, m = a.cols, n = b.cols;
  constexpr std::int64_t kBlock = 64;
  const std::int64_t nblocks = (m + kBlock - 1) / kBlock;
  parallel_for(
      nblocks,
      [&](std::int64_t blk) {
        const std::int64_t i0 = blk * kBlock;
        const std::int64_t i1 = i0 + kBlock < m ? i0 + kBlock : m;
        if (!accumulate)
          for (std::int64_t i = i0; i < i1; ++i)
            std::memset(c.a.data() + i * n, 0, static_cast<std::size_t>(n) * sizeof(T));
        for (std::int64_t p = 0; p < k; ++p) {
          const T* ap = a.a.data() + p * m;
          const T* bp = b.a.data() + p * n;
          for (std::int64_t i = i0; i < i1; ++i) {
            const T av = ap[i];
            T* ci = c.a.data() + i * n;
            for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
          }
        }
      },
      e);
}

// c = a * b^T. a: [m,k], b: [n,k], c: [m,n]. b is transposed into scratch
// once so the inner kernel runs with unit-stride access like gemm_nn.
template <class T>
void gemm_nt(const Mat<T>& a, const Mat<T>& b, Mat<T>& c, bool accumulate = false,
             Exec e = default_exec()) {
  assert(a.cols == b.cols && a.rows == c.rows && b.rows == c.cols);
  const std::int64_t m = a.rows, k = a.cols, n = b.rows;
  Mat<T> bt(k, n);
  parallel_for(
      n,
      [&](std::int64_t j) {
        const T* bj = b.a.data() + j * k;
        for (std::int64_t p = 0; p < k; ++p) bt.a[static_cast<std::size_t>(p * n + j)] = bj[p];
      },
      e);
  parallel_for(
      m,
      [&](std::int64_t i) {
        T* ci = c.a.data() + i * n;
        if (!accumulate) std::memset(ci, 0, static_cast<std::size_t>(n) * sizeof(T));
        const T* ai = a.a.data() + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
          const T av = ai[p];
          const T* bp = bt.a.data() + p * n;
          for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
      },
      e);
}

}  // namespace spotopt
